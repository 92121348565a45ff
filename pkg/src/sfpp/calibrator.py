"""Unsupervised calibration of classifier logits.

Fits class-conditional Gaussians with a single shared covariance to the
logit rows (clustered by the model's own argmax predictions) and replaces
softmax confidence with the resulting posterior. Because the covariance is
estimated from every logit row, between-cluster spread inflates it and the
posteriors come out flatter than softmax, which is the whole point: the
effect mirrors raising the softmax temperature, without labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numerics
from .errors import DegenerateInputError, NumericalError
from .ingest import DatasetBundle

MODES = ("bayes", "literal")


@dataclass(frozen=True)
class CalibratorConfig:
    mode: str = "bayes"
    cov_jitter: float = 1e-6
    normalize_threshold: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise DegenerateInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cov_jitter < 0:
            raise DegenerateInputError("cov_jitter must be >= 0")


@dataclass(frozen=True)
class GaussianModel:
    """Fitted calibrator: per-class means, inter-cluster priors, shared covariance."""

    means: np.ndarray                 # (C, C), row i is the class-i mean in logit space
    log_priors: np.ndarray            # (C,), defined up to a shared constant
    covariance_factor: numerics.CholeskyFactor
    represented: np.ndarray           # (C,) bool, class had at least one pseudo-labeled row
    sigma_inv_scale: float            # quadratic-form scaling; 1.0 unless C is large

    @property
    def class_count(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class CalibratedOutput:
    log_posteriors: np.ndarray        # (n, C), rows normalized in log space
    posteriors: np.ndarray            # (n, C), rows sum to 1


def pseudo_labels(logits) -> np.ndarray:
    """Per-row argmax; ties break toward the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise DegenerateInputError("logits contain non-finite entries")
    return np.argmax(logits, axis=1)


def _whiten(factor: numerics.CholeskyFactor, rows: np.ndarray) -> np.ndarray:
    """Map row vectors through L^-1 so squared distances become Mahalanobis."""
    return scipy.linalg.solve_triangular(
        factor.lower, rows.T, lower=True, check_finite=False
    ).T


def _pairwise_sq_mahalanobis(factor, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) matrix of squared Mahalanobis distances."""
    wa = _whiten(factor, a)
    wb = _whiten(factor, b)
    out = np.empty((wa.shape[0], wb.shape[0]))
    for j in range(wb.shape[0]):
        diff = wa - wb[j]
        out[:, j] = np.einsum("ik,ik->i", diff, diff)
    return out


def log_gaussian(factor: numerics.CholeskyFactor, mu, x, sigma_inv_scale: float = 1.0) -> float:
    """Log density of x under N(mu, Sigma), quadratic form scaled by sigma_inv_scale.

    The Mahalanobis term comes from a triangular solve against the factor,
    never from an explicit inverse.
    """
    mu = np.asarray(mu, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = factor.dim
    if mu.shape != (d,) or x.shape != (d,):
        raise DegenerateInputError(
            f"mu/x must be length-{d} vectors, got {mu.shape} and {x.shape}"
        )
    y = scipy.linalg.solve_triangular(factor.lower, x - mu, lower=True, check_finite=False)
    m2 = float(y @ y)
    return -0.5 * (factor.log_det + d * numerics.LN_2PI + sigma_inv_scale * m2)


def fit(logits, config: CalibratorConfig = CalibratorConfig()) -> GaussianModel:
    """Estimate means, priors and the shared covariance from target logits alone.

    Cluster means come from the argmax pseudo-labels; classes that never win
    an argmax keep a zero mean vector. The covariance pools every logit row.
    A class prior is the reciprocal of the summed densities of its mean under
    the other classes' Gaussians, so isolated clusters weigh more. Past
    ``normalize_threshold`` classes the inverse covariance is rescaled to
    unit Frobenius norm to keep the quadratic forms tame.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DegenerateInputError(f"logits must be 2-D, got shape {logits.shape}")
    n, c = logits.shape
    if n < 2:
        raise DegenerateInputError(f"fit needs at least 2 rows, got {n}")

    labels = pseudo_labels(logits)
    means = np.zeros((c, c))
    represented = np.zeros(c, dtype=bool)
    for i in range(c):
        members = logits[labels == i]
        if members.shape[0]:
            means[i] = members.mean(axis=0)
            represented[i] = True

    factor = numerics.cholesky_with_jitter(numerics.covariance(logits), config.cov_jitter)

    sigma_inv_scale = 1.0
    if c > config.normalize_threshold:
        inv = numerics.solve_spd(factor, np.eye(c))
        sigma_inv_scale = 1.0 / float(np.linalg.norm(inv))

    # log prior_i = -log sum_{j != i} N(mu_i; mu_j, Sigma)
    d2 = _pairwise_sq_mahalanobis(factor, means, means)
    pair_logs = -0.5 * (factor.log_det + c * numerics.LN_2PI + sigma_inv_scale * d2)
    np.fill_diagonal(pair_logs, -np.inf)
    log_priors = -numerics.logsumexp(pair_logs, axis=1)
    if np.any(np.isnan(log_priors)):
        raise NumericalError("NaN while estimating class priors")

    return GaussianModel(
        means=means,
        log_priors=log_priors,
        covariance_factor=factor,
        represented=represented,
        sigma_inv_scale=sigma_inv_scale,
    )


def _scores_bayes(model: GaussianModel, x: np.ndarray) -> np.ndarray:
    """Unnormalized log posterior rows; the shared Gaussian constant is omitted."""
    d2 = _pairwise_sq_mahalanobis(model.covariance_factor, x, model.means)
    return -0.5 * model.sigma_inv_scale * d2 + model.log_priors


def _scores_literal(model: GaussianModel, x: np.ndarray) -> np.ndarray:
    """Literal three-term decomposition with full density constants.

    The third term sums density products over every ordered class pair, so
    it is a per-row constant; it still gets evaluated for fidelity.
    """
    f = model.covariance_factor
    c = model.class_count
    const = -0.5 * (f.log_det + c * numerics.LN_2PI)
    like = const - 0.5 * model.sigma_inv_scale * _pairwise_sq_mahalanobis(f, x, model.means)
    pair = const - 0.5 * model.sigma_inv_scale * _pairwise_sq_mahalanobis(f, model.means, model.means)
    np.fill_diagonal(pair, -np.inf)
    cross = numerics.logsumexp(pair, axis=1)          # per class j: sum over i != j
    third = numerics.logsumexp(like + cross, axis=1)  # per sample, constant across classes
    return like + model.log_priors - third[:, None]


def log_posterior_matrix(model: GaussianModel, x, mode: str = "bayes") -> np.ndarray:
    """Row-normalized log posteriors for a batch of logit rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.class_count:
        raise DegenerateInputError(
            f"rows have width {x.shape[1]}, model has {model.class_count} classes"
        )
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("logit rows contain non-finite entries")
    if mode == "bayes":
        scores = _scores_bayes(model, x)
    elif mode == "literal":
        scores = _scores_literal(model, x)
    else:
        raise DegenerateInputError(f"mode must be one of {MODES}, got {mode!r}")
    if np.any(np.isnan(scores)):
        raise NumericalError(f"NaN in intermediate {mode}-mode scores")
    out = scores - numerics.logsumexp(scores, axis=1)[:, None]
    if np.any(np.isnan(out)):
        raise NumericalError("NaN in normalized log posteriors")
    return out


def log_posterior(model: GaussianModel, x, mode: str = "bayes") -> np.ndarray:
    """Row-normalized log posterior of a single logit vector."""
    return log_posterior_matrix(model, np.asarray(x, dtype=np.float64)[None, :], mode)[0]


def posterior_matrix(model: GaussianModel, x, mode: str = "bayes") -> np.ndarray:
    """exp of the log posteriors, renormalized so each row sums to exactly 1."""
    p = np.exp(log_posterior_matrix(model, x, mode))
    return p / p.sum(axis=1, keepdims=True)


def calibrate(bundle: DatasetBundle, config: CalibratorConfig = CalibratorConfig()) -> CalibratedOutput:
    """Fit on the bundle's target logits and map every row to its posterior."""
    model = fit(bundle.target_logits, config)
    log_post = log_posterior_matrix(model, bundle.target_logits, config.mode)
    p = np.exp(log_post)
    return CalibratedOutput(log_posteriors=log_post, posteriors=p / p.sum(axis=1, keepdims=True))
