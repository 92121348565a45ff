"""Gradient-norm correctness rule on calibrated posteriors.

A sample counts as correctly predicted when the cross-entropy gradient
toward its own pseudo-label is smaller (in last-layer norm) than the
gradient toward the uniform distribution. The predicted accuracy is the
fraction of samples passing that test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import calibrator, numerics
from .calibrator import CalibratorConfig, GaussianModel
from .errors import DegenerateInputError
from .ingest import DatasetBundle, EstimateReport

METHOD_ID = "calibrated-gradnorm"


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "bayes"
    eq5_literal: bool = False
    cov_jitter: float = 1e-6
    normalize_threshold: int = 32

    def calibrator_config(self) -> CalibratorConfig:
        return CalibratorConfig(
            mode=self.mode,
            cov_jitter=self.cov_jitter,
            normalize_threshold=self.normalize_threshold,
        )

    def echo(self) -> dict:
        return {
            "mode": self.mode,
            "eq5_literal": self.eq5_literal,
            "cov_jitter": self.cov_jitter,
            "normalize_threshold": self.normalize_threshold,
        }


@dataclass(frozen=True)
class Verdict:
    sample_index: int
    grad_norm_pl: float
    grad_norm_uniform: float
    correct: bool


def _check_target(target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 1 or abs(float(target.sum()) - 1.0) > 1e-8 or np.any(target < -1e-12):
        raise DegenerateInputError("target must be a probability vector summing to 1")
    return target


def _ce_loss_rows(model: GaussianModel, z: np.ndarray, targets: np.ndarray, mode: str) -> np.ndarray:
    log_post = calibrator.log_posterior_matrix(model, z, mode)
    return -np.einsum("nc,nc->n", targets, log_post)


def _grad_batch_bayes(model: GaussianModel, residuals: np.ndarray) -> np.ndarray:
    """Closed-form loss gradients wrt logits, one row per sample.

    residuals holds posterior-minus-target rows; the gradient is
    sigma_inv_scale * Sigma^-1 (means^T @ residual) because the residual
    entries sum to zero and kill the z-dependent term.
    """
    rhs = model.means.T @ residuals.T
    return (model.sigma_inv_scale * numerics.solve_spd(model.covariance_factor, rhs)).T


def _grad_batch_fd(model: GaussianModel, z: np.ndarray, targets: np.ndarray, mode: str) -> np.ndarray:
    """Central finite differences of the per-sample loss, column by column."""
    n, c = z.shape
    grads = np.empty((n, c))
    for j in range(c):
        h = 1e-5 * (1.0 + np.abs(z[:, j]))
        zp = z.copy()
        zp[:, j] += h
        zm = z.copy()
        zm[:, j] -= h
        plus = _ce_loss_rows(model, zp, targets, mode)
        minus = _ce_loss_rows(model, zm, targets, mode)
        grads[:, j] = (plus - minus) / (2.0 * h)
    return grads


def grad_wrt_logits(model: GaussianModel, x, target, mode: str = "bayes") -> np.ndarray:
    """Gradient of the calibrated cross-entropy loss with respect to the logits.

    Analytic in bayes mode; literal mode falls back to central finite
    differences since its as-printed score has no tidy closed form.
    """
    x = np.asarray(x, dtype=np.float64)
    target = _check_target(target)
    if mode == "bayes":
        s = calibrator.posterior_matrix(model, x[None, :], mode)[0]
        return _grad_batch_bayes(model, (s - target)[None, :])[0]
    return _grad_batch_fd(model, x[None, :], target[None, :], mode)[0]


def grad_norm_pair(model: GaussianModel, x, feature_norm: float | None = None,
                   mode: str = "bayes") -> tuple[float, float]:
    """Last-layer gradient norms toward the pseudo-label and toward uniform.

    With a feature norm available the rank-1 structure of the last-layer
    gradient gives a Frobenius norm of ||g|| * sqrt(feature_norm^2 + 1);
    without one the logit-space norm is reported. Either way the PL-vs-
    uniform comparison is unchanged, as the factor multiplies both sides.
    """
    if feature_norm is not None and not feature_norm > 0.0:
        raise DegenerateInputError(f"feature_norm must be positive, got {feature_norm}")
    x = np.asarray(x, dtype=np.float64)
    c = model.class_count
    s = calibrator.posterior_matrix(model, x[None, :], mode)[0]
    pl = np.zeros(c)
    pl[int(np.argmax(s))] = 1.0
    uniform = np.full(c, 1.0 / c)
    g_pl = grad_wrt_logits(model, x, pl, mode)
    g_u = grad_wrt_logits(model, x, uniform, mode)
    factor = float(np.sqrt(feature_norm * feature_norm + 1.0)) if feature_norm is not None else 1.0
    return float(np.linalg.norm(g_pl) * factor), float(np.linalg.norm(g_u) * factor)


def judge(pair: tuple[float, float], sample_index: int = 0, eq5_literal: bool = False) -> Verdict:
    """Correct iff the pseudo-label gradient norm is strictly smaller; ties lose."""
    pl, uniform = float(pair[0]), float(pair[1])
    correct = (uniform < pl) if eq5_literal else (pl < uniform)
    return Verdict(sample_index=sample_index, grad_norm_pl=pl,
                   grad_norm_uniform=uniform, correct=correct)


def predict_accuracy(bundle: DatasetBundle, config: EstimatorConfig = EstimatorConfig(),
                     seed: int | None = None) -> EstimateReport:
    """Calibrate the bundle, judge every sample, and aggregate to an accuracy."""
    t0 = time.perf_counter()
    z = bundle.target_logits
    n, c = z.shape
    model = calibrator.fit(z, config.calibrator_config())
    s = calibrator.posterior_matrix(model, z, config.mode)

    pl_idx = np.argmax(s, axis=1)
    onehot = np.zeros_like(s)
    onehot[np.arange(n), pl_idx] = 1.0
    uniform_targets = np.full_like(s, 1.0 / c)
    if config.mode == "bayes":
        g_pl = _grad_batch_bayes(model, s - onehot)
        g_u = _grad_batch_bayes(model, s - uniform_targets)
    else:
        g_pl = _grad_batch_fd(model, z, onehot, config.mode)
        g_u = _grad_batch_fd(model, z, uniform_targets, config.mode)

    if bundle.target_features is not None:
        feat_sq = np.einsum("nd,nd->n", bundle.target_features, bundle.target_features)
        factor = np.sqrt(feat_sq + 1.0)
    else:
        factor = np.ones(n)
    norm_pl = np.sqrt(np.einsum("nc,nc->n", g_pl, g_pl)) * factor
    norm_u = np.sqrt(np.einsum("nc,nc->n", g_u, g_u)) * factor

    correct = (norm_u < norm_pl) if config.eq5_literal else (norm_pl < norm_u)
    echo = config.echo()
    echo["pl_vs_raw_argmax_disagreements"] = int(np.sum(pl_idx != np.argmax(z, axis=1)))
    return EstimateReport(
        method=METHOD_ID,
        predicted_accuracy=float(np.count_nonzero(correct)) / n,
        n_samples=n,
        per_sample_correct=correct.astype(np.int8),
        grad_norm_pairs=np.column_stack([norm_pl, norm_u]),
        config_echo=echo,
        elapsed_ms=(time.perf_counter() - t0) * 1000.0,
        seed=seed,
    )
