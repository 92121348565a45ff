"""Deterministic dense linear-algebra and log-domain kernels.

Every function here is pure and runs single-threaded with a fixed
reduction order, so identical inputs give bitwise-identical outputs no
matter how many worker threads the caller spreads its samples over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, DegenerateInputError, SingularMatrixError

LN_2PI = math.log(2.0 * math.pi)

# Rows per partial-sum block in covariance(). Fixed so the summation
# order never depends on input size, threading, or chunking.
_COV_BLOCK = 256

_JACOBI_MAX_SWEEPS = 100
_JACOBI_OFF_TOL = 1e-12


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of a (possibly jitter-regularized) SPD matrix.

    ``lower @ lower.T`` reproduces the regularized input;
    ``log_det`` is the log-determinant of that regularized matrix.
    """

    lower: np.ndarray
    jitter_used: float
    log_det: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DegenerateInputError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return a


def _neumaier_add(total: np.ndarray, comp: np.ndarray, part: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One compensated-summation step (Neumaier variant), elementwise."""
    t = total + part
    big = np.abs(total) >= np.abs(part)
    comp = comp + np.where(big, (total - t) + part, (part - t) + total)
    return t, comp


def covariance(samples) -> np.ndarray:
    """Unbiased sample covariance (divides by n - 1) of row vectors.

    Two passes: column means first, then the Gram matrix of the centered
    rows. Partial sums are taken over fixed 256-row blocks in index order
    and combined with compensated summation, so the result is independent
    of caller-side parallelism and exactly symmetric.
    """
    a = _as_matrix(samples, "samples")
    n, d = a.shape
    if n < 2:
        raise DegenerateInputError(f"covariance needs at least 2 samples, got {n}")

    total = np.zeros(d)
    comp = np.zeros(d)
    for start in range(0, n, _COV_BLOCK):
        total, comp = _neumaier_add(total, comp, np.sum(a[start:start + _COV_BLOCK], axis=0))
    mean = (total + comp) / n

    gram = np.zeros((d, d))
    gcomp = np.zeros((d, d))
    for start in range(0, n, _COV_BLOCK):
        centered = a[start:start + _COV_BLOCK] - mean
        part = np.einsum("ij,ik->jk", centered, centered)
        gram, gcomp = _neumaier_add(gram, gcomp, part)
    return (gram + gcomp) / (n - 1)


def cholesky_with_jitter(a, base_jitter: float) -> CholeskyFactor:
    """Factorize ``a + jitter * I``, escalating the jitter tenfold on failure.

    The jitter starts at ``base_jitter * mean(diag(a))`` and gives up once
    it exceeds ``1e6 * mean(diag(a))``. A zero or negative diagonal mean
    falls back to an absolute scale of 1 so degenerate inputs (e.g. the
    zero matrix) still regularize.
    """
    a = _as_matrix(a, "matrix")
    d = a.shape[0]
    if a.shape[1] != d:
        raise DegenerateInputError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if float(np.max(np.abs(a - a.T), initial=0.0)) > 1e-10 * scale:
        raise DegenerateInputError("matrix is not symmetric within tolerance 1e-10")

    diag_mean = float(np.mean(np.diag(a)))
    jitter_scale = diag_mean if diag_mean > 0.0 else 1.0
    limit = 1e6 * jitter_scale
    jitter = float(base_jitter) * jitter_scale
    while True:
        try:
            lower = np.linalg.cholesky(a + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            nxt = jitter * 10.0 if jitter > 0.0 else 1e-12 * jitter_scale
            if nxt > limit:
                raise SingularMatrixError(
                    f"factorization failed with jitter up to {jitter:g} (limit {limit:g})"
                ) from None
            jitter = nxt
            continue
        log_det = 2.0 * float(np.sum(np.log(np.diag(lower))))
        return CholeskyFactor(lower=lower, jitter_used=jitter, log_det=log_det)


def solve_spd(factor: CholeskyFactor, rhs) -> np.ndarray:
    """Solve ``(A + jitter*I) x = rhs`` from the Cholesky factor of A.

    Forward substitution with L, back substitution with L^T. ``rhs`` may
    be a vector or a matrix of column right-hand sides.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != factor.dim:
        raise DegenerateInputError(
            f"rhs has leading dimension {rhs.shape[0]}, factor is {factor.dim}x{factor.dim}"
        )
    y = scipy.linalg.solve_triangular(factor.lower, rhs, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(factor.lower.T, y, lower=False, check_finite=False)


def logsumexp(values, axis=None) -> np.ndarray | float:
    """Max-shifted log(sum(exp(values))).

    Entries may be -inf (empty terms); +inf and NaN are rejected. Returns
    -inf iff every entry along the reduction is -inf, and is exact for a
    single element.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DegenerateInputError("logsumexp of an empty input")
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise DegenerateInputError("logsumexp input must be free of NaN and +inf")
    m = np.max(v, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe_m), axis=axis, keepdims=True)) + safe_m
    out = np.where(np.isfinite(m), out, m)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _jacobi_eigenvalues(gram: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps.

    The matrix is scaled to unit Frobenius norm before sweeping so the
    off-diagonal convergence threshold behaves like a relative tolerance;
    eigenvalues are rescaled on return.
    """
    c = gram.shape[0]
    if c == 1:
        return gram.diagonal().copy()
    norm = float(np.linalg.norm(gram))
    if norm == 0.0:
        return np.zeros(c)

    def off_mass(a):
        strict = a - np.diag(np.diag(a))
        return float(np.linalg.norm(strict))

    m = gram / norm
    for _ in range(_JACOBI_MAX_SWEEPS):
        if off_mass(m) < _JACOBI_OFF_TOL:
            return np.diag(m) * norm
        for p in range(c - 1):
            for q in range(p + 1, c):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                # Classic stable rotation: tan(2t) = 2*apq / (aqq - app).
                tau = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau)) if tau != 0.0 else 1.0
                cos = 1.0 / math.hypot(1.0, t)
                sin = t * cos
                rp = m[p, :].copy()
                rq = m[q, :].copy()
                m[p, :] = cos * rp - sin * rq
                m[q, :] = sin * rp + cos * rq
                cp = m[:, p].copy()
                cq = m[:, q].copy()
                m[:, p] = cos * cp - sin * cq
                m[:, q] = sin * cp + cos * cq
                m[p, q] = 0.0
                m[q, p] = 0.0
    final = off_mass(m)
    if final < _JACOBI_OFF_TOL:
        return np.diag(m) * norm
    raise ConvergenceError(
        f"Jacobi sweep limit ({_JACOBI_MAX_SWEEPS}) reached, off-diagonal mass {final:.3e}"
    )


def nuclear_norm(p) -> float:
    """Sum of singular values of p, via eigenvalues of the small Gram matrix.

    Works on the C x C Gram matrix p.T @ p, which keeps the eigenproblem
    tiny when rows vastly outnumber columns. Eigenvalues more negative
    than -1e-10 (relative) indicate a broken Gram matrix and are an error;
    small negative roundoff clamps to zero.
    """
    p = _as_matrix(p, "matrix")
    gram = np.einsum("ij,ik->jk", p, p)
    eig = _jacobi_eigenvalues(gram)
    floor = -1e-10 * max(1.0, float(np.linalg.norm(gram)))
    if np.any(eig < floor):
        raise DegenerateInputError(
            f"Gram matrix has significantly negative eigenvalue {float(np.min(eig)):.3e}"
        )
    return float(np.sum(np.sqrt(np.maximum(eig, 0.0))))
