"""Reference accuracy estimators sharing the bundle/report contract.

Source-free: average confidence (ac), nuclear norm of the prediction
matrix (nuclear), and the gradient-norm rule on plain temperature-scaled
softmax (gradnorm). Source-based: validation-threshold counting (atc-*),
difference of confidences (doc), and optimal transport from the predicted
class probabilities to the validation label distribution (cot).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ConvergenceError, DegenerateInputError, MissingValidationDataError
from .ingest import DatasetBundle, EstimateReport

ATC_SCORES = ("maxprob", "negentropy", "energy")

SOURCE_FREE_METHODS = ("ac", "nuclear", "gradnorm")
SOURCE_BASED_METHODS = ("atc-prob", "atc-entropy", "atc-energy", "doc", "cot")


@dataclass(frozen=True)
class SoftmaxOutput:
    probabilities: np.ndarray
    temperature: float


def softmax(logits, temperature: float = 1.0) -> SoftmaxOutput:
    """Row-stable softmax of logits / temperature."""
    if not temperature > 0.0:
        raise DegenerateInputError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return SoftmaxOutput(probabilities=e / e.sum(axis=1, keepdims=True), temperature=temperature)


def _report(method, predicted, n, *, correct=None, pairs=None, config=None,
            t0=None, seed=None) -> EstimateReport:
    return EstimateReport(
        method=method,
        predicted_accuracy=float(predicted),
        n_samples=int(n),
        per_sample_correct=correct,
        grad_norm_pairs=pairs,
        config_echo=config or {},
        elapsed_ms=(time.perf_counter() - t0) * 1000.0 if t0 is not None else 0.0,
        seed=seed,
    )


def _need_validation(bundle: DatasetBundle, method: str) -> None:
    if not bundle.has_validation:
        raise MissingValidationDataError(
            f"{method} needs val_logits and val_labels in the bundle"
        )


# -------------------------------------------------------------- source-free

def ac(bundle: DatasetBundle, seed=None) -> EstimateReport:
    """Average of the per-row maximum softmax probability."""
    t0 = time.perf_counter()
    probs = softmax(bundle.target_logits).probabilities
    return _report("ac", probs.max(axis=1).mean(), bundle.n_target, t0=t0, seed=seed)


def nuclear_norm_score(bundle: DatasetBundle, seed=None) -> EstimateReport:
    """Nuclear norm of the softmax matrix, scaled into [0, 1] by sqrt(n*C).

    The scaling maps balanced one-hot certainty to 1 and all-uniform
    predictions to 1/C; it is this artifact's convention, not a canonical
    one.
    """
    t0 = time.perf_counter()
    probs = softmax(bundle.target_logits).probabilities
    n, c = probs.shape
    score = numerics.nuclear_norm(probs) / np.sqrt(n * c)
    return _report("nuclear", score, n, t0=t0, seed=seed)


def gradnorm(bundle: DatasetBundle, temperature: float = 1.0, seed=None) -> EstimateReport:
    """Gradient-norm rule on plain softmax: g = s - target in logit space."""
    t0 = time.perf_counter()
    s = softmax(bundle.target_logits, temperature).probabilities
    n, c = s.shape
    onehot = np.zeros_like(s)
    onehot[np.arange(n), np.argmax(s, axis=1)] = 1.0
    g_pl = s - onehot
    g_u = s - 1.0 / c
    if bundle.target_features is not None:
        feat_sq = np.einsum("nd,nd->n", bundle.target_features, bundle.target_features)
        factor = np.sqrt(feat_sq + 1.0)
    else:
        factor = np.ones(n)
    norm_pl = np.sqrt(np.einsum("nc,nc->n", g_pl, g_pl)) * factor
    norm_u = np.sqrt(np.einsum("nc,nc->n", g_u, g_u)) * factor
    correct = norm_pl < norm_u
    return _report(
        "gradnorm", np.count_nonzero(correct) / n, n,
        correct=correct.astype(np.int8),
        pairs=np.column_stack([norm_pl, norm_u]),
        config={"temperature": float(temperature)},
        t0=t0, seed=seed,
    )


# ------------------------------------------------------------- source-based

def _atc_scores(logits: np.ndarray, score: str, energy_temperature: float) -> np.ndarray:
    if score == "maxprob":
        return softmax(logits).probabilities.max(axis=1)
    if score == "negentropy":
        p = softmax(logits).probabilities
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0.0, p * np.log(p), 0.0)
        return terms.sum(axis=1)
    if score == "energy":
        t = energy_temperature
        return t * numerics.logsumexp(np.asarray(logits, dtype=np.float64) / t, axis=1)
    raise DegenerateInputError(f"score must be one of {ATC_SCORES}, got {score!r}")


def _atc_threshold(val_scores: np.ndarray, val_accuracy: float) -> float:
    """Scan candidate thresholds so P(score > t) best matches val accuracy.

    Candidates are the sorted validation scores plus one value just below
    the minimum; ties resolve toward the smaller threshold.
    """
    candidates = np.sort(val_scores)
    candidates = np.concatenate([[np.nextafter(candidates[0], -np.inf)], candidates])
    best_t = candidates[0]
    best_gap = np.inf
    for t in candidates:
        gap = abs(float(np.mean(val_scores > t)) - val_accuracy)
        if gap < best_gap or (gap == best_gap and t < best_t):
            best_gap = gap
            best_t = float(t)
    return best_t


def atc(bundle: DatasetBundle, score: str = "maxprob", energy_temperature: float = 1.0,
        seed=None) -> EstimateReport:
    """Threshold counting: pick t on validation, report P(target score > t)."""
    method = {"maxprob": "atc-prob", "negentropy": "atc-entropy", "energy": "atc-energy"}.get(score)
    if method is None:
        raise DegenerateInputError(f"score must be one of {ATC_SCORES}, got {score!r}")
    _need_validation(bundle, method)
    t0 = time.perf_counter()
    val_scores = _atc_scores(bundle.val_logits, score, energy_temperature)
    val_acc = float(np.mean(np.argmax(bundle.val_logits, axis=1) == bundle.val_labels))
    threshold = _atc_threshold(val_scores, val_acc)
    target_scores = _atc_scores(bundle.target_logits, score, energy_temperature)
    above = target_scores > threshold
    config = {"score": score, "threshold": threshold, "val_accuracy": val_acc}
    if score == "energy":
        config["energy_temperature"] = float(energy_temperature)
    return _report(
        method, above.mean(), bundle.n_target,
        correct=above.astype(np.int8), config=config, t0=t0, seed=seed,
    )


def doc(bundle: DatasetBundle, seed=None) -> EstimateReport:
    """Validation accuracy minus the confidence gap, clamped into [0, 1]."""
    _need_validation(bundle, "doc")
    t0 = time.perf_counter()
    val_conf = softmax(bundle.val_logits).probabilities.max(axis=1).mean()
    target_conf = softmax(bundle.target_logits).probabilities.max(axis=1).mean()
    val_acc = float(np.mean(np.argmax(bundle.val_logits, axis=1) == bundle.val_labels))
    predicted = min(1.0, max(0.0, val_acc - (val_conf - target_conf)))
    config = {"val_accuracy": val_acc, "val_confidence": float(val_conf),
              "target_confidence": float(target_conf)}
    return _report("doc", predicted, bundle.n_target, config=config, t0=t0, seed=seed)


# ------------------------------------------------------------------ sinkhorn

_ANNEAL_START = 0.5
_ANNEAL_STAGE_ITERS = 25


def _sinkhorn_pass(cost, log_a, log_b, epsilon, f, g):
    f = epsilon * (log_a - numerics.logsumexp((g[None, :] - cost) / epsilon, axis=1))
    g = epsilon * (log_b - numerics.logsumexp((f[:, None] - cost) / epsilon, axis=0))
    return f, g


def _dual_objective(cost, a, b, epsilon, g):
    return float(
        -epsilon * np.dot(a, numerics.logsumexp((g[None, :] - cost) / epsilon, axis=1))
        + np.dot(b, g)
    )


def _polish_class_potentials(cost, a, b, epsilon, g, budget):
    """Drive the column-marginal residual to zero on the semi-dual in g.

    With the row potentials eliminated analytically, what is left is a
    smooth concave function of the few class potentials whose gradient is
    exactly the negated marginal residual. Levenberg-Marquardt steps with
    adaptive damping handle both the quadratic basin and the stiff plateaus
    that saturated (near one-hot) probability rows create, where plain
    alternating updates decay like 1/k.
    """
    m = g.shape[0]
    eye = np.eye(m)
    lam = 1e-6
    spent = 0
    for _ in range(budget):
        logits = (g[None, :] - cost) / epsilon
        logits = logits - logits.max(axis=1, keepdims=True)
        s = np.exp(logits)
        s /= s.sum(axis=1, keepdims=True)
        col = a @ s
        residual = col - b
        if float(np.abs(residual).sum()) < 1e-13:
            break
        jac = (np.diag(col) - np.einsum("i,ij,ik->jk", a, s, s)) / epsilon
        base = _dual_objective(cost, a, b, epsilon, g)
        accepted = False
        for _ in range(80):
            delta = np.linalg.solve(jac + lam * eye, -residual)
            if _dual_objective(cost, a, b, epsilon, g + delta) >= base:
                g = g + delta
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        spent += 1
        if not accepted:
            break  # at the numerical floor; the violation check decides
    return g, spent


def sinkhorn_cost(cost: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float = 1e-2,
                  max_iters: int = 20000, tol: float = 1e-8,
                  warm_start: tuple[np.ndarray, np.ndarray] | None = None):
    """Entropically regularized transport cost by log-domain Sinkhorn.

    Returns (transported cost, (f, g) potentials, iterations). Convergence
    is declared when both marginals of the implied plan are within ``tol``
    in L1 distance of the requested ones.

    Cold-started alternating updates can stall at this regularization level
    (the violation decays like 1/k on near-degenerate instances), so the
    solve anneals the potentials through a halving epsilon schedule and then
    polishes the class potentials with damped Newton steps; the fixed point
    and the convergence criterion are unchanged. ``warm_start`` potentials
    from a similar problem skip the annealing.
    """
    n, m = cost.shape
    if a.shape != (n,) or b.shape != (m,):
        raise DegenerateInputError("marginal weights do not match the cost matrix")
    log_a = np.log(a)
    log_b = np.log(b)
    spent = 0
    if warm_start is not None:
        f, g = warm_start[0].copy(), warm_start[1].copy()
    else:
        f = np.zeros(n)
        g = np.zeros(m)
        eps_stage = _ANNEAL_START
        while eps_stage > epsilon:
            for _ in range(_ANNEAL_STAGE_ITERS):
                f, g = _sinkhorn_pass(cost, log_a, log_b, eps_stage, f, g)
            spent += _ANNEAL_STAGE_ITERS
            eps_stage /= 2.0
    g, polish_spent = _polish_class_potentials(
        cost, a, b, epsilon, g, budget=min(200, max(1, max_iters - spent))
    )
    spent += polish_spent
    f = epsilon * (log_a - numerics.logsumexp((g[None, :] - cost) / epsilon, axis=1))
    plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
    violation = max(
        float(np.abs(plan.sum(axis=1) - a).sum()),
        float(np.abs(plan.sum(axis=0) - b).sum()),
    )
    if violation >= tol:
        raise ConvergenceError(
            f"Sinkhorn did not converge within budget; marginal violation {violation:.3e}"
        )
    return float(np.sum(plan * cost)), (f, g), spent


def cot(bundle: DatasetBundle, epsilon: float = 1e-2, max_iters: int = 20000,
        seed=None, _warm_cache: dict | None = None) -> EstimateReport:
    """Transport cost from predicted probabilities to the label histogram.

    Ground cost between a probability row p and the one-hot vertex of class
    y is half the L1 distance, which collapses to 1 - p[y]. The estimated
    error is the optimal transport cost; accuracy is its complement.
    """
    _need_validation(bundle, "cot")
    t0 = time.perf_counter()
    probs = softmax(bundle.target_logits).probabilities
    n, c = probs.shape
    counts = np.bincount(bundle.val_labels, minlength=c).astype(np.float64)
    hist = counts / counts.sum()
    support = hist > 0.0
    cost = 1.0 - probs[:, support]  # 0.5 * ||p - e_y||_1 for one-hot vertices
    a = np.full(n, 1.0 / n)
    b = hist[support]
    warm = None
    if _warm_cache is not None and _warm_cache.get("support") is not None:
        if np.array_equal(_warm_cache["support"], support):
            warm = _warm_cache.get("potentials")
    try:
        ot_cost, potentials, iters = sinkhorn_cost(
            cost, a, b, epsilon=epsilon, max_iters=max_iters, warm_start=warm
        )
    except ConvergenceError:
        if warm is None:
            raise
        # stale warm start; retry through the annealing schedule
        ot_cost, potentials, iters = sinkhorn_cost(
            cost, a, b, epsilon=epsilon, max_iters=max_iters
        )
    if _warm_cache is not None:
        _warm_cache["support"] = support
        _warm_cache["potentials"] = potentials
    predicted = min(1.0, max(0.0, 1.0 - ot_cost))
    config = {"epsilon": float(epsilon), "max_iters": int(max_iters),
              "ot_cost": float(ot_cost), "sinkhorn_iterations": int(iters)}
    return _report("cot", predicted, n, config=config, t0=t0, seed=seed)


# ------------------------------------------------------------------ registry

def run_baseline(method: str, bundle: DatasetBundle, temperature: float = 1.0,
                 energy_temperature: float = 1.0, seed=None,
                 _warm_cache: dict | None = None) -> EstimateReport:
    """Dispatch a CLI method id onto the implementing estimator."""
    if method == "ac":
        return ac(bundle, seed=seed)
    if method == "nuclear":
        return nuclear_norm_score(bundle, seed=seed)
    if method == "gradnorm":
        return gradnorm(bundle, temperature=temperature, seed=seed)
    if method == "atc-prob":
        return atc(bundle, "maxprob", seed=seed)
    if method == "atc-entropy":
        return atc(bundle, "negentropy", seed=seed)
    if method == "atc-energy":
        return atc(bundle, "energy", energy_temperature=energy_temperature, seed=seed)
    if method == "doc":
        return doc(bundle, seed=seed)
    if method == "cot":
        return cot(bundle, seed=seed, _warm_cache=_warm_cache)
    raise DegenerateInputError(
        f"unknown method {method!r}; expected one of "
        f"{SOURCE_FREE_METHODS + SOURCE_BASED_METHODS}"
    )
