"""Synthetic distribution-shift benchmark with known ground-truth accuracy.

Each scenario draws Gaussian class clusters, trains a small multinomial
logistic regression on the source split, shifts the clusters for the target
split, and hands the resulting logits to every estimator. Because the
labels are generated they are held back as ground truth, so absolute error
is exact. Everything is driven by a self-contained xorshift64* generator,
so a scenario is reproducible bit for bit from its fields alone.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, estimator, ingest
from .errors import DegenerateInputError
from .ingest import DatasetBundle

CLUSTER_SPREAD = 2.4  # standard deviation of the cluster-center draw

SOURCE_FREE = (estimator.METHOD_ID,) + baselines.SOURCE_FREE_METHODS
SOURCE_BASED = baselines.SOURCE_BASED_METHODS
ALL_METHODS = SOURCE_FREE + SOURCE_BASED

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integers into one well-scrambled 64-bit seed."""
    acc = 0x8000000000000001
    for p in parts:
        acc = _splitmix64(acc ^ (p & _MASK64))
    return acc


class Xorshift64Star:
    """xorshift64* with the standard shift triple (12, 25, 27).

    The 64-bit state advances as x ^= x>>12; x ^= x<<25; x ^= x>>27 and the
    output is state * 0x2545F4914F6CDD1D. Seeds pass through one splitmix64
    scramble so any integer (including 0) yields a valid nonzero state.
    Uniform doubles take the top 53 output bits.
    """

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        self.state = _splitmix64(seed & _MASK64) or 0x9E3779B97F4A7C15
        self._spare = None

    def u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULTIPLIER) & _MASK64

    def random(self) -> float:
        return (self.u64() >> 11) * (2.0 ** -53)

    def gauss(self) -> float:
        """Standard normal via the Box-Muller transform, one spare cached."""
        if self._spare is not None:
            out, self._spare = self._spare, None
            return out
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        out = np.empty((rows, cols))
        for i in range(rows):
            for j in range(cols):
                out[i, j] = self.gauss()
        return out

    def pick_index(self, cdf: np.ndarray) -> int:
        u = self.random()
        return int(np.searchsorted(cdf, u, side="right"))

    def sample_indices(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n) by partial Fisher-Yates."""
        idx = np.arange(n)
        for i in range(k):
            j = i + int(self.random() * (n - i))
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]


@dataclass(frozen=True)
class BenchScenario:
    """Everything needed to regenerate one source/target pair bit for bit."""

    name: str
    seed: int
    class_count: int
    feature_dim: int
    n_train: int
    n_val: int
    n_target: int
    mean_shift: float
    cov_scale: float
    prior_skew: float
    cluster_spread: float = CLUSTER_SPREAD
    learning_rate: float = 2.0
    iterations: int = 800


@dataclass(frozen=True)
class GeneratedData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray


def _label_cdf(weights: np.ndarray) -> np.ndarray:
    return np.cumsum(weights / weights.sum())


def generate(scenario: BenchScenario) -> GeneratedData:
    """Sample the source and target splits of one scenario.

    Draw order is fixed: cluster centers, then per-class shift directions,
    then source samples (train followed by validation), then target
    samples. Target clusters sit at center + mean_shift * direction with
    noise scaled by cov_scale, and target labels follow the skewed prior;
    all three shift knobs at their neutral values reproduce the source
    distribution exactly.
    """
    c, d = scenario.class_count, scenario.feature_dim
    if c < 2 or d < 1:
        raise DegenerateInputError(f"scenario needs C>=2 and d>=1, got C={c} d={d}")
    rng = Xorshift64Star(scenario.seed)

    centers = scenario.cluster_spread * rng.normal_matrix(c, d)
    directions = rng.normal_matrix(c, d)
    for i in range(c):
        norm = float(np.linalg.norm(directions[i]))
        if norm > 1e-12:
            directions[i] /= norm
        else:
            directions[i, 0] = 1.0

    source_cdf = _label_cdf(np.ones(c))
    skew = np.exp(-scenario.prior_skew * np.arange(c) / (c - 1))
    target_cdf = _label_cdf(skew)
    target_centers = centers + scenario.mean_shift * directions

    def draw(n, cdf, cluster_centers, noise_scale):
        xs = np.empty((n, d))
        ys = np.empty(n, dtype=np.int64)
        for i in range(n):
            y = rng.pick_index(cdf)
            ys[i] = y
            for j in range(d):
                xs[i, j] = cluster_centers[y, j] + noise_scale * rng.gauss()
        return xs, ys

    train_x, train_y = draw(scenario.n_train, source_cdf, centers, 1.0)
    val_x, val_y = draw(scenario.n_val, source_cdf, centers, 1.0)
    target_x, target_y = draw(scenario.n_target, target_cdf, target_centers, scenario.cov_scale)
    return GeneratedData(train_x, train_y, val_x, val_y, target_x, target_y)


def train_classifier(x: np.ndarray, y: np.ndarray, class_count: int,
                     learning_rate: float, iterations: int,
                     return_losses: bool = False):
    """Multinomial logistic regression by full-batch gradient descent.

    Parameters start at zero, the step size is fixed, and every pass uses
    the whole batch, so the run is deterministic and the loss sequence is
    non-increasing for sane step sizes.
    """
    n, d = x.shape
    w = np.zeros((class_count, d))
    b = np.zeros(class_count)
    onehot = np.zeros((n, class_count))
    onehot[np.arange(n), y] = 1.0
    losses = []
    for _ in range(iterations):
        z = x @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        if return_losses:
            losses.append(float(-np.mean(np.log(s[np.arange(n), y] + 1e-300))))
        grad = (s - onehot) / n
        w -= learning_rate * (grad.T @ x)
        b -= learning_rate * grad.sum(axis=0)
    if return_losses:
        return w, b, losses
    return w, b


def logits_of(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w.T + b


# -------------------------------------------------------------------- suite

@dataclass
class MaeTable:
    """Per-scenario absolute errors plus ratio sweep records for every method."""

    scenarios: list            # [{name, seed, true_accuracy}]
    methods: list              # method ids in run order
    ratios: list
    trials: int
    per_scenario_ae: dict      # method -> {scenario name -> headline AE (largest ratio)}
    mae: dict                  # method -> mean headline AE
    ratio_mean_ae: dict        # method -> {ratio -> mean AE over scenarios and trials}
    ratio_std_ae: dict         # method -> {ratio -> mean over scenarios of per-scenario std}
    rows: list = field(default_factory=list)  # (scenario, method, ratio, trial, ae | None)


def _run_source_free(method, bundle, scenario):
    if method == estimator.METHOD_ID:
        return estimator.predict_accuracy(bundle, seed=scenario.seed)
    return baselines.run_baseline(method, bundle, seed=scenario.seed)


def run_scenario(scenario: BenchScenario, methods, ratios, trials: int):
    """Run every requested estimator on one scenario; returns (true_acc, rows).

    Source-free estimators run once and their error is copied to every
    ratio. Source-based estimators see ``trials`` seeded subsamples of the
    validation split per ratio; the full-ratio subsample is canonical (no
    permutation) so repeat trials there are literally the same run. A ratio
    that leaves fewer than two validation samples is recorded as None.
    """
    data = generate(scenario)
    w, b = train_classifier(
        data.train_x, data.train_y, scenario.class_count,
        scenario.learning_rate, scenario.iterations,
    )
    target_logits = logits_of(data.target_x, w, b)
    val_logits = logits_of(data.val_x, w, b)
    true_acc = float(np.mean(np.argmax(target_logits, axis=1) == data.target_y))

    base_bundle = DatasetBundle(
        target_logits=target_logits,
        class_count=scenario.class_count,
        target_features=data.target_x,
        last_layer_weights=w,
        last_layer_bias=b,
    )
    n_val = scenario.n_val
    subsamples = {}
    for r_idx, ratio in enumerate(ratios):
        count = int(ratio * n_val)
        for trial in range(trials):
            if count >= n_val:
                subsamples[(r_idx, trial)] = np.arange(n_val)
            elif count >= 2:
                rng = Xorshift64Star(mix_seed(scenario.seed, r_idx, trial))
                subsamples[(r_idx, trial)] = rng.sample_indices(n_val, count)
            else:
                subsamples[(r_idx, trial)] = None

    rows = []
    for method in methods:
        if method in SOURCE_FREE:
            report = _run_source_free(method, base_bundle, scenario)
            ae = abs(report.predicted_accuracy - true_acc)
            for ratio in ratios:
                rows.append((scenario.name, method, ratio, 0, ae))
            continue
        warm_cache = {}
        for r_idx, ratio in enumerate(ratios):
            full_run_ae = None
            for trial in range(trials):
                idx = subsamples[(r_idx, trial)]
                if idx is None:
                    rows.append((scenario.name, method, ratio, trial, None))
                    continue
                if len(idx) >= n_val and full_run_ae is not None:
                    rows.append((scenario.name, method, ratio, trial, full_run_ae))
                    continue
                bundle = DatasetBundle(
                    target_logits=target_logits,
                    class_count=scenario.class_count,
                    target_features=data.target_x,
                    val_logits=val_logits[idx],
                    val_labels=data.val_y[idx],
                )
                report = baselines.run_baseline(
                    method, bundle, seed=scenario.seed, _warm_cache=warm_cache
                )
                ae = abs(report.predicted_accuracy - true_acc)
                if len(idx) >= n_val:
                    full_run_ae = ae
                rows.append((scenario.name, method, ratio, trial, ae))
    return true_acc, rows


def worker_count() -> int:
    """Worker cap from SFPP_THREADS; 0 means one per CPU, unset means 1."""
    raw = os.environ.get("SFPP_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise DegenerateInputError(f"SFPP_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise DegenerateInputError(f"SFPP_THREADS must be >= 0, got {value}")
    return value if value > 0 else (os.cpu_count() or 1)


def run_suite(scenarios, methods=ALL_METHODS, inclusion_ratios=(0.01, 0.05, 0.1, 1.0),
              trials: int = 20) -> MaeTable:
    """Run all scenarios and aggregate absolute errors into a table.

    Scenarios are independent and may run on worker threads; rows are
    assembled in scenario order regardless of how many workers ran, so the
    output is identical for any SFPP_THREADS setting.
    """
    methods = list(methods)
    ratios = list(inclusion_ratios)
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise DegenerateInputError(f"unknown methods {unknown}; known ids: {ALL_METHODS}")

    workers = min(worker_count(), len(scenarios)) or 1
    if workers == 1:
        results = [run_scenario(s, methods, ratios, trials) for s in scenarios]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: run_scenario(s, methods, ratios, trials), scenarios))

    rows = []
    scenario_meta = []
    for scenario, (true_acc, scenario_rows) in zip(scenarios, results):
        scenario_meta.append({"name": scenario.name, "seed": scenario.seed,
                              "true_accuracy": true_acc})
        rows.extend(scenario_rows)

    headline_ratio = max(ratios)
    buckets: dict = {}
    for sname, method, ratio, _trial, ae in rows:
        if ae is not None:
            buckets.setdefault((method, ratio, sname), []).append(ae)

    per_scenario_ae = {m: {} for m in methods}
    ratio_mean = {m: {} for m in methods}
    ratio_std = {m: {} for m in methods}
    for method in methods:
        for ratio in ratios:
            stds, pooled = [], []
            for scenario in scenarios:
                aes = buckets.get((method, ratio, scenario.name))
                if not aes:
                    continue
                # identical trials (e.g. the canonical full-ratio run) have zero spread
                stds.append(0.0 if len(set(aes)) == 1 else float(np.std(aes)))
                pooled.extend(aes)
                if ratio == headline_ratio:
                    per_scenario_ae[method][scenario.name] = float(np.mean(aes))
            if pooled:
                ratio_mean[method][ratio] = float(np.mean(pooled))
                ratio_std[method][ratio] = float(np.mean(stds))
    mae = {
        m: float(np.mean(list(per_scenario_ae[m].values())))
        for m in methods if per_scenario_ae[m]
    }
    return MaeTable(
        scenarios=scenario_meta,
        methods=methods,
        ratios=ratios,
        trials=trials,
        per_scenario_ae=per_scenario_ae,
        mae=mae,
        ratio_mean_ae=ratio_mean,
        ratio_std_ae=ratio_std,
        rows=rows,
    )


def default_suite(base_seed: int = 0) -> list[BenchScenario]:
    """Twenty scenarios spanning mild to heavy distribution shift.

    Class counts sit in the 10 to 24 range, sources are separable enough
    that the trained classifier becomes overconfident, and the shift knobs
    sweep target accuracy from near 1.0 down to the low 0.6s, which is the
    regime the gradient-norm estimators are meant to disagree in.
    """
    grid = [
        # (C, d, cluster_spread, mean_shift, cov_scale, prior_skew)
        (10, 14, 3.4, 2.0, 1.3, 0.0),
        (12, 16, 3.4, 3.0, 1.5, 0.2),
        (16, 20, 3.2, 4.0, 1.7, 0.0),
        (20, 24, 3.0, 5.0, 2.0, 0.3),
        (10, 12, 3.0, 6.0, 2.6, 0.3),
        (12, 14, 3.0, 7.0, 2.8, 0.2),
        (14, 16, 2.9, 8.0, 3.0, 0.6),
        (16, 18, 2.8, 6.0, 2.6, 0.0),
        (16, 18, 2.8, 9.0, 3.2, 0.3),
        (20, 22, 2.6, 8.0, 3.0, 0.2),
        (24, 26, 2.5, 9.0, 3.2, 0.0),
        (12, 14, 2.9, 8.5, 3.0, 0.4),
        (10, 12, 3.0, 9.0, 3.2, 0.5),
        (12, 14, 2.8, 10.0, 3.4, 0.4),
        (16, 20, 2.6, 12.0, 3.8, 0.5),
        (20, 24, 2.6, 11.0, 3.6, 0.4),
        (10, 12, 2.9, 10.0, 3.4, 0.2),
        (14, 16, 2.8, 10.0, 3.4, 0.3),
        (16, 18, 2.7, 11.0, 3.6, 0.1),
        (12, 14, 2.9, 9.0, 3.2, 0.6),
    ]
    scenarios = []
    for i, (c, d, spread, shift, cov, skew) in enumerate(grid):
        scenarios.append(BenchScenario(
            name=f"s{i:02d}",
            seed=mix_seed(base_seed, i),
            class_count=c,
            feature_dim=d,
            n_train=1200,
            n_val=800,
            n_target=1500,
            mean_shift=shift,
            cov_scale=cov,
            prior_skew=skew,
            cluster_spread=spread,
        ))
    return scenarios


def mae_table_doc(table: MaeTable) -> dict:
    """MaeTable as a JSON-ready dict with a fixed key layout."""
    def ratio_map(per_method):
        return {
            method: {ingest.format_real(r): v for r, v in sorted(values.items())}
            for method, values in per_method.items()
        }

    return {
        "trials": table.trials,
        "ratios": list(table.ratios),
        "methods": list(table.methods),
        "scenarios": table.scenarios,
        "per_scenario_ae": table.per_scenario_ae,
        "mae": table.mae,
        "ratio_mean_ae": ratio_map(table.ratio_mean_ae),
        "ratio_std_ae": ratio_map(table.ratio_std_ae),
    }


def mae_table_csv(table: MaeTable) -> str:
    """Long-format sweep records; an unavailable run leaves the ae field empty."""
    lines = ["scenario,method,ratio,trial,ae"]
    for sname, method, ratio, trial, ae in table.rows:
        ae_text = "" if ae is None else ingest.format_real(ae)
        lines.append(f"{sname},{method},{ingest.format_real(ratio)},{trial},{ae_text}")
    return "\n".join(lines) + "\n"


def write_mae_table(table: MaeTable, out_dir) -> tuple[str, str]:
    """Write mae_table.json and mae_table.csv under out_dir; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "mae_table.json"
    csv_path = out / "mae_table.csv"
    json_path.write_bytes(ingest.to_json_text(mae_table_doc(table)).encode("utf-8"))
    csv_path.write_bytes(mae_table_csv(table).encode("utf-8"))
    return str(json_path), str(csv_path)


def scenario_from_dict(doc: dict) -> BenchScenario:
    return BenchScenario(**doc)


def scenario_to_dict(s: BenchScenario) -> dict:
    return asdict(s)


def shift_suite_seed(scenarios, base_seed: int):
    """Re-derive every scenario seed from a new base, keeping the grid."""
    return [replace(s, seed=mix_seed(base_seed, i)) for i, s in enumerate(scenarios)]
