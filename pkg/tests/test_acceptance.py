"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
print; each test also fails normally under plain pytest.
"""

import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from sfpp import baselines, bench, calibrator, estimator
from sfpp.cli import main
from sfpp.errors import ArrayFormatError
from sfpp.ingest import DatasetBundle, read_array, write_array
from tests.test_baselines import exhaustive_transport_cost, one_hot_logits
from tests.test_calibrator import direct_log_priors, mp_bayes_posterior, random_model
from tests.test_ingest import npy_bytes


@contextmanager
def criterion(num, description):
    try:
        yield
    except BaseException:
        print(f"[criterion {num:02d}] FAIL  {description}")
        raise
    print(f"[criterion {num:02d}] PASS  {description}")


def random_bundle(rng, n, c, scale=1.0, separation=4.0):
    means = separation * np.eye(c)
    y = rng.integers(0, c, size=n)
    z = (means[y] + rng.normal(size=(n, c))) * scale
    return DatasetBundle(target_logits=z, class_count=c)


def test_criterion_01_posterior_normalization():
    with criterion(1, "posterior rows sum to 1 and are nonnegative, both modes, 1000 fixtures, <10s"):
        rng = np.random.default_rng(401)
        t0 = time.perf_counter()
        for k in range(1000):
            n = int(rng.integers(2, 513))
            c = int(rng.integers(2, 65))
            mode = "bayes" if k % 2 == 0 else "literal"
            z = rng.normal(size=(n, c)) * float(rng.uniform(0.5, 20.0))
            model = calibrator.fit(z)
            p = calibrator.posterior_matrix(model, z, mode)
            assert np.all(p >= 0.0)
            log_p = calibrator.log_posterior_matrix(model, z, mode)
            assert np.all(np.abs(np.exp(log_p).sum(axis=1) - 1.0) <= 1e-9)
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_criterion_02_gradient_matches_finite_differences():
    with criterion(2, "analytic gradient within 1e-5 relative of central differences, 100 instances, <5s"):
        from tests.test_estimator import fd_gradient

        rng = np.random.default_rng(409)
        t0 = time.perf_counter()
        for _ in range(100):
            c = int(rng.integers(2, 9))
            model = random_model(rng, c)
            x = rng.normal(size=c) * 2.0
            target = rng.dirichlet(np.ones(c))
            got = estimator.grad_wrt_logits(model, x, target)
            want = fd_gradient(model, x, target)
            rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)
            assert rel < 1e-5
        elapsed = time.perf_counter() - t0
        assert elapsed < 5.0, f"took {elapsed:.1f}s"


def test_criterion_03_rank1_reduction_verdict_agreement():
    with criterion(3, "last-layer Frobenius verdicts equal logit-space verdicts on 100 instances"):
        rng = np.random.default_rng(419)
        for _ in range(100):
            c = int(rng.integers(2, 9))
            model = random_model(rng, c)
            x = rng.normal(size=c) * 2.0
            feat_norm = float(rng.uniform(0.05, 12.0))
            bare = estimator.judge(estimator.grad_norm_pair(model, x))
            full = estimator.judge(estimator.grad_norm_pair(model, x, feature_norm=feat_norm))
            assert bare.correct == full.correct


def test_criterion_04_high_precision_oracles():
    with criterion(4, "bayes posterior within 1e-8 of direct quotient; priors within 1e-9 of direct densities"):
        rng = np.random.default_rng(421)
        for _ in range(5):
            c = int(rng.integers(2, 9))
            model = random_model(rng, c)
            cov = model.covariance_factor.lower @ model.covariance_factor.lower.T
            for _ in range(3):
                x = rng.normal(size=c) * 2.0
                got = np.exp(calibrator.log_posterior(model, x))
                want = mp_bayes_posterior(model.means, cov, model.log_priors, x)
                assert np.max(np.abs(got - want)) < 1e-8

        for _ in range(3):
            c = int(rng.integers(3, 7))
            centers = 4.0 * np.eye(c)
            y = rng.integers(0, c, size=60 * c)
            z = centers[y] + rng.normal(size=(60 * c, c))
            model = calibrator.fit(z, calibrator.CalibratorConfig(cov_jitter=0.0))
            cov = model.covariance_factor.lower @ model.covariance_factor.lower.T
            want = direct_log_priors(model.means, cov)
            assert np.max(np.abs(model.log_priors - want)) < 1e-9


def test_criterion_05_stability_scaled_logits_many_classes():
    with criterion(5, "1e3-scaled logits with C=62 yield finite reports through the normalization path"):
        rng = np.random.default_rng(431)
        bundle = random_bundle(rng, 400, 62, scale=1e3, separation=5.0)
        for mode in ("bayes", "literal"):
            report = estimator.predict_accuracy(bundle, estimator.EstimatorConfig(mode=mode))
            assert np.isfinite(report.predicted_accuracy)
            assert np.all(np.isfinite(report.grad_norm_pairs))
        model = calibrator.fit(bundle.target_logits)
        assert model.sigma_inv_scale != 1.0  # the large-C normalization actually engaged
        assert np.all(np.isfinite(calibrator.posterior_matrix(model, bundle.target_logits)))


def test_criterion_06_desk_scale_mae_ordering():
    with criterion(6, "default suite: calibrated MAE < gradnorm(T=1) MAE and <= 0.10, <60s single-threaded"):
        old = os.environ.get("SFPP_THREADS")
        os.environ["SFPP_THREADS"] = "1"
        try:
            t0 = time.perf_counter()
            table = bench.run_suite(
                bench.default_suite(0),
                methods=[estimator.METHOD_ID, "gradnorm"],
                inclusion_ratios=[1.0],
                trials=1,
            )
            elapsed = time.perf_counter() - t0
        finally:
            if old is None:
                os.environ.pop("SFPP_THREADS", None)
            else:
                os.environ["SFPP_THREADS"] = old
        cal = table.mae[estimator.METHOD_ID]
        gn = table.mae["gradnorm"]
        print(f"    calibrated MAE {cal:.4f} vs gradnorm MAE {gn:.4f} in {elapsed:.1f}s")
        assert cal < gn
        assert cal <= 0.10
        assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_criterion_07_inclusion_ratio_behavior():
    with criterion(7, "source-based AE std at 1% >= at 100%; source-free AE bitwise ratio-invariant"):
        table = bench.run_suite(
            bench.default_suite(0),
            methods=list(bench.ALL_METHODS),
            inclusion_ratios=[0.01, 1.0],
            trials=20,
        )
        for method in bench.SOURCE_BASED:
            assert table.ratio_std_ae[method][0.01] >= table.ratio_std_ae[method][1.0]
            assert table.ratio_std_ae[method][1.0] == 0.0
        for method in bench.SOURCE_FREE:
            for scenario in table.scenarios:
                aes = {ae for (s, m, _r, _t, ae) in table.rows
                       if s == scenario["name"] and m == method}
                assert len(aes) == 1  # bitwise identical across ratios


def test_criterion_08_temperature_properties():
    with criterion(8, "softmax entropy non-decreasing in T and argmax invariant on 1000 rows"):
        rng = np.random.default_rng(433)
        rows = rng.normal(size=(1000, 6)) * rng.uniform(0.5, 5.0, size=(1000, 1))
        rows[:, 0] += 0.1  # keep rows non-constant
        temps = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        prev_entropy = None
        base_argmax = np.argmax(rows, axis=1)
        for t in temps:
            p = baselines.softmax(rows, t).probabilities
            np.testing.assert_array_equal(np.argmax(p, axis=1), base_argmax)
            ent = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
            if prev_entropy is not None:
                assert np.all(ent >= prev_entropy - 1e-12)
            prev_entropy = ent


def test_criterion_09_atc_self_consistency():
    with criterion(9, "ATC threshold reproduces validation accuracy within 1/n_v for all three scores"):
        rng = np.random.default_rng(439)
        for rep in range(5):
            c = int(rng.integers(2, 7))
            n_val = int(rng.integers(40, 200))
            val = rng.normal(size=(n_val, c)) * 2.0
            labels = rng.integers(0, c, size=n_val)
            target = rng.normal(size=(300, c))
            bundle = DatasetBundle(target_logits=target, class_count=c,
                                   val_logits=val, val_labels=labels)
            val_acc = float(np.mean(np.argmax(val, axis=1) == labels))
            for score in baselines.ATC_SCORES:
                report = baselines.atc(bundle, score)
                val_scores = baselines._atc_scores(val, score, 1.0)
                refit = float(np.mean(val_scores > report.config_echo["threshold"]))
                assert abs(refit - val_acc) <= 1.0 / n_val + 1e-12


def test_criterion_10_cot_small_instances():
    with criterion(10, "Sinkhorn within 1e-3 of exhaustive transport on n<=6; exact-match cost < 1e-6"):
        rng = np.random.default_rng(269)
        labels = np.array([0, 0, 1, 1, 2, 2])
        val = one_hot_logits(labels, 3, margin=4.0)
        for _ in range(5):
            target = rng.normal(size=(6, 3)) * 2.0
            bundle = DatasetBundle(target_logits=target, class_count=3,
                                   val_logits=val, val_labels=labels)
            report = baselines.cot(bundle)
            probs = baselines.softmax(target).probabilities
            want = exhaustive_transport_cost(probs, [2, 2, 2])
            assert abs(report.config_echo["ot_cost"] - want) < 1e-3

        exact = one_hot_logits([1, 0, 2, 0, 1, 2], 3, margin=60.0)
        bundle = DatasetBundle(target_logits=exact, class_count=3,
                               val_logits=val, val_labels=labels)
        assert baselines.cot(bundle).config_echo["ot_cost"] < 1e-6


def test_criterion_11_format_fidelity(tmp_path):
    with criterion(11, "NPY round trips are bitwise for f8/i8 rank 1-2; malformed headers rejected"):
        rng = np.random.default_rng(443)
        cases = [
            rng.normal(size=17),
            rng.normal(size=(23, 5)),
            rng.integers(-5, 99, size=31),
            rng.integers(0, 7, size=(11, 3)),
        ]
        for i, arr in enumerate(cases):
            p = tmp_path / f"case{i}.npy"
            write_array(p, arr)
            back = read_array(p)
            assert back.dtype == (np.int64 if np.issubdtype(arr.dtype, np.integer) else np.float64)
            assert back.tobytes() == np.ascontiguousarray(arr).tobytes()

        bad_specs = [
            ("bad magic", b"\x93NUMPZ" + npy_bytes()[6:]),
            ("fortran order", npy_bytes(fortran=b"True")),
            ("bad dtype", npy_bytes(descr=b"'>f8'", payload=np.zeros(4, ">f8").tobytes())),
        ]
        version_raw = bytearray(npy_bytes())
        version_raw[6] = 3
        bad_specs.append(("bad version", bytes(version_raw)))
        for name, raw in bad_specs:
            p = tmp_path / f"{name.replace(' ', '_')}.npy"
            p.write_bytes(raw)
            with pytest.raises(ArrayFormatError):
                read_array(p)


def test_criterion_12_cli_determinism_across_workers(tmp_path):
    with criterion(12, "bench CLI outputs byte-identical across SFPP_THREADS of 1, 2, and 8"):
        docs = [bench.scenario_to_dict(s) for s in [
            bench.BenchScenario(name="d0", seed=9001, class_count=3, feature_dim=4,
                                n_train=150, n_val=200, n_target=150,
                                mean_shift=1.5, cov_scale=1.4, prior_skew=0.2,
                                cluster_spread=2.2, iterations=60, learning_rate=1.0),
            bench.BenchScenario(name="d1", seed=9002, class_count=4, feature_dim=5,
                                n_train=150, n_val=200, n_target=150,
                                mean_shift=2.5, cov_scale=1.6, prior_skew=0.4,
                                cluster_spread=2.2, iterations=60, learning_rate=1.0),
        ]]
        suite = tmp_path / "suite.json"
        suite.write_text(json.dumps(docs))
        blobs = []
        old = os.environ.get("SFPP_THREADS")
        try:
            for threads in ("1", "2", "8"):
                os.environ["SFPP_THREADS"] = threads
                out = tmp_path / f"w{threads}"
                code = main(["bench", "--suite", str(suite), "--ratios", "0.05,1.0",
                             "--trials", "5", "--seed", "7",
                             "--methods", "ac,gradnorm,atc-prob,doc,cot",
                             "--out", str(out)])
                assert code == 0
                blobs.append((out / "mae_table.json").read_bytes()
                             + (out / "mae_table.csv").read_bytes())
        finally:
            if old is None:
                os.environ.pop("SFPP_THREADS", None)
            else:
                os.environ["SFPP_THREADS"] = old
        assert blobs[0] == blobs[1] == blobs[2]
