"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time
import warnings

import numpy as np
import pytest

from iotshield import modelio
from iotshield.autoenc import ae_gradient
from iotshield.detector import detect
from iotshield.evalkit import ConfusionMatrix, benchmark_latency, confusion, metrics, trace_confusion
from iotshield.features import extract, feature_matrix, label_vector, shannon_entropy
from iotshield.flowdata import AttackKind
from iotshield.forest import (
    DegenerateTraining, ForestParams, Internal, Leaf, predict_proba_batch, predict_quantized_batch, quantize, train,
)
from iotshield.synthgen import default_scenario, generate

from conftest import _fit, run_pipeline, tree_bytes
from test_autoenc import gradient_case, max_relative_error, numeric_gradient
from test_forest import brute_force_split


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion straight to the terminal, then assert."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


def test_criterion_01_detection_accuracy(verdict):
    start = time.perf_counter()
    model = _fit(extract(*generate(default_scenario())))
    X, y = feature_matrix(model.test), label_vector(model.test)
    m = metrics(confusion(predict_proba_batch(model.pruned, X) >= 0.5, y.astype(bool)))
    elapsed = time.perf_counter() - start
    verdict(1, m.accuracy >= 0.95 and m.recall >= 0.95 and elapsed < 120,
            f"accuracy={m.accuracy:.4f} recall={m.recall:.4f} on {len(y)} test windows, {elapsed:.1f}s")


def test_criterion_02_benign_false_positive_rate(verdict, trained, benign_vectors):
    start = time.perf_counter()
    _, trace = detect(benign_vectors, trained.pruned, trained.ae)
    elapsed = time.perf_counter() - start
    cm = trace_confusion(trace)
    fpr = metrics(cm).fpr
    verdict(2, fpr <= 0.05 and elapsed < 60, f"fpr={fpr:.4f} over {cm.total} warm windows, {elapsed:.1f}s")


def test_criterion_03_zero_day_recall(verdict, trained_known_only, low_rate_vectors, benign_vectors):
    assert not any(v.label.attack_kind is AttackKind.LOW_RATE for v in trained_known_only.train)
    _, trace = detect(low_rate_vectors, trained_known_only.pruned, trained_known_only.ae)
    recall = metrics(trace_confusion(trace, path="ae_fired")).recall
    _, benign_trace = detect(benign_vectors, trained_known_only.pruned, trained_known_only.ae)
    fpr = metrics(trace_confusion(benign_trace)).fpr
    verdict(3, recall >= 0.80 and fpr <= 0.05, f"autoencoder low-rate recall={recall:.4f}, benign fpr={fpr:.4f}")


def test_criterion_04_quantized_size_and_agreement(verdict, trained):
    sizes = {}
    for name, model in (("full", trained.forest), ("pruned", trained.pruned)):
        sizes[name] = (len(modelio.to_bytes(model)), len(modelio.to_bytes(quantize(model))))
    reduction = min(1 - q / f for f, q in sizes.values())
    rng = np.random.default_rng(2024)
    lo, hi = np.array(trained.pruned.feature_lo), np.array(trained.pruned.feature_hi)
    X = rng.uniform(lo, hi, size=(10_000, len(lo)))
    agree = np.mean((predict_proba_batch(trained.pruned, X) >= 0.5)
                    == (predict_quantized_batch(trained.quantized, X) >= 0.5))
    verdict(4, reduction >= 0.30 and agree >= 0.99,
            f"size reduction {reduction:.1%} (bytes float/quantized {sizes}), agreement {agree:.4%}")


def test_criterion_05_quantized_latency_direction(verdict, trained):
    X = feature_matrix(trained.test[:500])
    stats = benchmark_latency({"float": trained.pruned, "quantized": trained.quantized}, X, repetitions=11)
    f, q = stats["float"].p50_us, stats["quantized"].p50_us
    verdict(5, q <= f, f"p50 float={f:.1f}us quantized={q:.1f}us")


def _recount(predicted, truth):
    tp = tn = fp = fn = 0
    for p, t in zip(predicted, truth):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def test_criterion_06_metric_correctness(verdict):
    rng = np.random.default_rng(6)
    failures, undefined_seen = [], 0
    for case in range(1200):
        n = int(rng.integers(1, 60))
        # Skewed rates make all-one-class matrices (and so undefined ratios) common.
        truth = rng.uniform(size=n) < rng.choice([0.0, 0.5, 1.0, rng.uniform()])
        pred = rng.uniform(size=n) < rng.choice([0.0, 0.5, 1.0, rng.uniform()])
        tp, tn, fp, fn = _recount(pred.tolist(), truth.tolist())
        cm = confusion(pred, truth)
        m = metrics(cm)
        expect = {
            "accuracy": (tp + tn) / n,
            "precision": tp / (tp + fp) if tp + fp else None,
            "recall": tp / (tp + fn) if tp + fn else None,
            "fpr": fp / (fp + tn) if fp + tn else None,
        }
        ok = cm == ConfusionMatrix(tp, tn, fp, fn) and all(getattr(m, k) == v for k, v in expect.items())
        p, r = expect["precision"], expect["recall"]
        if p is None or r is None or p + r == 0:
            ok &= m.f1 is None
            undefined_seen += 1
        else:
            ok &= abs(m.f1 - 2 * p * r / (p + r)) <= 1e-12
        if not ok:
            failures.append(case)
    verdict(6, not failures and undefined_seen > 0,
            f"1200 random matrices, {undefined_seen} with an undefined f1, failures {failures[:5]}")


def test_criterion_07_entropy_oracle(verdict):
    rng = np.random.default_rng(7)
    worst, bounds_ok = 0.0, True
    for _ in range(1500):
        k = int(rng.integers(1, 40))
        counts = rng.integers(0, 1000, size=k) * (rng.uniform(size=k) < 0.8)
        h = shannon_entropy(counts.tolist())
        if counts.sum() > 0:
            p = counts[counts > 0] / counts.sum()
            oracle = float(-(p * np.log2(p)).sum())
        else:
            oracle = 0.0
        worst = max(worst, abs(h - oracle))
        bounds_ok &= -1e-12 <= h <= math.log2(k) + 1e-9
    uniform = max(abs(shannon_entropy([5] * k) - math.log2(k)) for k in range(1, 65))
    verdict(7, worst <= 1e-9 and bounds_ok and uniform <= 1e-9,
            f"max |H - oracle| = {worst:.2e}, uniform max error {uniform:.2e}")


def test_criterion_08_gradient_check(verdict):
    errors = []
    for seed in range(100, 124):
        model, batch = gradient_case(seed)
        gw, gb, _ = ae_gradient(model, batch)
        nw, nb = numeric_gradient(model, batch)
        errors.append(max_relative_error(gw + gb, nw + nb))
    verdict(8, max(errors) < 1e-4, f"{len(errors)} configurations, worst relative error {max(errors):.2e}")


def test_criterion_09_split_oracle(verdict):
    rng = np.random.default_rng(9)
    params = ForestParams(n_trees=1, max_depth=1, min_samples_leaf=1, features_per_split=2, bootstrap=False)
    mismatches, checked = [], 0
    for case in range(150):
        n = int(rng.integers(2, 21))
        X = rng.integers(0, 8, size=(n, 2)) / 4.0
        y = rng.integers(0, 2, size=n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateTraining)
            root = train(X, y, params, seed=case).trees[0]
        expected = brute_force_split(X, y) if len(set(y.tolist())) > 1 else None
        if expected is None:
            ok = isinstance(root, Leaf)
        else:
            checked += 1
            ok = isinstance(root, Internal) and root.feature_index == expected[0] \
                and abs(root.threshold - expected[1]) <= 1e-15
        if not ok:
            mismatches.append(case)
    verdict(9, not mismatches and checked >= 100,
            f"150 datasets, {checked} with a split, mismatches {mismatches[:5]}")


def test_criterion_10_determinism(verdict, tmp_path):
    first = tree_bytes(run_pipeline(tmp_path / "first"))
    second = tree_bytes(run_pipeline(tmp_path / "second"))
    differing = sorted(k for k in first if first[k] != second.get(k)) + sorted(set(second) - set(first))
    kinds = ("forest.bin", "quantized.bin", "ae.bin", "features/features.csv", "detect/alerts.txt",
             "report.txt")
    verdict(10, not differing and all(k in first for k in kinds),
            f"{len(first)} files compared, differing {differing}")
