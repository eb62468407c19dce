import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iotshield.autoenc import AETrainConfig
from iotshield.detector import DetectorConfig, TraceRow
from iotshield.errors import DataError
from iotshield.evalkit import (
    REPORT_KEYS, ConfusionMatrix, EmptyMatrix, EmptyReport, InsufficientRepetitions, LengthMismatch,
    MetricsReport, benchmark_latency, config_fingerprint, confusion, metrics, parse_report, render_report,
    report, trace_confusion,
)
from iotshield.features import feature_matrix


def tally(predicted, truth):
    """Independent recount, one pair at a time."""
    counts = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for p, t in zip(predicted, truth):
        key = ("t" if p == t else "f") + ("p" if p else "n")
        counts[key] += 1
    return counts


class TestConfusion:
    def test_small_example(self):
        assert confusion([True, True, False], [True, True, False]) == ConfusionMatrix(tp=2, tn=1)

    def test_all_missed(self):
        assert confusion([False] * 4, [True] * 4) == ConfusionMatrix(fn=4)

    def test_thousand_random_pairs(self, rng):
        p, t = rng.integers(0, 2, 1000).astype(bool), rng.integers(0, 2, 1000).astype(bool)
        assert confusion(p, t) == ConfusionMatrix(**tally(p, t))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion([True], [True, False])

    def test_empty(self):
        with pytest.raises(EmptyMatrix):
            confusion([], [])

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(tp=-1)

    def test_addition(self):
        assert ConfusionMatrix(1, 2, 3, 4) + ConfusionMatrix(4, 3, 2, 1) == ConfusionMatrix(5, 5, 5, 5)


pairs = st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=200)


@settings(max_examples=200)
@given(pairs, st.randoms(use_true_random=False))
def test_permutation_invariance(data, rnd):
    shuffled = list(data)
    rnd.shuffle(shuffled)
    assert confusion(*zip(*data)) == confusion(*zip(*shuffled))


class TestMetrics:
    def test_perfect(self):
        m = metrics(ConfusionMatrix(tp=5, tn=5))
        assert (m.accuracy, m.precision, m.recall, m.f1, m.fpr) == (1.0, 1.0, 1.0, 1.0, 0.0)

    def test_hand_arithmetic(self):
        m = metrics(ConfusionMatrix(tp=3, tn=5, fp=1, fn=1))
        assert m.precision == 0.75 and m.recall == 0.75 and m.accuracy == 0.8
        assert m.f1 == pytest.approx(0.75) and m.fpr == pytest.approx(1 / 6)
        assert m.f1_paper_eq4 == pytest.approx(0.375)

    def test_precision_absent_without_positive_calls(self):
        m = metrics(ConfusionMatrix(tn=4, fn=2))
        assert m.precision is None and m.f1 is None and m.recall == 0.0

    def test_fpr_absent_without_negatives(self):
        assert metrics(ConfusionMatrix(tp=3)).fpr is None

    def test_zero_precision_and_recall_leaves_f1_absent(self):
        m = metrics(ConfusionMatrix(tn=2, fp=1, fn=1))
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, None)

    def test_empty_matrix(self):
        with pytest.raises(EmptyMatrix):
            metrics(ConfusionMatrix())


counts = st.integers(0, 10_000)


@settings(max_examples=300)
@given(counts, counts, counts, counts)
def test_metric_identities(tp, tn, fp, fn):
    cm = ConfusionMatrix(tp, tn, fp, fn)
    if cm.total == 0:
        return
    m = metrics(cm)
    for v in (m.accuracy, m.precision, m.recall, m.f1, m.fpr):
        assert v is None or 0.0 <= v <= 1.0
    assert m.accuracy == (tp + tn) / cm.total
    if tp + fn:
        assert m.recall == pytest.approx(1 - fn / (tp + fn), abs=1e-15)
    if tp + fn and tn + fp:
        prevalence = (tp + fn) / cm.total
        specificity = tn / (tn + fp)
        assert m.accuracy == pytest.approx(prevalence * m.recall + (1 - prevalence) * specificity, abs=1e-12)
    if m.f1 is not None:
        assert math.isclose(m.f1, 2 * m.precision * m.recall / (m.precision + m.recall), abs_tol=1e-12)


def _report(name, cm, **extra):
    return MetricsReport.from_counts(name, cm, **extra)


class TestReport:
    def test_round_trip(self, tmp_path):
        results = [
            _report("float", ConfusionMatrix(90, 880, 12, 18), latency_p50_us=41.25, latency_p99_us=88.0,
                    model_size_bytes=120_345, config_fingerprint="abc"),
            _report("quantized", ConfusionMatrix(0, 10, 0, 0), quantized_size_bytes=40_000),
        ]
        p = tmp_path / "r.txt"
        report(results, p, {"seed": "42", "scenario": "default"})
        meta, back = parse_report(p)
        assert meta == {"seed": "42", "scenario": "default"}
        assert back == results

    def test_two_column_table(self):
        text = render_report([_report("Either", ConfusionMatrix(1, 1, 1, 1)),
                              _report("Both", ConfusionMatrix(1, 2, 0, 1))])
        table = text.split("```table\n")[1].split("```")[0].strip().splitlines()
        assert table[0] == "| metric | Either | Both |"
        assert len(table) == 2 + len(REPORT_KEYS)
        assert "| precision | 0.5 | 1.0 |" in table

    def test_absent_is_written_out(self):
        text = render_report([_report("x", ConfusionMatrix(tn=3))])
        assert "x.precision=absent" in text and "x.latency_p50_us=absent" in text

    def test_deterministic_field_order(self):
        r = [_report("a", ConfusionMatrix(1, 2, 3, 4))]
        assert render_report(r) == render_report(r)
        keys = [line.split("=")[0].split(".", 1)[1] for line in render_report(r).splitlines()
                if line.startswith("a.")]
        assert keys == list(REPORT_KEYS)

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyReport):
            report([], tmp_path / "r.txt")

    def test_bad_names(self):
        with pytest.raises(ValueError):
            render_report([_report("a b", ConfusionMatrix(1))])

    def test_parse_rejects_unknown_field(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("columns=a\na.bogus=1\n")
        with pytest.raises(DataError):
            parse_report(p)


class TestFingerprint:
    def test_stable_and_sensitive(self):
        a = config_fingerprint(DetectorConfig(), AETrainConfig())
        assert a == config_fingerprint(DetectorConfig(), AETrainConfig())
        assert a != config_fingerprint(DetectorConfig(rf_threshold=0.6), AETrainConfig())
        assert len(a) == 16 and int(a, 16) >= 0


class TestBenchmark:
    def test_insufficient_repetitions(self, trained):
        X = feature_matrix(trained.test[:100])
        for reps in (0, 1):
            with pytest.raises(InsufficientRepetitions):
                benchmark_latency(trained.quantized, X, repetitions=reps)

    def test_needs_hundred_vectors(self, trained):
        with pytest.raises(DataError):
            benchmark_latency(trained.quantized, feature_matrix(trained.test[:99]))

    def test_warmup_excluded_from_samples(self, trained):
        X = feature_matrix(trained.test[:100])
        stats = benchmark_latency({"float": trained.pruned, "quantized": trained.quantized}, X, repetitions=11)
        # ceil(1.1) = 2 of the 11 repetitions are warm-up.
        assert stats["float"].samples == stats["quantized"].samples == 900
        assert all(0 < s.p50_us <= s.p99_us for s in stats.values())

    def test_repeat_runs_stable(self, trained):
        X = feature_matrix(trained.test[:200])
        a = benchmark_latency(trained.quantized, X, repetitions=3)["model"].p50_us
        b = benchmark_latency(trained.quantized, X, repetitions=3)["model"].p50_us
        assert max(a, b) / min(a, b) < 3

    def test_accepts_plain_callables(self):
        stats = benchmark_latency(lambda x: None, np.zeros((100, 3)), repetitions=2)
        assert stats["model"].samples == 100


def _row(label, alert, warm=True):
    return TraceRow("d", 0.0, label, 0.0, 0.0, 0.0, 0.0, warm, alert, False, not alert, alert)


class TestTraceConfusion:
    def test_counts_warm_rows(self):
        trace = [_row("benign", False), _row("syn_flood", True), _row("benign", True),
                 _row("low_rate", True, warm=False)]
        assert trace_confusion(trace) == ConfusionMatrix(tp=1, tn=1, fp=1)
        assert trace_confusion(trace, warm_only=False) == ConfusionMatrix(tp=2, tn=1, fp=1)
        assert trace_confusion(trace, path="ae_fired") == ConfusionMatrix(tn=2, fn=1)

    def test_nothing_warm(self):
        with pytest.raises(EmptyMatrix):
            trace_confusion([_row("benign", False, warm=False)])
