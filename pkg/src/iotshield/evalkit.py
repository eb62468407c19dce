"""Confusion counts, detection metrics, latency benchmarks and report files.

Attack is the positive class throughout. A metric whose denominator is zero
is reported as ``None`` (written ``absent`` in report files), never NaN.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .autoenc import AEModel, ae_scores_raw
from .errors import DataError
from .forest import ForestModel, QuantizedForest, predict_proba, predict_quantized


class LengthMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class InsufficientRepetitions(DataError):
    pass


class EmptyReport(DataError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(predicted: Sequence[bool], truth: Sequence[bool]) -> ConfusionMatrix:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape or p.ndim != 1:
        raise LengthMismatch(f"{p.size} predictions against {t.size} truth labels")
    if p.size == 0:
        raise EmptyMatrix("no predictions to count")
    return ConfusionMatrix(tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)),
                           fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)))


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    f1_paper_eq4: float | None  # precision*recall/(precision+recall), without the factor 2
    fpr: float | None


def metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise EmptyMatrix("all counts are zero")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = half = None
    if precision is not None and recall is not None and precision + recall > 0:
        half = precision * recall / (precision + recall)
        f1 = 2 * half
    return Metrics(accuracy=(cm.tp + cm.tn) / cm.total, precision=precision, recall=recall,
                   f1=f1, f1_paper_eq4=half, fpr=_ratio(cm.fp, cm.fp + cm.tn))


def config_fingerprint(*configs) -> str:
    """Short stable hash of config dataclasses / plain values."""

    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, Mapping):
            return {str(k): plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, float):
            return repr(obj)
        if hasattr(obj, "value") and not isinstance(obj, (int, str)):
            return obj.value
        return obj if isinstance(obj, (int, str, bool)) or obj is None else str(obj)

    blob = json.dumps([plain(c) for c in configs], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- Reports ------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    name: str
    counts: ConfusionMatrix
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    f1_paper_eq4: float | None
    fpr: float | None
    latency_p50_us: float | None = None
    latency_p99_us: float | None = None
    model_size_bytes: int | None = None
    quantized_size_bytes: int | None = None
    config_fingerprint: str = ""

    @classmethod
    def from_counts(cls, name: str, cm: ConfusionMatrix, **extra) -> MetricsReport:
        return cls(name=name, counts=cm, **dataclasses.asdict(metrics(cm)), **extra)


_COUNT_KEYS = ("tp", "tn", "fp", "fn")
_FLOAT_KEYS = ("accuracy", "precision", "recall", "f1", "f1_paper_eq4", "fpr",
               "latency_p50_us", "latency_p99_us")
_INT_KEYS = ("model_size_bytes", "quantized_size_bytes")
REPORT_KEYS = _COUNT_KEYS + _FLOAT_KEYS + _INT_KEYS + ("config_fingerprint",)
ABSENT = "absent"


def _fmt(value) -> str:
    if value is None:
        return ABSENT
    return repr(float(value)) if isinstance(value, float) else str(value)


def _fields(r: MetricsReport) -> list[tuple[str, str]]:
    values = {k: getattr(r.counts, k) for k in _COUNT_KEYS}
    values.update((k, getattr(r, k)) for k in _FLOAT_KEYS + _INT_KEYS + ("config_fingerprint",))
    return [(k, _fmt(values[k])) for k in REPORT_KEYS]


def render_report(results: Sequence[MetricsReport], meta: Mapping[str, str] | None = None) -> str:
    """Text form: ``key=value`` lines, then a fenced side-by-side table."""
    results = list(results)
    if not results:
        raise EmptyReport("no results to report")
    names = [r.name for r in results]
    if len(set(names)) != len(names) or any(not n or any(c in n for c in "=.| \n") for n in names):
        raise ValueError("result names must be unique and free of '=', '.', '|' and whitespace")
    lines = [f"meta.{k}={v}" for k, v in (meta or {}).items()]
    lines.append("columns=" + ",".join(names))
    for r in results:
        lines += [f"{r.name}.{k}={v}" for k, v in _fields(r)]
    table = [dict(_fields(r)) for r in results]
    lines += ["", "```table", "| metric | " + " | ".join(names) + " |",
              "|---" * (len(names) + 1) + "|"]
    lines += [f"| {k} | " + " | ".join(t[k] for t in table) + " |" for k in REPORT_KEYS]
    lines.append("```")
    return "\n".join(lines) + "\n"


def report(results: Sequence[MetricsReport], path, meta: Mapping[str, str] | None = None) -> None:
    text = render_report(results, meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _parse_value(key: str, raw: str):
    if raw == ABSENT:
        return None
    if key in _COUNT_KEYS or key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    return raw


def parse_report(path) -> tuple[dict[str, str], list[MetricsReport]]:
    """Read a report back; the fenced table is presentation only and is skipped."""
    meta, columns, values = {}, None, {}
    with open(path, encoding="utf-8") as fh:
        in_fence = False
        for n, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if line.startswith("```"):
                in_fence = not in_fence
                continue
            if in_fence or not line.strip():
                continue
            if "=" not in line:
                raise DataError(f"{path}:{n}: expected key=value")
            key, value = line.split("=", 1)
            if key.startswith("meta."):
                meta[key[5:]] = value
            elif key == "columns":
                columns = value.split(",")
            else:
                name, _, field_name = key.partition(".")
                if field_name not in REPORT_KEYS:
                    raise DataError(f"{path}:{n}: unknown report field {key!r}")
                try:
                    values.setdefault(name, {})[field_name] = _parse_value(field_name, value)
                except ValueError as exc:
                    raise DataError(f"{path}:{n}: {exc}") from None
    if not columns:
        raise EmptyReport(f"{path}: no result columns")
    out = []
    for name in columns:
        v = values.get(name, {})
        missing = [k for k in REPORT_KEYS if k not in v]
        if missing:
            raise DataError(f"{path}: column {name!r} lacks {', '.join(missing)}")
        out.append(MetricsReport(name=name, counts=ConfusionMatrix(*(v[k] for k in _COUNT_KEYS)),
                                 **{k: v[k] for k in _FLOAT_KEYS + _INT_KEYS + ("config_fingerprint",)}))
    return meta, out


# --- Latency ------------------------------------------------------------------

WARMUP_FRACTION = 0.10


@dataclass(frozen=True)
class LatencyStats:
    p50_us: float
    p99_us: float
    samples: int


def _single_inference(model) -> Callable:
    if isinstance(model, QuantizedForest):
        return lambda x: predict_quantized(model, x)
    if isinstance(model, ForestModel):
        return lambda x: predict_proba(model, x)
    if isinstance(model, AEModel):
        return lambda x: ae_scores_raw(model, x)
    if callable(model):
        return model
    raise TypeError(f"cannot benchmark {type(model).__name__}")


def benchmark_latency(models, vectors, repetitions: int = 5) -> dict[str, LatencyStats]:
    """Per-inference wall-clock latency percentiles in microseconds.

    ``models`` is one model or a ``{name: model}`` mapping; all models are
    timed on the same vectors, interleaved per repetition so drift affects
    them alike. The first 10% of repetitions (rounded up) are warm-up and are
    discarded.
    """
    if not isinstance(models, Mapping):
        models = {"model": models}
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    if X.shape[0] < 100:
        raise DataError(f"benchmark needs at least 100 vectors, got {X.shape[0]}")
    warm = math.ceil(repetitions * WARMUP_FRACTION)
    if repetitions - warm < 1:
        raise InsufficientRepetitions(f"{repetitions} repetitions leave none after warm-up")
    rows = [x for x in X]
    fns = {name: _single_inference(m) for name, m in models.items()}
    samples: dict[str, list[int]] = {name: [] for name in fns}
    clock = time.perf_counter_ns
    for rep in range(repetitions):
        for name, fn in fns.items():
            out = samples[name] if rep >= warm else None
            for x in rows:
                t = clock()
                fn(x)
                dt = clock() - t
                if out is not None:
                    out.append(dt)
    result = {}
    for name, s in samples.items():
        us = np.asarray(s, dtype=float) / 1000.0
        result[name] = LatencyStats(float(np.percentile(us, 50)), float(np.percentile(us, 99)), us.size)
    return result


# --- Detector traces ----------------------------------------------------------

def trace_confusion(trace, warm_only: bool = True, path: str = "alert") -> ConfusionMatrix:
    """Window-level counts from a detector trace.

    ``path`` picks the decision column: ``alert`` (combined), ``rf_fired`` or
    ``ae_fired``. With ``warm_only`` windows of devices still warming up are
    skipped.
    """
    rows = [r for r in trace if r.warm or not warm_only]
    if not rows:
        raise EmptyMatrix("trace holds no scored windows")
    truth = [r.label not in ("", "benign") for r in rows]
    return confusion([getattr(r, path) for r in rows], truth)
