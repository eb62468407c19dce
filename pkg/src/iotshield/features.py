"""Windowed behavioural features per (device, window).

Feature layout (schema version :data:`~iotshield.errors.FEATURE_SCHEMA_VERSION`):

====  =======================  ==============================================
 f0   entropy_dst_port         bits, over exact destination ports sent
 f1   entropy_pkt_size         bits, over log2 buckets of mean packet size
 f2   request_frequency        flows sent per second
 f3   bandwidth_utilization    bytes sent per second
 f4   cpu_pct_mean             telemetry mean in window
 f5   mem_pct_mean             telemetry mean in window
 f6   syscall_rate_mean        telemetry mean in window
 f7   ts_deviation_requests    z-score of f2 against the device's recent windows
 f8   ts_deviation_bandwidth   z-score of f3 against the device's recent windows
 f9   out_degree               distinct destinations
 f10  in_degree                distinct sources sending to the device
 f11  fanout_ratio             out_degree / (in_degree + 1)
====  =======================  ==============================================
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_left, bisect_right
from collections import Counter, defaultdict, deque
from dataclasses import dataclass
from statistics import fmean
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, DataError
from .flowdata import BENIGN, AttackKind, DeviceTelemetry, FlowRecord, TrafficLabel

FEATURE_NAMES = (
    "entropy_dst_port", "entropy_pkt_size", "request_frequency", "bandwidth_utilization",
    "cpu_pct_mean", "mem_pct_mean", "syscall_rate_mean", "ts_deviation_requests",
    "ts_deviation_bandwidth", "out_degree", "in_degree", "fanout_ratio",
)
N_FEATURES = len(FEATURE_NAMES)
CPU_INDEX = FEATURE_NAMES.index("cpu_pct_mean")

SIZE_BUCKETS = 21  # [1,2), [2,4), ..., [2**19, 2**20), [2**20, inf)
STD_FLOOR = 1e-6
TELEMETRY_DEFAULTS = (10.0, 20.0, 50.0)


@dataclass(frozen=True)
class WindowConfig:
    window_s: float = 10.0
    stride_s: float = 5.0
    baseline_windows: int = 12

    def __post_init__(self):
        if not self.window_s > 0:
            raise ContractViolation("window_s must be > 0")
        if not 0 < self.stride_s <= self.window_s:
            raise ContractViolation("stride_s must lie in (0, window_s]")
        if self.baseline_windows < 2:
            raise ContractViolation("baseline_windows must be >= 2")


@dataclass(frozen=True)
class FeatureVector:
    device: str
    window_start: float
    values: tuple[float, ...]
    label: TrafficLabel | None = None

    def __getitem__(self, i: int) -> float:
        return self.values[i]

    @property
    def cpu_pct(self) -> float:
        return self.values[CPU_INDEX]


def shannon_entropy(histogram: Mapping | Iterable[float]) -> float:
    """Entropy in bits of a histogram given as a mapping or a sequence of counts."""
    counts = histogram.values() if isinstance(histogram, Mapping) else histogram
    counts = [c for c in counts if c > 0]
    total = math.fsum(counts)
    if total <= 0 or len(counts) < 2:
        return 0.0
    h = -math.fsum((c / total) * math.log2(c / total) for c in counts)
    return max(h, 0.0)


def size_bucket(byte_count: int, packet_count: int) -> int:
    size = byte_count / packet_count if packet_count > 0 else 0.0
    if size < 2.0:
        return 0
    # frexp gives size = m * 2**e with m in [0.5, 1), so floor(log2 size) = e - 1.
    return min(SIZE_BUCKETS - 1, math.frexp(size)[1] - 1)


def _zscore(value: float, history: Sequence[float]) -> float:
    if len(history) < 2:
        return 0.0
    mean = fmean(history)
    std = math.sqrt(fmean([(h - mean) ** 2 for h in history]))
    return (value - mean) / max(std, STD_FLOOR)


def window_label(flows: Iterable[FlowRecord]) -> TrafficLabel:
    """Attack if any flow is attack-labelled, with the majority attack kind."""
    kinds = Counter(r.label.attack_kind for r in flows if r.label is not None and r.label.is_attack)
    if not kinds:
        return BENIGN
    order = list(AttackKind)
    kind = max(kinds, key=lambda k: (kinds[k], -order.index(k)))
    return TrafficLabel.attack(kind)


def _check_sorted(records, what: str) -> None:
    for a, b in zip(records, records[1:]):
        if b.timestamp < a.timestamp:
            raise ContractViolation(f"{what} are not sorted by timestamp")


class _DeviceStream:
    __slots__ = ("sent", "sent_t", "recv", "recv_t", "tele", "tele_t")

    def __init__(self):
        self.sent, self.recv, self.tele = [], [], []

    def freeze(self):
        self.sent_t = [r.timestamp for r in self.sent]
        self.recv_t = [r.timestamp for r in self.recv]
        self.tele_t = [s.timestamp for s in self.tele]


def extract(flows: Sequence[FlowRecord], telemetry: Sequence[DeviceTelemetry],
            wc: WindowConfig = WindowConfig()) -> list[FeatureVector]:
    """One FeatureVector per (device, window) with any sent/received flow or telemetry.

    Windows are ``[t0 + k*stride, t0 + k*stride + window)`` where ``t0`` is the
    first timestamp of either input. Output is ordered by (device, window_start).
    """
    flows, telemetry = list(flows), list(telemetry)
    _check_sorted(flows, "flows")
    _check_sorted(telemetry, "telemetry")
    if not flows and not telemetry:
        return []
    labelled = any(r.label is not None for r in flows)

    streams: dict[str, _DeviceStream] = defaultdict(_DeviceStream)
    for r in flows:
        streams[r.src_device].sent.append(r)
        streams[r.dst_device].recv.append(r)
    for s in telemetry:
        streams[s.device].tele.append(s)

    stamps = [x[0].timestamp for x in (flows, telemetry) if x]
    t0 = min(stamps)
    t_last = max(x[-1].timestamp for x in (flows, telemetry) if x)
    n_windows = int(math.floor((t_last - t0) / wc.stride_s)) + 1

    out = []
    for device in sorted(streams):
        st = streams[device]
        st.freeze()
        req_hist = deque(maxlen=wc.baseline_windows)
        bw_hist = deque(maxlen=wc.baseline_windows)
        for k in range(n_windows):
            ws = t0 + k * wc.stride_s
            we = ws + wc.window_s
            s0, s1 = bisect_left(st.sent_t, ws), bisect_left(st.sent_t, we)
            r0, r1 = bisect_left(st.recv_t, ws), bisect_left(st.recv_t, we)
            m0, m1 = bisect_left(st.tele_t, ws), bisect_left(st.tele_t, we)
            if s0 == s1 and r0 == r1 and m0 == m1:
                continue
            sent, recv, tele = st.sent[s0:s1], st.recv[r0:r1], st.tele[m0:m1]

            if tele:
                resources = (fmean(s.cpu_pct for s in tele), fmean(s.mem_pct for s in tele),
                             fmean(s.syscall_rate for s in tele))
            elif m0 > 0:
                last = st.tele[m0 - 1]
                resources = (last.cpu_pct, last.mem_pct, last.syscall_rate)
            else:
                resources = TELEMETRY_DEFAULTS

            req = len(sent) / wc.window_s
            bw = math.fsum(r.byte_count for r in sent) / wc.window_s
            out_deg = len({r.dst_device for r in sent})
            in_deg = len({r.src_device for r in recv})
            values = (
                shannon_entropy(Counter(r.dst_port for r in sent)),
                shannon_entropy(Counter(size_bucket(r.byte_count, r.packet_count) for r in sent)),
                req, bw, *resources,
                _zscore(req, req_hist), _zscore(bw, bw_hist),
                float(out_deg), float(in_deg), out_deg / (in_deg + 1),
            )
            req_hist.append(req)
            bw_hist.append(bw)
            label = window_label(sent + recv) if labelled else None
            out.append(FeatureVector(device, ws, values, label))
    return out


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, N_FEATURES))
    return np.array([v.values for v in vectors], dtype=float)


def label_vector(vectors: Sequence[FeatureVector]) -> np.ndarray:
    """1 for attack windows, 0 otherwise (unlabelled windows count as benign)."""
    return np.array([1 if v.label is not None and v.label.is_attack else 0 for v in vectors],
                    dtype=np.int64)


# --- Normalization ------------------------------------------------------------

class FitOnEmpty(DataError):
    pass


@dataclass(frozen=True)
class NormStats:
    lo: tuple[float, ...]
    hi: tuple[float, ...]


def _as_matrix(vectors) -> np.ndarray:
    if len(vectors) and isinstance(vectors[0], FeatureVector):
        return feature_matrix(vectors)
    return np.atleast_2d(np.asarray(vectors, dtype=float))


def normalize_fit(vectors) -> NormStats:
    """Per-feature min and max of the training vectors."""
    x = _as_matrix(vectors)
    if x.size == 0:
        raise FitOnEmpty("cannot fit normalization on zero vectors")
    return NormStats(tuple(map(float, x.min(axis=0))), tuple(map(float, x.max(axis=0))))


def normalize_apply(vectors, stats: NormStats) -> np.ndarray:
    """Min-max scale into [0, 1]; constant features map to 0, out-of-range values clamp."""
    x = _as_matrix(vectors)
    lo, hi = np.array(stats.lo), np.array(stats.hi)
    if x.shape[-1] != lo.size:
        raise ContractViolation(f"expected {lo.size} features, got {x.shape[-1]}")
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (x - lo) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0)


# --- Features CSV -------------------------------------------------------------

FEATURE_HEADER = ("device", "window_start", *(f"f{i}" for i in range(N_FEATURES)), "label")


def write_features(vectors: Iterable[FeatureVector], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(FEATURE_HEADER)
        for v in vectors:
            out.writerow((v.device, repr(float(v.window_start)), *(repr(float(x)) for x in v.values),
                          v.label.token if v.label else ""))


def read_features(path) -> list[FeatureVector]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FEATURE_HEADER:
            raise DataError(f"{path}: not a features file (header mismatch)")
        out = []
        for row in reader:
            if not row:
                continue
            try:
                values = tuple(float(x) for x in row[2:2 + N_FEATURES])
                if len(values) != N_FEATURES or not all(map(math.isfinite, values)):
                    raise ValueError("expected 12 finite feature values")
                label = row[-1].strip()
                out.append(FeatureVector(row[0], float(row[1]), values,
                                         TrafficLabel.from_token(label) if label else None))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
    return out


def split_by_time(vectors: Sequence[FeatureVector], fractions=(0.70, 0.15, 0.15)):
    """Partition vectors into consecutive time blocks by distinct window start.

    Every window start lands in exactly one block, so all devices' views of
    a window stay together.
    """
    starts = sorted({v.window_start for v in vectors})
    n = len(starts)
    bounds, acc = [], 0.0
    for f in fractions[:-1]:
        acc += f
        bounds.append(starts[min(n - 1, int(round(acc * n)))] if n else 0.0)
    parts = [[] for _ in fractions]
    for v in vectors:
        parts[bisect_right(bounds, v.window_start)].append(v)
    return parts
