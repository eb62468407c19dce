"""Streaming detection: forest probability plus autoencoder score against an adaptive threshold.

Each device keeps a rolling buffer of autoencoder scores from windows that no
model flagged. Its anomaly threshold is the ``ae_quantile`` empirical quantile
(inverse-CDF definition) of that buffer, scaled up on busy devices by
:meth:`DetectorConfig.load_relief`. The autoencoder path stays silent until
the buffer holds ``warmup`` scores. Scores from flagged windows never enter
the buffer, so an ongoing attack cannot raise its own threshold.

Because flagged scores are excluded, a per-device threshold can never rise
above the largest score seen during warm-up, and a quantile taken over ten
warm-up scores is just their maximum. The threshold in force is therefore
never allowed below a floor: the same quantile of the autoencoder's benign
training scores (``AEModel.calibration``). ``calibrated_floor=False`` turns
the floor off.
"""

from __future__ import annotations

import csv
import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autoenc import AEModel, ae_scores_raw
from .errors import DataError, SchemaMismatch
from .features import FeatureVector, WindowConfig, extract, feature_matrix
from .forest import ForestModel, QuantizedForest, predict_proba_batch, predict_quantized


class Combine(str, enum.Enum):
    EITHER = "Either"
    BOTH = "Both"
    RF_ONLY = "RfOnly"
    AE_ONLY = "AeOnly"


class AlertSource(str, enum.Enum):
    RANDOM_FOREST = "RandomForest"
    AUTOENCODER = "Autoencoder"
    BOTH = "Both"


class Severity(str, enum.Enum):
    ADVISORY = "Advisory"
    CRITICAL = "Critical"


@dataclass(frozen=True)
class DetectorConfig:
    rf_threshold: float = 0.5
    ae_quantile: float = 0.99
    ae_history: int = 200
    combine: Combine = Combine.EITHER
    relief_slope: float = 0.2
    relief_knee_pct: float = 80.0
    relief_span_pct: float = 20.0
    warmup: int = 10
    calibrated_floor: bool = True

    def __post_init__(self):
        if not 0 < self.rf_threshold < 1:
            raise ValueError("rf_threshold must lie in (0, 1)")
        if not 0.5 <= self.ae_quantile < 1:
            raise ValueError("ae_quantile must lie in [0.5, 1)")
        if self.ae_history < 10:
            raise ValueError("ae_history must be >= 10")
        if not 1 <= self.warmup <= self.ae_history:
            raise ValueError("warmup must lie in [1, ae_history]")
        if self.relief_slope < 0 or self.relief_span_pct <= 0:
            raise ValueError("load relief needs slope >= 0 and span > 0")

    def load_relief(self, cpu_pct: float) -> float:
        """Threshold multiplier: 1 up to the knee, then rising linearly with CPU load."""
        return 1.0 + self.relief_slope * max(0.0, cpu_pct - self.relief_knee_pct) / self.relief_span_pct


@dataclass(frozen=True)
class Alert:
    device: str
    window_start: float
    source: AlertSource
    rf_probability: float
    ae_score: float
    ae_threshold_at_emit: float
    severity: Severity


@dataclass
class DeviceState:
    buffer: deque
    threshold: float = 0.0


@dataclass
class DetectorState:
    history: int = 200
    devices: dict[str, DeviceState] = field(default_factory=dict)
    windows_seen: int = 0
    alerts_emitted: int = 0

    def device(self, name: str) -> DeviceState:
        if name not in self.devices:
            self.devices[name] = DeviceState(deque(maxlen=self.history))
        return self.devices[name]


@dataclass(frozen=True)
class TraceRow:
    device: str
    window_start: float
    label: str
    rf_probability: float
    ae_score: float
    ae_threshold: float
    effective_threshold: float
    warm: bool
    rf_fired: bool
    ae_fired: bool
    admitted: bool
    alert: bool


def empirical_quantile(values, q: float) -> float:
    return float(np.quantile(np.asarray(values, dtype=float), q, method="inverted_cdf"))


def threshold_floor(ae: AEModel, cfg: DetectorConfig) -> float:
    if not cfg.calibrated_floor or ae.calibration.size == 0:
        return 0.0
    return empirical_quantile(ae.calibration, cfg.ae_quantile)


def _step(state: DetectorState, fv: FeatureVector, rf_p: float, ae_s: float,
          cfg: DetectorConfig, floor: float):
    ds = state.device(fv.device)
    state.windows_seen += 1
    warm = len(ds.buffer) >= cfg.warmup
    base = ds.threshold
    effective = max(base, floor) * cfg.load_relief(fv.cpu_pct)
    rf_fired = rf_p >= cfg.rf_threshold
    ae_fired = warm and ae_s > effective
    fire = {
        Combine.EITHER: rf_fired or ae_fired,
        Combine.BOTH: rf_fired and ae_fired,
        Combine.RF_ONLY: rf_fired,
        Combine.AE_ONLY: ae_fired,
    }[cfg.combine]
    admitted = not (rf_fired or ae_fired)
    if admitted:
        ds.buffer.append(ae_s)
        ds.threshold = empirical_quantile(ds.buffer, cfg.ae_quantile)
    alert = None
    if fire:
        both = rf_fired and ae_fired
        source = AlertSource.BOTH if both else (
            AlertSource.RANDOM_FOREST if rf_fired else AlertSource.AUTOENCODER)
        alert = Alert(fv.device, fv.window_start, source, rf_p, ae_s, effective,
                      Severity.CRITICAL if both else Severity.ADVISORY)
        state.alerts_emitted += 1
    row = TraceRow(fv.device, fv.window_start, fv.label.token if fv.label else "",
                   rf_p, ae_s, base, effective, warm, rf_fired, ae_fired, admitted, alert is not None)
    return alert, row


def _rf_probabilities(rf, X: np.ndarray) -> np.ndarray:
    if isinstance(rf, QuantizedForest):
        return np.array([predict_quantized(rf, x) for x in X])
    if isinstance(rf, ForestModel):
        return predict_proba_batch(rf, X)
    raise TypeError(f"unsupported forest model {type(rf).__name__}")


def _check_models(rf, ae: AEModel, width: int) -> None:
    if rf.n_features != width or ae.layer_dims[0] != width:
        raise SchemaMismatch(f"models expect {rf.n_features}/{ae.layer_dims[0]} features, got {width}")


def process_window(state: DetectorState, fv: FeatureVector, rf, ae: AEModel,
                   cfg: DetectorConfig = DetectorConfig()):
    """Score one window, update that device's adaptive threshold, maybe emit an Alert.

    ``state`` is updated in place and returned alongside the optional alert.
    """
    _check_models(rf, ae, len(fv.values))
    x = np.array([fv.values])
    alert, _ = _step(state, fv, float(_rf_probabilities(rf, x)[0]), float(ae_scores_raw(ae, x)[0]),
                     cfg, threshold_floor(ae, cfg))
    return state, alert


def detect(vectors, rf, ae: AEModel, cfg: DetectorConfig = DetectorConfig(),
           state: DetectorState | None = None):
    """Run the detector over feature vectors in (window_start, device) order.

    Returns ``(alerts, trace)``. Scores are computed in batch; the state
    machine runs window by window exactly as :func:`process_window` does.
    """
    vectors = sorted(vectors, key=lambda v: (v.window_start, v.device))
    state = state or DetectorState(cfg.ae_history)
    if not vectors:
        return [], []
    X = feature_matrix(vectors)
    _check_models(rf, ae, X.shape[1])
    rf_p = _rf_probabilities(rf, X)
    ae_s = ae_scores_raw(ae, X)
    floor = threshold_floor(ae, cfg)
    alerts, trace = [], []
    for fv, p, s in zip(vectors, rf_p, ae_s):
        alert, row = _step(state, fv, float(p), float(s), cfg, floor)
        trace.append(row)
        if alert is not None:
            alerts.append(alert)
    return alerts, trace


def run_stream(flows, telemetry, rf, ae: AEModel, wc: WindowConfig = WindowConfig(),
               cfg: DetectorConfig = DetectorConfig()):
    """Extract windows from raw flows/telemetry and run the detector over them."""
    return detect(extract(flows, telemetry, wc), rf, ae, cfg)


# --- Output files -------------------------------------------------------------

ALERT_FIELDS = ("window_start", "device", "source", "severity", "rf_probability",
                "ae_score", "ae_threshold_at_emit")
TRACE_FIELDS = tuple(TraceRow.__dataclass_fields__)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, enum.Enum):
        return value.value
    return str(value)


def write_alerts(alerts, path) -> None:
    """One alert per line as space-separated ``key=value`` pairs in ALERT_FIELDS order."""
    with open(path, "w", encoding="utf-8") as fh:
        for a in alerts:
            fh.write(" ".join(f"{k}={_fmt(getattr(a, k))}" for k in ALERT_FIELDS) + "\n")


def read_alerts(path) -> list[Alert]:
    alerts = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                kv = dict(item.split("=", 1) for item in line.split())
                alerts.append(Alert(
                    device=kv["device"], window_start=float(kv["window_start"]),
                    source=AlertSource(kv["source"]), rf_probability=float(kv["rf_probability"]),
                    ae_score=float(kv["ae_score"]), ae_threshold_at_emit=float(kv["ae_threshold_at_emit"]),
                    severity=Severity(kv["severity"]),
                ))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{n}: malformed alert record ({exc})") from None
    return alerts


def write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TRACE_FIELDS)
        for row in trace:
            out.writerow(_fmt(getattr(row, k)) for k in TRACE_FIELDS)


def read_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_FIELDS:
            raise DataError(f"{path}: not a detector trace (header mismatch)")
        for r in reader:
            try:
                rows.append(TraceRow(
                    r["device"], float(r["window_start"]), r["label"],
                    *(float(r[k]) for k in ("rf_probability", "ae_score", "ae_threshold",
                                            "effective_threshold")),
                    *(r[k] == "1" for k in ("warm", "rf_fired", "ae_fired", "admitted", "alert")),
                ))
            except ValueError as exc:
                raise DataError(f"{path}:{reader.line_num}: {exc}") from None
    return rows
