"""Flow and telemetry records, the canonical CSV formats, and a column adapter.

Canonical flow CSV header::

    timestamp,src_device,dst_device,protocol,dst_port,packet_count,byte_count,duration,syn_flag,label

Canonical telemetry CSV header::

    timestamp,device,cpu_pct,mem_pct,syscall_rate

Readers never drop a malformed row silently: each one becomes an
:class:`UnparsableRow` entry in the returned table's ``errors``. Once more than
``max_bad_rows`` rows fail, reading aborts with :class:`TooManyBadRows`.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Iterator, Sequence

from .errors import ContractViolation, DataError

FLOW_COLUMNS = (
    "timestamp", "src_device", "dst_device", "protocol", "dst_port",
    "packet_count", "byte_count", "duration", "syn_flag", "label",
)
TELEMETRY_COLUMNS = ("timestamp", "device", "cpu_pct", "mem_pct", "syscall_rate")
REQUIRED_MAPPED = ("timestamp", "src_device", "dst_device", "protocol", "packet_count", "byte_count")
DEFAULT_MAX_BAD_ROWS = 100


class Protocol(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


class TrafficClass(str, enum.Enum):
    BENIGN = "Benign"
    ATTACK = "Attack"


class AttackKind(str, enum.Enum):
    SYN_FLOOD = "syn_flood"
    HTTP_FLOOD = "http_flood"
    UDP_FLOOD = "udp_flood"
    LOW_RATE = "low_rate"


@dataclass(frozen=True, slots=True)
class TrafficLabel:
    cls: TrafficClass
    attack_kind: AttackKind | None = None

    def __post_init__(self):
        if (self.attack_kind is not None) != (self.cls is TrafficClass.ATTACK):
            raise ValueError("attack_kind must be set exactly when the class is Attack")

    @property
    def is_attack(self) -> bool:
        return self.cls is TrafficClass.ATTACK

    @property
    def token(self) -> str:
        return self.attack_kind.value if self.attack_kind else "benign"

    @classmethod
    def from_token(cls, token: str) -> TrafficLabel:
        token = token.strip()
        if token == "benign":
            return BENIGN
        try:
            return cls(TrafficClass.ATTACK, AttackKind(token))
        except ValueError:
            raise ValueError(f"unknown label {token!r}") from None

    @classmethod
    def attack(cls, kind: AttackKind) -> TrafficLabel:
        return cls(TrafficClass.ATTACK, kind)


BENIGN = TrafficLabel(TrafficClass.BENIGN)


@dataclass(frozen=True, slots=True)
class FlowRecord:
    timestamp: float
    src_device: str
    dst_device: str
    protocol: Protocol
    dst_port: int
    packet_count: int
    byte_count: int
    duration: float
    syn_flag: bool
    label: TrafficLabel | None = None

    def __post_init__(self):
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        if not self.src_device or not self.dst_device:
            raise ValueError("device identifiers must be non-empty")
        if not 0 <= self.dst_port <= 65535:
            raise ValueError(f"dst_port {self.dst_port} out of range")
        if self.packet_count < 0 or self.byte_count < 0:
            raise ValueError("packet and byte counts must be non-negative")
        if self.packet_count > 0 and self.byte_count < self.packet_count:
            raise ValueError("byte_count smaller than packet_count")
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ValueError("duration must be finite and >= 0")


@dataclass(frozen=True, slots=True)
class DeviceTelemetry:
    timestamp: float
    device: str
    cpu_pct: float
    mem_pct: float
    syscall_rate: float

    def __post_init__(self):
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        if not self.device:
            raise ValueError("device identifier must be non-empty")
        if not 0.0 <= self.cpu_pct <= 100.0:
            raise ValueError(f"cpu_pct {self.cpu_pct} outside [0, 100]")
        if not 0.0 <= self.mem_pct <= 100.0:
            raise ValueError(f"mem_pct {self.mem_pct} outside [0, 100]")
        if not (math.isfinite(self.syscall_rate) and self.syscall_rate >= 0):
            raise ValueError(f"syscall_rate {self.syscall_rate} must be >= 0")


class MissingColumn(DataError):
    def __init__(self, name: str):
        super().__init__(f"missing column {name!r}")
        self.name = name


class UnparsableRow(DataError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class TooManyBadRows(DataError):
    def __init__(self, errors: Sequence[UnparsableRow]):
        super().__init__(f"aborted after {len(errors)} unparsable rows; first: {errors[0]}")
        self.errors = tuple(errors)


@dataclass(frozen=True)
class Table:
    """Time-ordered records plus the row errors met while reading them."""

    records: tuple
    errors: tuple[UnparsableRow, ...] = ()

    def __iter__(self) -> Iterator:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


class TimestampFormat(str, enum.Enum):
    EPOCH_SECONDS = "EpochSeconds"
    EPOCH_MICROS = "EpochMicros"
    ISO8601 = "Iso8601"


@dataclass
class ColumnMapping:
    """Maps canonical flow fields onto the columns of an external flow export.

    ``protocols`` translates source protocol values (e.g. IANA numbers ``6``,
    ``17``) and ``duration_scale`` converts the source duration unit to seconds.
    """

    columns: dict[str, str]
    timestamp_format: TimestampFormat = TimestampFormat.EPOCH_SECONDS
    label_values: dict[str, TrafficLabel] = field(default_factory=dict)
    protocols: dict[str, Protocol] = field(default_factory=dict)
    duration_scale: float = 1.0

    def __post_init__(self):
        unknown = set(self.columns) - set(FLOW_COLUMNS)
        if unknown:
            raise ContractViolation(f"unknown canonical fields in mapping: {sorted(unknown)}")
        for name in REQUIRED_MAPPED:
            if name not in self.columns:
                raise ContractViolation(f"mapping does not cover required field {name!r}")

    @classmethod
    def load(cls, path: str | os.PathLike) -> ColumnMapping:
        """Read a ``key = value`` mapping file.

        Keys are canonical field names, ``timestamp_format``, ``duration_scale``,
        ``label.<source value>`` and ``protocol.<source value>``. ``#`` starts a
        comment line.
        """
        columns: dict[str, str] = {}
        labels: dict[str, TrafficLabel] = {}
        protocols: dict[str, Protocol] = {}
        ts_format = TimestampFormat.EPOCH_SECONDS
        scale = 1.0
        with open(path, encoding="utf-8") as fh:
            for n, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ContractViolation(f"{path}:{n}: expected key = value")
                key, value = (part.strip() for part in line.split("=", 1))
                if key == "timestamp_format":
                    ts_format = TimestampFormat(value)
                elif key == "duration_scale":
                    scale = float(value)
                elif key.startswith("label."):
                    labels[key[len("label."):]] = TrafficLabel.from_token(value)
                elif key.startswith("protocol."):
                    protocols[key[len("protocol."):]] = Protocol(value.upper())
                else:
                    columns[key] = value
        return cls(columns, ts_format, labels, protocols, scale)


def _parse_int(text: str, lenient: bool) -> int:
    text = text.strip()
    if lenient:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"{text!r} is not an integer")
        return int(value)
    return int(text)


def _parse_bool(text: str, lenient: bool) -> bool:
    text = text.strip()
    if text in ("0", "1"):
        return text == "1"
    if lenient:
        return float(text) > 0
    raise ValueError(f"syn_flag must be 0 or 1, got {text!r}")


def _parse_timestamp(text: str, fmt: TimestampFormat) -> float:
    text = text.strip()
    if fmt is TimestampFormat.EPOCH_SECONDS:
        return float(text)
    if fmt is TimestampFormat.EPOCH_MICROS:
        return int(float(text)) / 1e6
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def _header_index(header: list[str], wanted: Iterable[str]) -> dict[str, int]:
    positions = {name.strip(): i for i, name in enumerate(header)}
    index = {}
    for name in wanted:
        if name not in positions:
            raise MissingColumn(name)
        index[name] = positions[name]
    return index


def _read_rows(path, wanted, build: Callable[[list[str], dict[str, int]], object], max_bad_rows):
    records, errors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file, header row expected")
        index = _header_index(header, wanted)
        for row in reader:
            if not row:
                continue
            try:
                records.append(build(row, index))
            except (ValueError, IndexError, KeyError) as exc:
                errors.append(UnparsableRow(reader.line_num, str(exc) or type(exc).__name__))
                if len(errors) > max_bad_rows:
                    raise TooManyBadRows(errors) from None
    records.sort(key=lambda r: r.timestamp)
    return Table(tuple(records), tuple(errors))


def _canonical_flow(row: list[str], ix: dict[str, int]) -> FlowRecord:
    label = row[ix["label"]].strip()
    return FlowRecord(
        timestamp=float(row[ix["timestamp"]]),
        src_device=row[ix["src_device"]].strip(),
        dst_device=row[ix["dst_device"]].strip(),
        protocol=Protocol(row[ix["protocol"]].strip()),
        dst_port=int(row[ix["dst_port"]]),
        packet_count=int(row[ix["packet_count"]]),
        byte_count=int(row[ix["byte_count"]]),
        duration=float(row[ix["duration"]]),
        syn_flag=_parse_bool(row[ix["syn_flag"]], lenient=False),
        label=TrafficLabel.from_token(label) if label else None,
    )


def _mapped_flow_builder(mapping: ColumnMapping):
    cols = mapping.columns

    def protocol(text: str) -> Protocol:
        text = text.strip()
        if text in mapping.protocols:
            return mapping.protocols[text]
        return Protocol(text.upper())

    def label(text: str) -> TrafficLabel | None:
        text = text.strip()
        if not text:
            return None
        if text in mapping.label_values:
            return mapping.label_values[text]
        return TrafficLabel.from_token(text)

    def build(row: list[str], ix: dict[str, int]) -> FlowRecord:
        def get(name):
            return row[ix[cols[name]]] if name in cols else None

        port, dur, syn, lab = get("dst_port"), get("duration"), get("syn_flag"), get("label")
        return FlowRecord(
            timestamp=_parse_timestamp(get("timestamp"), mapping.timestamp_format),
            src_device=get("src_device").strip(),
            dst_device=get("dst_device").strip(),
            protocol=protocol(get("protocol")),
            dst_port=_parse_int(port, True) if port is not None else 0,
            packet_count=_parse_int(get("packet_count"), True),
            byte_count=_parse_int(get("byte_count"), True),
            duration=float(dur) * mapping.duration_scale if dur is not None else 0.0,
            syn_flag=_parse_bool(syn, True) if syn is not None else False,
            label=label(lab) if lab is not None else None,
        )

    return build


def read_flows(path, mapping: ColumnMapping | None = None,
               max_bad_rows: int = DEFAULT_MAX_BAD_ROWS) -> Table:
    """Read a flow CSV, canonical or through ``mapping``, sorted by timestamp."""
    if mapping is None:
        return _read_rows(path, FLOW_COLUMNS, _canonical_flow, max_bad_rows)
    return _read_rows(path, mapping.columns.values(), _mapped_flow_builder(mapping), max_bad_rows)


def _telemetry_row(row: list[str], ix: dict[str, int]) -> DeviceTelemetry:
    return DeviceTelemetry(
        timestamp=float(row[ix["timestamp"]]),
        device=row[ix["device"]].strip(),
        cpu_pct=float(row[ix["cpu_pct"]]),
        mem_pct=float(row[ix["mem_pct"]]),
        syscall_rate=float(row[ix["syscall_rate"]]),
    )


def read_telemetry(path, max_bad_rows: int = DEFAULT_MAX_BAD_ROWS) -> Table:
    return _read_rows(path, TELEMETRY_COLUMNS, _telemetry_row, max_bad_rows)


def write_flows(records: Iterable[FlowRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(FLOW_COLUMNS)
        for r in records:
            out.writerow((
                repr(float(r.timestamp)), r.src_device, r.dst_device, r.protocol.value,
                r.dst_port, r.packet_count, r.byte_count, repr(float(r.duration)),
                int(r.syn_flag), r.label.token if r.label else "",
            ))


def write_telemetry(samples: Iterable[DeviceTelemetry], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TELEMETRY_COLUMNS)
        for s in samples:
            out.writerow((repr(float(s.timestamp)), s.device, repr(float(s.cpu_pct)),
                          repr(float(s.mem_pct)), repr(float(s.syscall_rate))))
