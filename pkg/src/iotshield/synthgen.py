"""Synthetic healthcare-IoT traffic and telemetry with attack injection.

Benign traffic is a per-device Poisson process whose rate carries a
sinusoidal "diurnal" modulation compressed onto the scenario duration.
Devices alternate between a chatty *monitor* class and a quiet *pump* class.
Attack processes are layered on top and every flow they emit carries the
matching attack label; all other flows are labelled benign.

All randomness comes from one ``numpy.random.Generator`` seeded from the
config, so a (config, seed) pair fully determines the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DataError
from .flowdata import (
    BENIGN, AttackKind, DeviceTelemetry, FlowRecord, Protocol, TrafficLabel,
)


class InvalidScenario(DataError):
    pass


UDP_PORTS = frozenset({53, 123, 5683})

# (rate factor, bytes factor, cpu offset, syscall baseline)
DEVICE_CLASSES = {
    "monitor": (1.5, 1.3, 5.0, 60.0),
    "pump": (0.5, 0.7, -5.0, 40.0),
}


@dataclass
class DeviceProfile:
    mean_event_interval_s: float = 6.0
    mean_packets_per_flow: float = 8.0
    mean_bytes_per_packet: float = 220.0
    port_preference: dict[int, float] = field(
        default_factory=lambda: {443: 0.4, 8883: 0.3, 2575: 0.1, 53: 0.1, 123: 0.1})
    cpu_baseline_pct: float = 20.0
    mem_baseline_pct: float = 35.0
    diurnal_amplitude: float = 0.3

    def validate(self) -> None:
        for name in ("mean_event_interval_s", "mean_packets_per_flow", "mean_bytes_per_packet"):
            if not getattr(self, name) > 0:
                raise InvalidScenario(f"{name} must be > 0")
        for name in ("cpu_baseline_pct", "mem_baseline_pct"):
            if not 0 <= getattr(self, name) <= 100:
                raise InvalidScenario(f"{name} must lie in [0, 100]")
        if not 0 <= self.diurnal_amplitude < 1:
            raise InvalidScenario("diurnal_amplitude must lie in [0, 1)")
        if not self.port_preference or any(w < 0 for w in self.port_preference.values()) \
                or sum(self.port_preference.values()) <= 0:
            raise InvalidScenario("port_preference must be a non-empty weight table")
        if any(not 0 <= p <= 65535 for p in self.port_preference):
            raise InvalidScenario("port_preference holds an invalid port")


@dataclass
class AttackSpec:
    kind: AttackKind
    start_s: float
    end_s: float
    attacker_devices: tuple[str, ...]
    victim_device: str
    intensity: float
    low_rate_period_s: float | None = None

    def validate(self, devices: set[str], duration_s: float) -> None:
        if not self.start_s < self.end_s:
            raise InvalidScenario(f"{self.kind.value}: start_s must precede end_s")
        if self.start_s < 0 or self.end_s > duration_s:
            raise InvalidScenario(f"{self.kind.value}: window outside [0, {duration_s}]")
        if not self.intensity > 0:
            raise InvalidScenario(f"{self.kind.value}: intensity must be > 0")
        if self.kind is AttackKind.LOW_RATE and not (self.low_rate_period_s or 0) > 0:
            raise InvalidScenario("low_rate attacks need low_rate_period_s > 0")
        if not self.attacker_devices:
            raise InvalidScenario(f"{self.kind.value}: no attacker devices")
        unknown = (set(self.attacker_devices) | {self.victim_device}) - devices
        if unknown:
            raise InvalidScenario(f"{self.kind.value}: unknown devices {sorted(unknown)}")
        if self.victim_device in self.attacker_devices:
            raise InvalidScenario(f"{self.kind.value}: victim is also an attacker")

    def pulse_starts(self) -> np.ndarray:
        """Nominal pulse start times of a low-rate attack (before jitter)."""
        period = self.low_rate_period_s
        width = pulse_width(period)
        count = int(math.floor((self.end_s - self.start_s - width) / period)) + 1
        return self.start_s + period * np.arange(max(count, 0))


def pulse_width(period: float) -> float:
    return min(1.0, 0.1 * period)


@dataclass
class ScenarioConfig:
    n_devices: int = 100
    duration_s: float = 600.0
    seed: int = 42
    benign_profile: DeviceProfile = field(default_factory=DeviceProfile)
    attacks: list[AttackSpec] = field(default_factory=list)
    target_events: int | None = 10_000
    telemetry_interval_s: float = 1.0
    peers_per_device: int = 2

    def validate(self) -> None:
        if self.n_devices < 2:
            raise InvalidScenario("n_devices must be >= 2")
        if not self.duration_s > 0:
            raise InvalidScenario("duration_s must be > 0")
        if not 0 <= self.seed < 2**64:
            raise InvalidScenario("seed must be a 64-bit unsigned integer")
        if self.target_events is not None and self.target_events <= 0:
            raise InvalidScenario("target_events must be positive")
        if not self.telemetry_interval_s > 0:
            raise InvalidScenario("telemetry_interval_s must be > 0")
        if not 1 <= self.peers_per_device < self.n_devices:
            raise InvalidScenario("peers_per_device must lie in [1, n_devices)")
        self.benign_profile.validate()
        ids = set(device_ids(self.n_devices))
        for spec in self.attacks:
            spec.validate(ids, self.duration_s)


def device_ids(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"dev-{i:0{width}d}" for i in range(n)]


def device_class(index: int) -> str:
    return "monitor" if index % 2 == 0 else "pump"


def _attack_span(spec: AttackSpec) -> float:
    """Seconds of attack emission per attacker, at intensity x base rate."""
    if spec.kind is AttackKind.LOW_RATE:
        return len(spec.pulse_starts()) * spec.low_rate_period_s
    return spec.end_s - spec.start_s


def base_rate(config: ScenarioConfig) -> float:
    """Mean benign events/second per device before class and diurnal factors.

    With ``target_events`` set the rate is solved so the expected total flow
    count (benign plus attack) equals the target.
    """
    if config.target_events is None:
        return 1.0 / config.benign_profile.mean_event_interval_s
    weight = config.duration_s * sum(
        DEVICE_CLASSES[device_class(i)][0] for i in range(config.n_devices))
    weight += sum(len(a.attacker_devices) * a.intensity * _attack_span(a) for a in config.attacks)
    return config.target_events / weight


def _diurnal(t, amplitude, duration):
    return 1.0 + amplitude * np.sin(2 * np.pi * np.asarray(t) / duration)


class _Builder:
    def __init__(self, config: ScenarioConfig):
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.ids = device_ids(config.n_devices)
        self.rate = base_rate(config)
        prof = config.benign_profile
        ports = sorted(prof.port_preference)
        weights = np.array([prof.port_preference[p] for p in ports], dtype=float)
        self.ports = np.array(ports)
        self.port_p = weights / weights.sum()
        self.flows: list[FlowRecord] = []

    def benign(self) -> None:
        cfg, prof, rng = self.cfg, self.cfg.benign_profile, self.rng
        n = cfg.n_devices
        peers = []
        for i in range(n):
            others = np.array([j for j in range(n) if j != i])
            peers.append(rng.choice(others, size=cfg.peers_per_device, replace=False))
        amp, dur = prof.diurnal_amplitude, cfg.duration_s
        for i, name in enumerate(self.ids):
            rate_f, bytes_f, _, _ = DEVICE_CLASSES[device_class(i)]
            lam = self.rate * rate_f
            lam_max = lam * (1 + amp)
            # Thinning of a homogeneous process at the peak rate.
            count = rng.poisson(lam_max * dur)
            times = np.sort(rng.uniform(0.0, dur, size=count))
            keep = rng.uniform(size=count) < _diurnal(times, amp, dur) / (1 + amp)
            times = times[keep]
            k = len(times)
            dst = rng.choice(peers[i], size=k)
            port = rng.choice(self.ports, size=k, p=self.port_p)
            packets = 1 + rng.poisson(prof.mean_packets_per_flow - 1, size=k) \
                if prof.mean_packets_per_flow > 1 else np.ones(k, dtype=int)
            per_pkt = prof.mean_bytes_per_packet * bytes_f * rng.lognormal(-0.125, 0.5, size=k)
            duration = rng.exponential(0.5, size=k)
            syn = rng.uniform(size=k) < 0.3
            for t, d, p, pk, bpp, du, s in zip(times, dst, port, packets, per_pkt, duration, syn):
                udp = int(p) in UDP_PORTS
                pk = int(pk)
                self.flows.append(FlowRecord(
                    timestamp=round(float(t), 6), src_device=name, dst_device=self.ids[d],
                    protocol=Protocol.UDP if udp else Protocol.TCP, dst_port=int(p),
                    packet_count=pk, byte_count=max(pk, int(round(pk * bpp))),
                    duration=round(float(du), 6), syn_flag=bool(s) and not udp, label=BENIGN,
                ))

    def _attack_flow(self, kind: AttackKind, t: float, src: str, dst: str) -> FlowRecord:
        rng = self.rng
        if kind is AttackKind.SYN_FLOOD:
            proto, port, pk, bpp, du, syn = Protocol.TCP, 443, 1, rng.integers(40, 65), 0.0, True
        elif kind is AttackKind.HTTP_FLOOD:
            proto, port, syn = Protocol.TCP, int(rng.choice([80, 443])), True
            pk, bpp, du = int(rng.integers(3, 7)), rng.integers(60, 161), rng.exponential(0.05)
        elif kind is AttackKind.UDP_FLOOD:
            proto, port, syn = Protocol.UDP, int(rng.integers(1024, 65536)), False
            pk, bpp, du = int(rng.integers(1, 5)), rng.integers(1200, 1473), rng.exponential(0.001)
        else:
            proto, port, syn = Protocol.TCP, 80, True
            pk, bpp, du = int(rng.integers(15, 26)), rng.integers(1000, 1461), rng.exponential(0.2)
        return FlowRecord(
            timestamp=round(float(t), 6), src_device=src, dst_device=dst, protocol=proto,
            dst_port=port, packet_count=int(pk), byte_count=int(pk * bpp),
            duration=round(float(du), 6), syn_flag=syn, label=TrafficLabel.attack(kind),
        )

    def attack(self, spec: AttackSpec) -> None:
        rng = self.rng
        lam = self.rate * spec.intensity
        for src in spec.attacker_devices:
            if spec.kind is AttackKind.LOW_RATE:
                period = spec.low_rate_period_s
                width = pulse_width(period)
                burst = max(1, int(round(lam * period)))
                times = []
                for p in spec.pulse_starts():
                    start = p + rng.uniform(0.0, 0.02 * period)
                    start = min(start, spec.end_s - width)
                    times.extend(np.sort(rng.uniform(start, start + width, size=burst)))
            else:
                count = rng.poisson(lam * (spec.end_s - spec.start_s))
                times = np.sort(rng.uniform(spec.start_s, spec.end_s, size=count))
            for t in times:
                self.flows.append(self._attack_flow(spec.kind, t, src, spec.victim_device))

    def telemetry(self) -> list[DeviceTelemetry]:
        cfg, prof, rng = self.cfg, self.cfg.benign_profile, self.rng
        ts = np.arange(0.0, cfg.duration_s, cfg.telemetry_interval_s)
        diurnal = _diurnal(ts, prof.diurnal_amplitude, cfg.duration_s)
        samples = []
        for i, name in enumerate(self.ids):
            _, _, cpu_off, sys_base = DEVICE_CLASSES[device_class(i)]
            cpu = (prof.cpu_baseline_pct + cpu_off) * diurnal + rng.normal(0, 1.5, ts.size)
            mem = prof.mem_baseline_pct + rng.normal(0, 1.0, ts.size)
            sysc = sys_base * diurnal * rng.lognormal(-0.02, 0.2, ts.size)
            for spec in cfg.attacks:
                if name != spec.victim_device and name not in spec.attacker_devices:
                    continue
                active = (ts >= spec.start_s) & (ts <= spec.end_s)
                # Saturating bump on attacker and victim hosts.
                cpu = np.where(active, np.maximum(cpu, np.minimum(95.0, cpu + 0.5 * spec.intensity)), cpu)
                mem = np.where(active, np.maximum(mem, np.minimum(95.0, mem + 0.25 * spec.intensity)), mem)
                sysc = np.where(active, sysc * (1 + 0.05 * spec.intensity), sysc)
            cpu, mem = np.clip(cpu, 0, 100), np.clip(mem, 0, 100)
            sysc = np.maximum(sysc, 0)
            for t, c, m, s in zip(ts, cpu, mem, sysc):
                samples.append(DeviceTelemetry(round(float(t), 6), name, round(float(c), 4),
                                               round(float(m), 4), round(float(s), 4)))
        samples.sort(key=lambda s: s.timestamp)
        return samples


def generate(config: ScenarioConfig) -> tuple[list[FlowRecord], list[DeviceTelemetry]]:
    """Generate ``(flows, telemetry)``, both sorted by timestamp."""
    config.validate()
    b = _Builder(config)
    b.benign()
    for spec in config.attacks:
        b.attack(spec)
    flows = sorted(b.flows, key=lambda r: (r.timestamp, r.src_device, r.dst_device))
    return flows, b.telemetry()


def attack_mask(flows: Sequence[FlowRecord], spec: AttackSpec) -> list[bool]:
    return [
        r.label is not None and r.label.attack_kind is spec.kind
        and spec.start_s <= r.timestamp <= spec.end_s
        for r in flows
    ]


# --- Scenario presets ---------------------------------------------------------

# Attack episodes of the default scenario as (kind, start, end); windows are
# aligned to the default 5 s stride and spread so the 70/15/15 time split puts
# every kind in each partition.
DEFAULT_EPISODES = (
    (AttackKind.SYN_FLOOD, 60, 90), (AttackKind.UDP_FLOOD, 130, 160),
    (AttackKind.HTTP_FLOOD, 200, 230), (AttackKind.LOW_RATE, 270, 350),
    (AttackKind.SYN_FLOOD, 425, 445), (AttackKind.UDP_FLOOD, 445, 465),
    (AttackKind.HTTP_FLOOD, 470, 490), (AttackKind.LOW_RATE, 420, 500),
    (AttackKind.SYN_FLOOD, 515, 535), (AttackKind.UDP_FLOOD, 540, 560),
    (AttackKind.HTTP_FLOOD, 565, 585), (AttackKind.LOW_RATE, 515, 595),
)
DEFAULT_INTENSITY = {
    AttackKind.SYN_FLOOD: 15.0, AttackKind.UDP_FLOOD: 12.0,
    AttackKind.HTTP_FLOOD: 10.0, AttackKind.LOW_RATE: 6.0,
}
DEFAULT_LOW_RATE_PERIOD_S = 10.0
ATTACKERS_PER_EPISODE = 4


def episode_attacks(episodes, n_devices: int = 100, intensity=None) -> list[AttackSpec]:
    """Build AttackSpecs with disjoint attacker groups and distinct victims."""
    intensity = intensity or DEFAULT_INTENSITY
    ids = device_ids(n_devices)
    needed = len(episodes) * (ATTACKERS_PER_EPISODE + 1)
    if n_devices < needed:
        raise InvalidScenario(f"preset needs at least {needed} devices")
    specs = []
    first_attacker = len(episodes)
    for i, (kind, start, end) in enumerate(episodes):
        lo = first_attacker + i * ATTACKERS_PER_EPISODE
        specs.append(AttackSpec(
            kind=kind, start_s=float(start), end_s=float(end),
            attacker_devices=tuple(ids[lo:lo + ATTACKERS_PER_EPISODE]), victim_device=ids[i],
            intensity=intensity[kind],
            low_rate_period_s=DEFAULT_LOW_RATE_PERIOD_S if kind is AttackKind.LOW_RATE else None,
        ))
    return specs


def default_scenario(seed: int = 42, kinds: Sequence[AttackKind] | None = None) -> ScenarioConfig:
    """The reference scenario: 100 devices, 600 s, 10,000 events, all four attack kinds.

    ``kinds`` restricts the injected episodes to the given attack kinds; an
    empty sequence gives a benign-only run with the same event budget.
    """
    episodes = [e for e in DEFAULT_EPISODES if kinds is None or e[0] in kinds]
    return ScenarioConfig(seed=seed, attacks=episode_attacks(episodes))


def low_rate_scenario(seed: int = 7) -> ScenarioConfig:
    """LowRate-only scenario used to probe detection of an unseen attack kind."""
    episodes = [(AttackKind.LOW_RATE, 100, 180), (AttackKind.LOW_RATE, 250, 330),
                (AttackKind.LOW_RATE, 400, 480), (AttackKind.LOW_RATE, 500, 580)]
    return ScenarioConfig(seed=seed, attacks=episode_attacks(episodes))


# --- Config files -------------------------------------------------------------

def load_config(path) -> ScenarioConfig:
    """Parse a ``key = value`` scenario file.

    Top-level keys mirror :class:`ScenarioConfig`; ``benign.<field>`` sets a
    profile field (``benign.port_preference = 443:0.5,8883:0.5``);
    ``attack.<n>.<field>`` describes attack ``n`` with fields ``kind``,
    ``start_s``, ``end_s``, ``attackers`` (comma list), ``victim``,
    ``intensity`` and ``low_rate_period_s``. ``attacks = default`` pulls in the
    default episodes before any numbered attacks.
    """
    cfg = ScenarioConfig()
    profile = DeviceProfile()
    raw_attacks: dict[int, dict[str, str]] = {}
    use_default = False
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidScenario(f"{path}:{n}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                if key.startswith("benign."):
                    name = key[len("benign."):]
                    if name == "port_preference":
                        pairs = (item.split(":") for item in value.split(","))
                        profile.port_preference = {int(p): float(w) for p, w in pairs}
                    elif hasattr(profile, name):
                        setattr(profile, name, float(value))
                    else:
                        raise InvalidScenario(f"{path}:{n}: unknown profile field {name!r}")
                elif key.startswith("attack."):
                    _, idx, name = key.split(".", 2)
                    raw_attacks.setdefault(int(idx), {})[name] = value
                elif key == "attacks":
                    use_default = value == "default"
                elif key in ("n_devices", "peers_per_device", "seed"):
                    setattr(cfg, key, int(value))
                elif key == "target_events":
                    cfg.target_events = None if value.lower() in ("", "none") else int(value)
                elif key in ("duration_s", "telemetry_interval_s"):
                    setattr(cfg, key, float(value))
                else:
                    raise InvalidScenario(f"{path}:{n}: unknown key {key!r}")
            except ValueError as exc:
                raise InvalidScenario(f"{path}:{n}: {exc}") from None
    attacks = episode_attacks(DEFAULT_EPISODES, cfg.n_devices) if use_default else []
    for idx in sorted(raw_attacks):
        a = raw_attacks[idx]
        try:
            period = a.get("low_rate_period_s")
            attacks.append(AttackSpec(
                kind=AttackKind(a["kind"]), start_s=float(a["start_s"]), end_s=float(a["end_s"]),
                attacker_devices=tuple(s.strip() for s in a["attackers"].split(",") if s.strip()),
                victim_device=a["victim"], intensity=float(a["intensity"]),
                low_rate_period_s=float(period) if period else None,
            ))
        except (KeyError, ValueError) as exc:
            raise InvalidScenario(f"attack.{idx}: {exc}") from None
    cfg = replace(cfg, benign_profile=profile, attacks=attacks)
    cfg.validate()
    return cfg


def scenario_meta(config: ScenarioConfig, flows, telemetry) -> dict[str, str]:
    """Deterministic metadata describing a generated scenario."""
    meta = {
        "seed": str(config.seed),
        "n_devices": str(config.n_devices),
        "duration_s": repr(float(config.duration_s)),
        "target_events": str(config.target_events),
        "base_rate_per_device": repr(base_rate(config)),
        "flow_count": str(len(flows)),
        "attack_flow_count": str(sum(1 for r in flows if r.label and r.label.is_attack)),
        "telemetry_count": str(len(telemetry)),
        "attack_count": str(len(config.attacks)),
    }
    for i, a in enumerate(config.attacks):
        meta[f"attack.{i}"] = (
            f"{a.kind.value} {a.start_s!r}-{a.end_s!r} victim={a.victim_device} "
            f"attackers={','.join(a.attacker_devices)} intensity={a.intensity!r}"
            + (f" period={a.low_rate_period_s!r}" if a.low_rate_period_s else "")
        )
    return meta
