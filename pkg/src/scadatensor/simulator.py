"""Synthetic analog-scan traffic and labeled reconnaissance injections.

``synthesize_history`` stands in for recorded traffic: a seeded grid of RTUs,
each polled on one or two point blocks at its own period over a serial
channel. ``learn_profile`` summarizes any benign log; ``generate_benign``
resamples it; ``inject_anomalies`` adds attacker messages:

* blackbox: RTU address and point count uniform over the protocol ranges,
  channel uniform over the observed channels;
* greybox1: each field uniform over its observed values, but the combination
  is not one seen in the profile;
* greybox2: an observed (RTU, channel) pair with an observed point count that
  the pair is not configured for.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from scadatensor.artifacts import read_document, write_document
from scadatensor.errors import ConfigError, SimulationError
from scadatensor.ingest import MessageRecord, compute_delta_times

SCENARIOS = ("blackbox", "greybox1", "greybox2")
JAN_2020_MS = 1577836800000
FEB_2020_MS = 1580515200000


# ---------------------------------------------------------------------------
# synthetic recorded traffic


@dataclass(frozen=True)
class GridLayout:
    rtus: tuple[str, ...]
    channels: tuple[str, ...]
    blocks: tuple[tuple[str, int, float], ...]  # (rtu, points, period_ms)
    primary_channel: dict
    backup_channel: dict


def synthesize_layout(seed: int = 0, n_rtus: int = 24, n_points: int = 22,
                      n_channels: int = 9, rtu_range=(0, 255), points_range=(1, 64),
                      rtu_format: str = "RTU_{:03d}", n_backup: int = 3,
                      n_second_blocks: int = 8) -> GridLayout:
    rng = np.random.default_rng([seed, 0])
    if n_rtus > rtu_range[1] - rtu_range[0] + 1 or n_points > points_range[1] - points_range[0] + 1:
        raise ConfigError("protocol range too small for the requested layout")
    if n_channels > n_rtus:
        raise ConfigError("need at least one RTU per channel")
    addrs = np.sort(rng.choice(np.arange(rtu_range[0], rtu_range[1] + 1), n_rtus, replace=False))
    rtus = tuple(rtu_format.format(int(a)) for a in addrs)
    channels = tuple(f"CH_{i + 1}" for i in range(n_channels))
    ch_idx = np.concatenate([np.arange(n_channels),
                             rng.integers(0, n_channels, n_rtus - n_channels)])
    rng.shuffle(ch_idx)
    primary = {r: channels[c] for r, c in zip(rtus, ch_idx)}

    values = np.sort(rng.choice(np.arange(points_range[0], points_range[1] + 1),
                                n_points, replace=False)).tolist()
    assigned: dict[str, list[int]] = {r: [] for r in rtus}
    for i, v in enumerate(rng.permutation(values).tolist()):
        assigned[rtus[i % n_rtus]].append(int(v))
    for r in rtus:
        if not assigned[r]:
            assigned[r].append(int(rng.choice(values)))
    for r in rng.choice(rtus, min(n_second_blocks, n_rtus), replace=False).tolist():
        choices = [v for v in values if v not in assigned[r]]
        if choices:
            assigned[r].append(int(rng.choice(choices)))

    backup = {}
    for r in rng.choice(rtus, min(n_backup, n_rtus), replace=False).tolist():
        others = [c for c in channels if c != primary[r]]
        if others:
            backup[r] = str(rng.choice(others))

    blocks = []
    for r in rtus:
        for v in sorted(assigned[r]):
            period = float(np.exp(rng.uniform(np.log(2_000), np.log(60_000))))
            blocks.append((r, v, period))
    return GridLayout(rtus, channels, tuple(blocks), primary, backup)


def synthesize_history(n_messages: int, seed: int = 0, start_ms: int = JAN_2020_MS,
                       layout: GridLayout | None = None, jitter: float = 0.01,
                       delay_prob: float = 0.03, backup_prob: float = 0.1,
                       **layout_kwargs) -> list[MessageRecord]:
    """Benign polling traffic for a seeded synthetic grid, timestamp-sorted."""
    if n_messages < 0:
        raise ConfigError("n_messages must be >= 0")
    layout = layout or synthesize_layout(seed, **layout_kwargs)
    rng = np.random.default_rng([seed, 1])
    rate = sum(1.0 / p for _, _, p in layout.blocks)
    horizon = 1.1 * n_messages / rate + max(p for _, _, p in layout.blocks)
    times, owners = [], []
    for b, (_, _, period) in enumerate(layout.blocks):
        count = int(horizon / period * 1.2) + 10
        gaps = period * (1.0 + jitter * rng.standard_normal(count))
        late = rng.random(count) < delay_prob
        gaps = gaps + late * rng.exponential(period, count)
        t = rng.uniform(0, period) + np.cumsum(np.maximum(gaps, 1.0))
        t = t[t < horizon]
        times.append(t)
        owners.append(np.full(t.size, b))
    t_all = np.concatenate(times)
    b_all = np.concatenate(owners)
    order = np.lexsort((b_all, t_all))[:n_messages]
    use_backup = rng.random(order.size) < backup_prob
    out = []
    for k, i in enumerate(order):
        rtu, points, _ = layout.blocks[b_all[i]]
        ch = layout.primary_channel[rtu]
        if use_backup[k] and rtu in layout.backup_channel:
            ch = layout.backup_channel[rtu]
        out.append(MessageRecord(start_ms + int(t_all[i]), rtu, points, ch))
    return out


# ---------------------------------------------------------------------------
# profiles


@dataclass
class SystemProfile:
    triples: dict  # (rtu, points, channel) -> count
    rtus: list
    points: list
    channels: list
    deltas: dict  # rtu -> list of inter-arrival ms
    rtu_share: dict

    @property
    def triple_set(self) -> set:
        return set(self.triples)

    @property
    def pairs(self) -> list:
        return sorted({(r, c) for r, _, c in self.triples})

    def to_dict(self) -> dict:
        return {
            "triples": [[r, p, c, n] for (r, p, c), n in sorted(self.triples.items())],
            "rtus": self.rtus, "points": self.points, "channels": self.channels,
            "deltas": self.deltas, "rtu_share": self.rtu_share,
        }

    @classmethod
    def from_dict(cls, d) -> "SystemProfile":
        return cls({(r, int(p), c): int(n) for r, p, c, n in d["triples"]},
                   list(d["rtus"]), [int(p) for p in d["points"]], list(d["channels"]),
                   {k: [int(x) for x in v] for k, v in d["deltas"].items()},
                   {k: float(v) for k, v in d["rtu_share"].items()})

    def save(self, path) -> None:
        write_document(path, "profile", self.to_dict())

    @classmethod
    def load(cls, path) -> "SystemProfile":
        return cls.from_dict(read_document(path, "profile"))


def learn_profile(records: Sequence[MessageRecord]) -> SystemProfile:
    """Observed combinations, value sets, and per-RTU timing of a benign log."""
    if not records:
        raise SimulationError("cannot learn a profile from an empty log")
    triples = Counter((r.rtu_id, r.points_requested, r.channel) for r in records)
    deltas: dict[str, list[int]] = {}
    for r, dt in compute_delta_times(records):
        if dt is not None and dt > 0:
            deltas.setdefault(r.rtu_id, []).append(int(dt))
    rtu_counts = Counter(r.rtu_id for r in records)
    n = len(records)
    return SystemProfile(
        triples=dict(sorted(triples.items())),
        rtus=sorted(rtu_counts),
        points=sorted({r.points_requested for r in records}),
        channels=sorted({r.channel for r in records}),
        deltas={k: deltas[k] for k in sorted(deltas)},
        rtu_share={k: rtu_counts[k] / n for k in sorted(rtu_counts)},
    )


def generate_benign(profile: SystemProfile, n: int, seed: int = 0,
                    start_ms: int = FEB_2020_MS) -> list[MessageRecord]:
    """Resample ``n`` benign messages from the profile, timestamp-sorted.

    Combinations follow their observed frequencies; each RTU's timestamps
    advance by draws from that RTU's observed inter-arrival times.
    """
    if n < 0:
        raise ConfigError("n must be >= 0")
    if n == 0:
        return []
    rng = np.random.default_rng([seed, 2])
    keys = sorted(profile.triples)
    freq = np.array([profile.triples[k] for k in keys], dtype=float)
    picks = rng.choice(len(keys), size=n, p=freq / freq.sum())
    pooled = np.concatenate([np.asarray(v) for v in profile.deltas.values()]) \
        if profile.deltas else np.array([1000])
    stamps = np.zeros(n, dtype=np.int64)
    rtu_of = np.array([keys[i][0] for i in picks])
    for rtu in sorted(set(rtu_of.tolist())):
        where = np.flatnonzero(rtu_of == rtu)
        samples = np.asarray(profile.deltas.get(rtu) or pooled)
        stamps[where] = start_ms + np.cumsum(rng.choice(samples, size=where.size))
    order = np.argsort(stamps, kind="stable")
    return [MessageRecord(int(stamps[i]), keys[picks[i]][0], keys[picks[i]][1],
                          keys[picks[i]][2], "benign") for i in order]


# ---------------------------------------------------------------------------
# injections


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n_benign: int
    n_anomalies: int
    rtu_range: tuple[int, int] = (0, 255)
    points_range: tuple[int, int] = (1, 64)
    rtu_format: str = "RTU_{:03d}"
    seed: int = 0
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_anomalies < 1:
            raise ConfigError("n_anomalies must be >= 1")
        if self.n_benign < 1:
            raise ConfigError("n_benign must be >= 1 (anomaly count must be below the total)")
        for name in ("rtu_range", "points_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo}..{hi}")
        if self.points_range[0] < 1:
            raise ConfigError("points_range must start at 1 or above")

    @property
    def total(self) -> int:
        return self.n_benign + self.n_anomalies

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ScenarioConfig":
        d = dict(d)
        for k in ("rtu_range", "points_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


_SCENARIO_STREAM = {"blackbox": 11, "greybox1": 12, "greybox2": 13}


def _check_ranges(profile: SystemProfile, cfg: ScenarioConfig) -> None:
    lo, hi = cfg.rtu_range
    addressable = {cfg.rtu_format.format(a) for a in range(lo, hi + 1)}
    outside = [r for r in profile.rtus if r not in addressable]
    if outside:
        raise SimulationError(
            f"observed RTU {outside[0]!r} is outside the protocol range "
            f"{cfg.rtu_format.format(lo)}..{cfg.rtu_format.format(hi)}")
    plo, phi = cfg.points_range
    if any(not plo <= p <= phi for p in profile.points):
        raise SimulationError("observed points values fall outside points_range")


def _candidate_count(profile: SystemProfile, scenario: str) -> int:
    seen = profile.triple_set
    if scenario == "greybox1":
        return len(profile.rtus) * len(profile.points) * len(profile.channels) - len(seen)
    if scenario == "greybox2":
        return sum(1 for r, c in profile.pairs for p in profile.points if (r, p, c) not in seen)
    return 1


def inject_anomalies(benign: Sequence[MessageRecord], profile: SystemProfile,
                     config: ScenarioConfig) -> list[MessageRecord]:
    """Interleave ``config.n_anomalies`` labeled attacker messages into ``benign``.

    Every injected combination is absent from ``profile``; draws that land on
    a profiled combination are discarded and redrawn. Injection times are
    uniform over the benign stream's time span.
    """
    if config.n_anomalies < 1:
        raise ConfigError("n_anomalies must be >= 1")
    if config.scenario == "blackbox":
        _check_ranges(profile, config)
    if _candidate_count(profile, config.scenario) <= 0:
        raise SimulationError(
            f"{config.scenario}: every admissible combination is already in the profile")
    rng = np.random.default_rng([config.seed, _SCENARIO_STREAM[config.scenario]])
    seen = profile.triple_set
    pairs = profile.pairs
    lo, hi = config.rtu_range
    plo, phi = config.points_range

    def draw():
        if config.scenario == "blackbox":
            rtu = config.rtu_format.format(int(rng.integers(lo, hi + 1)))
            pts = int(rng.integers(plo, phi + 1))
            ch = profile.channels[int(rng.integers(len(profile.channels)))]
        elif config.scenario == "greybox1":
            rtu = profile.rtus[int(rng.integers(len(profile.rtus)))]
            pts = profile.points[int(rng.integers(len(profile.points)))]
            ch = profile.channels[int(rng.integers(len(profile.channels)))]
        else:
            rtu, ch = pairs[int(rng.integers(len(pairs)))]
            pts = profile.points[int(rng.integers(len(profile.points)))]
        return rtu, pts, ch

    if benign:
        t0 = min(r.timestamp_ms for r in benign)
        t1 = max(r.timestamp_ms for r in benign)
    else:
        t0 = t1 = FEB_2020_MS
    injected = []
    for _ in range(config.n_anomalies):
        for _attempt in range(config.max_attempts):
            triple = draw()
            if triple not in seen:
                break
        else:
            raise SimulationError(
                f"{config.scenario}: no out-of-profile combination after "
                f"{config.max_attempts} draws")
        ts = int(rng.integers(t0, t1 + 1))
        injected.append(MessageRecord(ts, triple[0], triple[1], triple[2], "anomalous"))
    stream = [r if r.label else MessageRecord(r.timestamp_ms, r.rtu_id, r.points_requested,
                                              r.channel, "benign") for r in benign]
    stream.extend(injected)
    return sorted(stream, key=lambda r: r.timestamp_ms)


def simulate_scenario(profile: SystemProfile, config: ScenarioConfig,
                      start_ms: int = FEB_2020_MS) -> list[MessageRecord]:
    benign = generate_benign(profile, config.n_benign, config.seed, start_ms)
    return inject_anomalies(benign, profile, config)
