"""Message logs, inter-arrival times, adaptive time bins, and tensor building.

Log layout (CSV, optional header)::

    timestamp_ms,rtu_id,points_requested,channel[,label]

JSON-lines records use the same keys.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from scadatensor.errors import ConfigError, DataError
from scadatensor.sparse_tensor import SparseTensorCOO, inflate_binary

log = logging.getLogger(__name__)

FIELDS = ("timestamp_ms", "rtu_id", "points_requested", "channel", "label")
LABELS = ("benign", "anomalous")

# mode name -> MessageRecord attribute; "dt" is derived from the stream
MODE_FIELDS = {"rtu": "rtu_id", "points": "points_requested", "channel": "channel"}
TIME_MODE = "dt"

# encode() status codes
OK, OOV, SKIPPED = 0, 1, 2


@dataclass(frozen=True)
class MessageRecord:
    """One analog-scan request sent to an RTU."""

    timestamp_ms: int
    rtu_id: str
    points_requested: int
    channel: str
    label: str | None = None

    def __post_init__(self):
        if self.timestamp_ms < 0:
            raise DataError(f"timestamp_ms must be >= 0, got {self.timestamp_ms}")
        if self.points_requested < 1:
            raise DataError(
                f"points_requested must be >= 1, got {self.points_requested}")
        if self.label is not None and self.label not in LABELS:
            raise DataError(f"label must be one of {LABELS}, got {self.label!r}")

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"

    def field_value(self, mode: str):
        try:
            return getattr(self, MODE_FIELDS[mode])
        except KeyError:
            raise ConfigError(f"unknown categorical mode {mode!r}") from None

    def to_dict(self) -> dict:
        d = {
            "timestamp_ms": self.timestamp_ms,
            "rtu_id": self.rtu_id,
            "points_requested": self.points_requested,
            "channel": self.channel,
        }
        if self.label is not None:
            d["label"] = self.label
        return d


class LogParseError(DataError):
    """Raised with every malformed line of a log; ``errors`` holds (line, message)."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        shown = "; ".join(f"line {n}: {m}" for n, m in errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        super().__init__(f"{len(errors)} malformed line(s): {shown}{more}")


def _make_record(raw: Mapping) -> MessageRecord:
    missing = [k for k in FIELDS[:4] if raw.get(k) in (None, "")]
    if missing:
        raise DataError(f"missing required field(s): {', '.join(missing)}")
    try:
        ts = int(raw["timestamp_ms"])
    except (TypeError, ValueError):
        raise DataError(f"timestamp_ms is not an integer: {raw['timestamp_ms']!r}") from None
    try:
        points = int(raw["points_requested"])
    except (TypeError, ValueError):
        raise DataError(
            f"points_requested is not an integer: {raw['points_requested']!r}") from None
    label = raw.get("label") or None
    return MessageRecord(ts, str(raw["rtu_id"]), points, str(raw["channel"]), label)


def _as_text_lines(stream) -> Iterable[str]:
    if isinstance(stream, bytes):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    elif isinstance(stream, io.BufferedIOBase) or "b" in getattr(stream, "mode", ""):
        stream = io.TextIOWrapper(stream, encoding="utf-8")
    return stream


def parse_log(stream, fmt: str = "csv") -> list[MessageRecord]:
    """Parse newline-delimited records from text, bytes, or a file object.

    All malformed lines are collected and reported together in a
    :class:`LogParseError`.
    """
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"unknown log format {fmt!r} (expected csv or jsonl)")
    records: list[MessageRecord] = []
    errors: list[tuple[int, str]] = []
    for lineno, line in enumerate(_as_text_lines(stream), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            if fmt == "csv":
                parts = next(csv.reader([line]))
                if lineno == 1 and parts and parts[0].strip() == "timestamp_ms":
                    continue
                if len(parts) < 4 or len(parts) > 5:
                    raise DataError(f"expected 4 or 5 fields, got {len(parts)}")
                raw = dict(zip(FIELDS, (p.strip() for p in parts)))
            else:
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"invalid JSON: {exc.msg}") from None
                if not isinstance(raw, dict):
                    raise DataError("JSON record must be an object")
            records.append(_make_record(raw))
        except DataError as exc:
            errors.append((lineno, str(exc)))
    if errors:
        raise LogParseError(errors)
    return records


def log_format_for(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    return "csv"


def read_log(path, fmt: str | None = None) -> list[MessageRecord]:
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    with open(path, "rb") as fh:
        return parse_log(fh.read(), fmt or log_format_for(path))


def write_log(records: Sequence[MessageRecord], path, fmt: str | None = None) -> None:
    fmt = fmt or log_format_for(path)
    labeled = any(r.label is not None for r in records)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for r in records:
                fh.write(json.dumps(r.to_dict()) + "\n")
            return
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS if labeled else FIELDS[:4])
        for r in records:
            row = [r.timestamp_ms, r.rtu_id, r.points_requested, r.channel]
            if labeled:
                row.append(r.label or "")
            writer.writerow(row)


# ---------------------------------------------------------------------------
# inter-arrival times


def compute_delta_times(
    records: Sequence[MessageRecord],
) -> list[tuple[MessageRecord, int | None]]:
    """Pair each record with the ms elapsed since the previous message to its RTU.

    Records are stably sorted by timestamp first; the first message seen for an
    RTU gets ``None``.
    """
    ordered = sorted(records, key=lambda r: r.timestamp_ms)
    last: dict[str, int] = {}
    out = []
    for r in ordered:
        prev = last.get(r.rtu_id)
        out.append((r, None if prev is None else r.timestamp_ms - prev))
        last[r.rtu_id] = r.timestamp_ms
    return out


def delta_times_in_order(records: Sequence[MessageRecord]) -> list[int | None]:
    """Per-RTU inter-arrival times, returned in the caller's record order."""
    order = sorted(range(len(records)), key=lambda i: records[i].timestamp_ms)
    last: dict[str, int] = {}
    out: list[int | None] = [None] * len(records)
    for i in order:
        r = records[i]
        prev = last.get(r.rtu_id)
        out[i] = None if prev is None else r.timestamp_ms - prev
        last[r.rtu_id] = r.timestamp_ms
    return out


# ---------------------------------------------------------------------------
# encoders and binning


@dataclass(frozen=True)
class DimensionEncoder:
    """Bijection between the distinct training tokens of one mode and 0..K-1."""

    mode: str
    tokens: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError(f"encoder {self.mode!r} has duplicate tokens")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def fit(cls, mode: str, values: Iterable) -> "DimensionEncoder":
        tokens = tuple(sorted(set(values)))
        if not tokens:
            raise DataError(f"no values to fit encoder for mode {mode!r}")
        return cls(mode, tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token) -> int | None:
        return self.index.get(token)

    def decode(self, i: int):
        return self.tokens[i]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DimensionEncoder":
        return cls(d["mode"], tuple(d["tokens"]))


@dataclass(frozen=True)
class TimeBinning:
    """Bins ``[e_0, e_1), ..., [e_{B-1}, inf)`` over inter-arrival time in ms; e_0 = 0."""

    edges: tuple[int, ...]

    def __post_init__(self):
        e = self.edges
        if not e or e[0] != 0:
            raise DataError("time bin edges must start at 0")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise DataError("time bin edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.edges)

    def assign(self, dt) -> np.ndarray | int:
        idx = np.searchsorted(np.asarray(self.edges), dt, side="right") - 1
        return idx if np.ndim(idx) else int(idx)

    def to_dict(self) -> dict:
        return {"edges": list(self.edges)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TimeBinning":
        return cls(tuple(int(e) for e in d["edges"]))


def fit_time_bins(deltas: Sequence[int], target_bins: int) -> TimeBinning:
    """Equal-frequency bins ending at the empirical ``k / target_bins`` quantiles.

    Each quantile (inverted CDF, so an observed value ``q``) closes its bin,
    giving an edge at ``q + 1``. Repeated edges merge and an edge above the
    largest value is dropped, so every bin holds at least one training value
    and ``n_bins <= target_bins``.
    """
    if target_bins < 1:
        raise ConfigError(f"target_bins must be >= 1, got {target_bins}")
    d = np.asarray([x for x in deltas if x is not None], dtype=np.int64)
    if d.size == 0:
        raise DataError("cannot fit time bins without any inter-arrival times")
    if np.any(d < 0):
        raise DataError("inter-arrival times must be non-negative")
    qs = np.arange(1, target_bins) / target_bins
    cuts = np.quantile(d, qs, method="inverted_cdf") if qs.size else np.array([])
    cuts = np.unique(cuts.astype(np.int64)) + 1
    cuts = cuts[cuts <= d.max()]
    return TimeBinning((0, *(int(c) for c in cuts)))


# ---------------------------------------------------------------------------
# schemas and tensor construction


@dataclass(frozen=True)
class TensorSchema:
    name: str
    modes: tuple[str, ...]
    value_kind: str  # "count" or "binary"

    @property
    def has_time(self) -> bool:
        return TIME_MODE in self.modes

    @property
    def categorical_modes(self) -> tuple[str, ...]:
        return tuple(m for m in self.modes if m != TIME_MODE)


SCHEMAS = {
    "IPT": TensorSchema("IPT", ("rtu", "points", "dt"), "count"),
    "IPCT": TensorSchema("IPCT", ("rtu", "points", "channel", "dt"), "count"),
    "IPC": TensorSchema("IPC", ("rtu", "points", "channel"), "binary"),
    # two-way matrices for the NMF baselines
    "IP": TensorSchema("IP", ("rtu", "points"), "binary"),
    "IC": TensorSchema("IC", ("rtu", "channel"), "binary"),
}


def get_schema(name: str) -> TensorSchema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise ConfigError(
            f"unknown schema {name!r}; expected one of {', '.join(SCHEMAS)}") from None


@dataclass
class EncodedBatch:
    """Index tuples for a batch of records, in input order.

    ``status[i]`` is OK, OOV (a categorical value absent from training) or
    SKIPPED (time-bearing schema and no previous message to the same RTU).
    Rows of ``indices`` that are not OK hold -1.
    """

    indices: np.ndarray
    status: np.ndarray
    deltas: list

    @property
    def ok(self) -> np.ndarray:
        return self.status == OK


def fit_encoders(records: Sequence[MessageRecord], modes: Iterable[str]) -> dict:
    return {m: DimensionEncoder.fit(m, (r.field_value(m) for r in records))
            for m in modes if m != TIME_MODE}


def encode_records(
    records: Sequence[MessageRecord],
    schema: TensorSchema,
    encoders: Mapping[str, DimensionEncoder],
    binning: TimeBinning | None = None,
    deltas: Sequence[int | None] | None = None,
) -> EncodedBatch:
    """Map records to index tuples under ``schema``.

    ``deltas`` defaults to the per-RTU inter-arrival times of ``records`` itself.
    """
    missing = [m for m in schema.categorical_modes if m not in encoders]
    if missing:
        raise ConfigError(f"schema {schema.name} needs encoders for {missing}")
    if schema.has_time and binning is None:
        raise ConfigError(f"schema {schema.name} needs a time binning")
    if deltas is None:
        deltas = delta_times_in_order(records) if schema.has_time else [None] * len(records)
    n, D = len(records), len(schema.modes)
    indices = np.full((n, D), -1, dtype=np.int64)
    status = np.full(n, OK, dtype=np.int8)
    cat_modes = schema.categorical_modes
    for i, r in enumerate(records):
        codes = {m: encoders[m].encode(r.field_value(m)) for m in cat_modes}
        if any(v is None for v in codes.values()):
            status[i] = OOV
            continue
        if schema.has_time:
            if deltas[i] is None:
                status[i] = SKIPPED
                continue
            codes[TIME_MODE] = binning.assign(deltas[i])
        indices[i] = [codes[m] for m in schema.modes]
    return EncodedBatch(indices, status, list(deltas))


@dataclass
class TensorBuild:
    tensor: SparseTensorCOO
    schema: TensorSchema
    encoders: dict
    binning: TimeBinning | None
    n_records: int
    n_skipped: int = 0
    oov: list = field(default_factory=list)
    inflation: int = 1

    def skip_report(self) -> str:
        return (f"skip report: schema={self.schema.name} records={self.n_records} "
                f"encoded={self.n_records - self.n_skipped - len(self.oov)} "
                f"first_occurrence_skipped={self.n_skipped} oov={len(self.oov)}")


def build_tensor(
    records: Sequence[MessageRecord],
    schema: TensorSchema | str,
    encoders: Mapping[str, DimensionEncoder] | None = None,
    binning: TimeBinning | None = None,
    target_bins: int = 64,
) -> TensorBuild:
    """Accumulate records into a sparse tensor under ``schema``.

    Without ``encoders`` the encoders (and, for time-bearing schemas, the time
    binning) are fit from ``records``. Count schemas store occurrence counts;
    the binary schema stores 1 per observed tuple and is then inflated.
    """
    if isinstance(schema, str):
        schema = get_schema(schema)
    if not records:
        raise DataError("cannot build a tensor from an empty record list")
    deltas = delta_times_in_order(records) if schema.has_time else [None] * len(records)
    if encoders is None:
        encoders = fit_encoders(records, schema.modes)
    else:
        extra = set(encoders) - set(schema.categorical_modes)
        if extra or any(m not in encoders for m in schema.categorical_modes):
            raise ConfigError(
                f"encoder modes {sorted(encoders)} do not match schema "
                f"{schema.name} modes {list(schema.categorical_modes)}")
        encoders = {m: encoders[m] for m in schema.categorical_modes}
    if schema.has_time and binning is None:
        binning = fit_time_bins(deltas, target_bins)
    if not schema.has_time:
        binning = None
    batch = encode_records(records, schema, encoders, binning, deltas)
    ok = batch.ok
    shape = tuple(binning.n_bins if m == TIME_MODE else len(encoders[m])
                  for m in schema.modes)
    values = np.ones(int(ok.sum()))
    tensor = SparseTensorCOO.from_arrays(batch.indices[ok], values, shape)
    inflation = 1
    if schema.value_kind == "binary" and tensor.nnz:
        tensor = SparseTensorCOO(tensor.shape, tensor.coords.copy(), np.ones(tensor.nnz))
        inflated = inflate_binary(tensor)
        inflation = int(inflated.values[0])
        tensor = inflated
    build = TensorBuild(
        tensor=tensor,
        schema=schema,
        encoders=dict(encoders),
        binning=binning,
        n_records=len(records),
        n_skipped=int((batch.status == SKIPPED).sum()),
        oov=[records[i] for i in np.flatnonzero(batch.status == OOV)],
        inflation=inflation,
    )
    log.info(build.skip_report())
    return build
