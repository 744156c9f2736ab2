"""Poisson tail p-values for individual messages. Lower p means more anomalous."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from scadatensor.errors import DataError
from scadatensor.ingest import OOV, OK, MessageRecord, TensorSchema, encode_records

__all__ = [
    "ScoredMessage",
    "poisson_tail",
    "read_scores",
    "score_batch",
    "score_message",
    "write_scores",
]

# relative size below which a series term no longer changes a double sum
_NEGLIGIBLE = 1e-17


def poisson_tail(x: int, lam: float) -> float:
    """``P(X >= x)`` for ``X ~ Poisson(lam)``.

    Sums whichever side of the distribution does not cancel: the upper tail
    directly when ``x > lam``, otherwise ``1 - P(X <= x - 1)``. Terms come from
    the pmf recursion seeded in log space, so large ``lam`` or ``x`` do not
    overflow.
    """
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, np.integer)):
        if not (isinstance(x, (float, np.floating)) and float(x).is_integer()):
            raise DataError(f"x must be a non-negative integer, got {x!r}")
    x = int(x)
    lam = float(lam)
    if x < 0:
        raise DataError(f"x must be non-negative, got {x}")
    if not (lam > 0 and math.isfinite(lam)):
        raise DataError(f"lambda must be positive and finite, got {lam}")
    if x == 0:
        return 1.0
    if x == 1:
        return -math.expm1(-lam)
    log_lam = math.log(lam)
    if x > lam:
        # terms shrink as k grows past lam
        term = math.exp(-lam + x * log_lam - math.lgamma(x + 1))
        total, k = term, x
        while term > total * _NEGLIGIBLE:
            k += 1
            term *= lam / k
            total += term
        return min(total, 1.0)
    # x <= lam: sum pmf(x-1), pmf(x-2), ... downward; terms shrink toward k = 0
    k = x - 1
    term = math.exp(-lam + k * log_lam - math.lgamma(k + 1))
    total = term
    while k > 0 and term > total * _NEGLIGIBLE:
        term *= k / lam
        k -= 1
        total += term
    return max(0.0, 1.0 - total)


class RateModel(Protocol):
    schema: TensorSchema
    encoders: dict
    binning: object

    def rates(self, indices: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ScoredMessage:
    """p-value for one message.

    ``status`` is "ok", "oov" (some field never seen in training; p = 0) or
    "skipped" (time-bearing schema, no earlier message to the same RTU; no p).
    ``rate`` is the Poisson rate, or the residual for PCA scores.
    """

    row_id: int
    record: MessageRecord
    status: str
    index: tuple | None = None
    rate: float | None = None
    p_value: float | None = None

    @property
    def oov(self) -> bool:
        return self.status == "oov"


def _scored_from_batch(records, batch, rates, start_row):
    out = []
    rate_iter = iter(rates)
    for i, r in enumerate(records):
        st = batch.status[i]
        if st == OK:
            lam = float(next(rate_iter))
            idx = tuple(int(v) for v in batch.indices[i])
            p = poisson_tail(1, lam) if lam > 0 else 0.0
            out.append(ScoredMessage(start_row + i, r, "ok", idx, lam, p))
        elif st == OOV:
            out.append(ScoredMessage(start_row + i, r, "oov", None, None, 0.0))
        else:
            out.append(ScoredMessage(start_row + i, r, "skipped"))
    return out


def score_batch(model: RateModel, records: Sequence[MessageRecord],
                deltas: Sequence[int | None] | None = None) -> list[ScoredMessage]:
    """Score records in input order.

    Each message is one new occurrence of its index tuple, so its p-value is
    ``P(X >= 1) = 1 - exp(-rate)``. ``deltas`` defaults to the per-RTU
    inter-arrival times within ``records``.
    """
    if not records:
        return []
    batch = encode_records(records, model.schema, model.encoders, model.binning, deltas)
    rates = model.rates(batch.indices[batch.ok])
    return _scored_from_batch(records, batch, rates, 0)


def score_message(model: RateModel, record: MessageRecord,
                  delta_ms: int | None = None, row_id: int = 0) -> ScoredMessage:
    """Score one message; ``delta_ms`` is its gap to the previous message to the same RTU."""
    batch = encode_records([record], model.schema, model.encoders, model.binning, [delta_ms])
    rates = model.rates(batch.indices[batch.ok])
    return _scored_from_batch([record], batch, rates, row_id)[0]


SCORE_COLUMNS = ("row_id", "timestamp_ms", "rtu_id", "points_requested", "channel",
                 "oov", "p_value")


def write_scores(scored: Sequence[ScoredMessage], path, model_name: str | None = None) -> None:
    labeled = any(s.record.label is not None for s in scored)
    header = list(SCORE_COLUMNS)
    if model_name is not None:
        header.insert(1, "model")
    if labeled:
        header.append("label")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in scored:
            r = s.record
            row = [s.row_id, r.timestamp_ms, r.rtu_id, r.points_requested, r.channel,
                   int(s.oov), "" if s.p_value is None else repr(s.p_value)]
            if model_name is not None:
                row.insert(1, model_name)
            if labeled:
                row.append(r.label or "")
            w.writerow(row)


def read_scores(path) -> tuple[list[float], list[str | None], int]:
    """Read a score CSV; returns (p-values, labels, n_skipped) for scored rows."""
    ps, labels, skipped = [], [], 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "p_value" not in reader.fieldnames:
            raise DataError(f"{path}: not a score file (no p_value column)")
        for lineno, row in enumerate(reader, start=2):
            if row["p_value"] == "":
                skipped += 1
                continue
            try:
                ps.append(float(row["p_value"]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad p_value {row['p_value']!r}") from None
            labels.append(row.get("label") or None)
    return ps, labels, skipped
