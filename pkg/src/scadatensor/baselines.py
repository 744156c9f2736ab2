"""Matrix baselines: KL-NMF with Poisson p-values, and PCA reconstruction error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from scadatensor.artifacts import read_document, write_document
from scadatensor.cpapr import DEFAULT_FUSION
from scadatensor.errors import ConfigError, DataError, SolverError
from scadatensor.ingest import (
    TIME_MODE,
    DimensionEncoder,
    MessageRecord,
    TimeBinning,
    delta_times_in_order,
    get_schema,
)
from scadatensor.scoring import ScoredMessage, score_batch, score_message
from scadatensor.sparse_tensor import SparseTensorCOO

# default ranks for the two matrices
DEFAULT_NMF_RANKS = {"IP": 24, "IC": 14}


# ---------------------------------------------------------------------------
# KL-NMF


@dataclass(frozen=True)
class NmfOptions:
    max_iters: int = 500
    tol: float = 1e-7  # relative objective decrease that counts as converged
    eps: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0 or self.eps <= 0 or self.seed < 0:
            raise ConfigError("invalid NmfOptions")


@dataclass(frozen=True, eq=False)
class NmfFit:
    W: np.ndarray
    H: np.ndarray
    objectives: list = field(default_factory=list)

    def product(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return (self.W[rows] * self.H[:, cols].T).sum(axis=1)


def kl_nmf(matrix: SparseTensorCOO, rank: int, options: NmfOptions | None = None) -> NmfFit:
    """Lee-Seung multiplicative updates for ``min sum(WH) - sum(X log WH)``.

    Only the stored entries of ``X`` are touched; the dense term reduces to
    ``colsum(W) . rowsum(H)``.
    """
    options = options or NmfOptions()
    if matrix.ndim != 2:
        raise DataError(f"NMF needs a 2-way tensor, got order {matrix.ndim}")
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    if matrix.nnz == 0:
        raise DataError("cannot factor an empty matrix")
    n, m = matrix.shape
    rows, cols = matrix.coords[:, 0], matrix.coords[:, 1]
    x = matrix.values
    rng = np.random.default_rng(options.seed)
    W = rng.uniform(0.0, 1.0, size=(n, rank))
    H = rng.uniform(0.0, 1.0, size=(rank, m))

    def objective(W, H):
        v = (W[rows] * H[:, cols].T).sum(axis=1)
        with np.errstate(divide="ignore"):
            return float(W.sum(axis=0) @ H.sum(axis=1) - x @ np.log(v))

    objs = [objective(W, H)]
    for _ in range(options.max_iters):
        v = (W[rows] * H[:, cols].T).sum(axis=1)
        Q = sp.csr_matrix((x / np.maximum(v, options.eps), (rows, cols)), shape=(n, m))
        H = H * (Q.T @ W).T / np.maximum(W.sum(axis=0), options.eps)[:, None]
        v = (W[rows] * H[:, cols].T).sum(axis=1)
        Q = sp.csr_matrix((x / np.maximum(v, options.eps), (rows, cols)), shape=(n, m))
        W = W * (Q @ H.T) / np.maximum(H.sum(axis=1), options.eps)[None, :]
        objs.append(objective(W, H))
        if not np.isfinite(objs[-1]):
            raise SolverError("NMF objective became non-finite")
        if objs[-2] - objs[-1] <= options.tol * abs(objs[-2]):
            break
    return NmfFit(W, H, objs)


@dataclass(frozen=True, eq=False)
class NmfModel:
    """Rank-K factors fused with a rank-1 companion, like the tensor models."""

    W: np.ndarray
    H: np.ndarray
    w1: np.ndarray  # (n, 1)
    h1: np.ndarray  # (1, m)
    fusion: tuple[float, float] = DEFAULT_FUSION

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.W.shape[0], self.H.shape[1])

    def rates(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
        r, c = indices[:, 0], indices[:, 1]
        low = (self.w1[r] * self.h1[:, c].T).sum(axis=1)
        high = (self.W[r] * self.H[:, c].T).sum(axis=1)
        return self.fusion[0] * low + self.fusion[1] * high

    def dense_rates(self) -> np.ndarray:
        return self.fusion[0] * (self.w1 @ self.h1) + self.fusion[1] * (self.W @ self.H)

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "H": self.H.tolist(), "w1": self.w1.tolist(),
                "h1": self.h1.tolist(), "fusion": list(self.fusion)}

    @classmethod
    def from_dict(cls, d) -> "NmfModel":
        return cls(np.array(d["W"], dtype=float), np.array(d["H"], dtype=float),
                   np.array(d["w1"], dtype=float), np.array(d["h1"], dtype=float),
                   tuple(d["fusion"]))


def nmf_fit(matrix: SparseTensorCOO, rank: int, options: NmfOptions | None = None,
            fusion: tuple[float, float] = DEFAULT_FUSION) -> NmfModel:
    options = options or NmfOptions()
    main = kl_nmf(matrix, rank, options)
    one = kl_nmf(matrix, 1, options)
    if one.W.min() <= 0 or one.H.min() <= 0:
        raise SolverError("rank-1 NMF companion has a zero factor; every row and "
                          "column of the matrix needs a nonzero")
    return NmfModel(main.W, main.H, one.W, one.H, tuple(fusion))


@dataclass(frozen=True, eq=False)
class NmfDetector:
    schema: object
    encoders: dict
    model: NmfModel
    binning: None = None

    def rates(self, indices):
        return self.model.rates(indices)

    def save(self, path) -> None:
        write_document(path, "model", {
            "kind": "nmf", "schema": self.schema.name, "rank": self.model.rank,
            "encoders": {m: e.to_dict() for m, e in self.encoders.items()},
            "model": self.model.to_dict()})

    @classmethod
    def load(cls, path) -> "NmfDetector":
        doc = read_document(path, "model")
        if doc.get("kind") != "nmf":
            raise ConfigError(f"{path}: not an NMF model (kind={doc.get('kind')!r})")
        return cls(get_schema(doc["schema"]),
                   {m: DimensionEncoder.from_dict(e) for m, e in doc["encoders"].items()},
                   NmfModel.from_dict(doc["model"]))


def train_nmf(build, rank: int | None = None, options: NmfOptions | None = None) -> NmfDetector:
    """Fit NMF on a two-way build (schema IP or IC)."""
    rank = rank or DEFAULT_NMF_RANKS.get(build.schema.name, 10)
    return NmfDetector(build.schema, build.encoders, nmf_fit(build.tensor, rank, options))


def _nmf_schema_for(encoders) -> object:
    modes = set(encoders)
    for name in ("IP", "IC"):
        if set(get_schema(name).modes) == modes:
            return get_schema(name)
    raise ConfigError(f"no matrix schema for encoder modes {sorted(modes)}")


def nmf_score(model: NmfModel, encoders: dict, record: MessageRecord) -> ScoredMessage:
    return score_message(NmfDetector(_nmf_schema_for(encoders), encoders, model), record)


def nmf_score_batch(detector: NmfDetector, records) -> list[ScoredMessage]:
    return score_batch(detector, records)


# ---------------------------------------------------------------------------
# PCA

PCA_MODES = ("rtu", "points", "channel", TIME_MODE)


def _feature_offsets(encoders, binning) -> list[int]:
    sizes = [binning.n_bins if m == TIME_MODE else len(encoders[m]) for m in PCA_MODES]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int).tolist()


def one_hot_features(records: Sequence[MessageRecord], encoders, binning,
                     deltas: Sequence[int | None] | None = None):
    """One-hot blocks in the order rtu, points, channel, dt-bin.

    Tokens unseen in training leave their block all zero. Returns the feature
    matrix and a mask of rows that have an inter-arrival time.
    """
    if deltas is None:
        deltas = delta_times_in_order(records)
    offsets = _feature_offsets(encoders, binning)
    X = np.zeros((len(records), offsets[-1]))
    has_dt = np.array([d is not None for d in deltas], dtype=bool)
    for i, r in enumerate(records):
        for b, m in enumerate(PCA_MODES):
            if m == TIME_MODE:
                if deltas[i] is not None:
                    X[i, offsets[b] + binning.assign(deltas[i])] = 1.0
                continue
            code = encoders[m].encode(r.field_value(m))
            if code is not None:
                X[i, offsets[b] + code] = 1.0
    return X, has_dt


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, F), orthonormal rows
    encoders: dict
    binning: TimeBinning
    explained: float = 1.0

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def residuals(self, X: np.ndarray) -> np.ndarray:
        Z = X - self.mean
        proj = Z @ self.components.T
        return np.maximum((Z * Z).sum(axis=1) - (proj * proj).sum(axis=1), 0.0)

    def save(self, path) -> None:
        write_document(path, "model", {
            "kind": "pca", "k": self.k, "explained": self.explained,
            "mean": self.mean.tolist(), "components": self.components.tolist(),
            "encoders": {m: e.to_dict() for m, e in self.encoders.items()},
            "binning": self.binning.to_dict()})

    @classmethod
    def load(cls, path) -> "PcaModel":
        doc = read_document(path, "model")
        if doc.get("kind") != "pca":
            raise ConfigError(f"{path}: not a PCA model (kind={doc.get('kind')!r})")
        return cls(np.array(doc["mean"], dtype=float),
                   np.array(doc["components"], dtype=float).reshape(doc["k"], -1),
                   {m: DimensionEncoder.from_dict(e) for m, e in doc["encoders"].items()},
                   TimeBinning.from_dict(doc["binning"]), float(doc["explained"]))


def pca_fit_matrix(X: np.ndarray, variance_target: float = 0.95):
    """Mean, top-k principal directions, and explained fraction for rows of X."""
    if not 0 < variance_target <= 1:
        raise ConfigError("variance_target must be in (0, 1]")
    if X.shape[0] < 2:
        raise DataError("PCA needs at least two training rows")
    mean = X.mean(axis=0)
    Z = X - mean
    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    tol = s[0] * max(Z.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int((s > tol).sum())
    if rank == 0:
        raise DataError("PCA training features are all identical")
    var = s[:rank] ** 2
    frac = np.cumsum(var) / var.sum()
    k = min(int(np.searchsorted(frac, variance_target - 1e-12)) + 1, rank)
    V = Vt[:k].copy()
    # fix the sign ambiguity: largest-magnitude entry of each component positive
    pivots = np.argmax(np.abs(V), axis=1)
    V *= np.sign(V[np.arange(k), pivots])[:, None]
    return mean, V, float(frac[k - 1])


def pca_fit(records: Sequence[MessageRecord], encoders: dict, binning: TimeBinning,
            variance_target: float = 0.95) -> PcaModel:
    """PCA over one-hot (rtu, points, channel, dt-bin) vectors of training records.

    Records without an inter-arrival time (first per RTU) are left out.
    """
    missing = [m for m in PCA_MODES if m != TIME_MODE and m not in encoders]
    if missing:
        raise ConfigError(f"PCA needs encoders for {missing}")
    X, has_dt = one_hot_features(records, encoders, binning)
    mean, V, explained = pca_fit_matrix(X[has_dt], variance_target)
    return PcaModel(mean, V, {m: encoders[m] for m in PCA_MODES if m != TIME_MODE},
                    binning, explained)


def pseudo_p(score):
    return 1.0 / (1.0 + score)


def pca_score_batch(model: PcaModel, records: Sequence[MessageRecord],
                    deltas: Sequence[int | None] | None = None) -> list[ScoredMessage]:
    """Residual outside the component subspace, reported as ``1 / (1 + residual)``.

    Records without an inter-arrival time are skipped unless one of their
    tokens is unseen; those are scored with an empty time block.
    """
    if not records:
        return []
    X, has_dt = one_hot_features(records, model.encoders, model.binning, deltas)
    res = model.residuals(X)
    out = []
    for i, r in enumerate(records):
        # as with the tensor encoders, an unseen token outranks a missing time
        if not has_dt[i] and all(model.encoders[m].encode(r.field_value(m)) is not None
                                 for m in PCA_MODES if m != TIME_MODE):
            out.append(ScoredMessage(i, r, "skipped"))
        else:
            out.append(ScoredMessage(i, r, "ok", None, float(res[i]), pseudo_p(float(res[i]))))
    return out


def pca_score(model: PcaModel, record: MessageRecord, delta_ms: int | None) -> float:
    """Residual score of one record (higher is more anomalous)."""
    (s,) = pca_score_batch(model, [record], [delta_ms])
    if s.status == "skipped":
        raise DataError("PCA scoring needs the record's inter-arrival time")
    return s.rate
