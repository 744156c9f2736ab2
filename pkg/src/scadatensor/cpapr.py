"""Poisson CP decomposition fit by alternating multiplicative updates.

The model of a D-way count tensor is a rank-R Kruskal tensor::

    rate[i_1, ..., i_D] = sum_r weights[r] * prod_d factors[d][i_d, r]

fit by minimizing ``f = sum(rate) - sum(x * log(rate))`` over the stored
entries. Each outer iteration sweeps the modes; for mode ``n`` the weights are
folded into ``B = factors[n] * weights`` and ``B <- B * Phi`` is applied for a
few inner iterations, where ``Phi = (X_(n) / max(B Pi^T, eps)) Pi`` and ``Pi``
is the Khatri-Rao product of the other factors restricted to the nonzeros.
Columns are then renormalized into the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from scadatensor.errors import ConfigError, DataError, SolverError
from scadatensor.sparse_tensor import SparseTensorCOO

__all__ = [
    "FitOptions",
    "FitResult",
    "KruskalModel",
    "SmoothedModel",
    "fit",
    "fit_detailed",
    "fit_smoothed",
    "fuse",
    "reconstruct_lambda",
    "sparse_objective",
]

DEFAULT_FUSION = (0.1, 0.9)


@dataclass(frozen=True, eq=False)
class KruskalModel:
    """Non-negative weights (R,) and one (N_d, R) factor matrix per mode."""

    weights: np.ndarray
    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        fs = tuple(np.asarray(f, dtype=float) for f in self.factors)
        if w.ndim != 1 or w.size < 1:
            raise DataError("weights must be a non-empty vector")
        if len(fs) < 2:
            raise DataError("a Kruskal model needs at least two factor matrices")
        for d, f in enumerate(fs):
            if f.ndim != 2 or f.shape[1] != w.size:
                raise DataError(f"factor {d} must have {w.size} columns")
            if np.any(f < 0) or not np.all(np.isfinite(f)):
                raise DataError(f"factor {d} has negative or non-finite entries")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and non-negative")
        for a in (w, *fs):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "factors", fs)

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ndim(self) -> int:
        return len(self.factors)

    def rates(self, indices: np.ndarray) -> np.ndarray:
        """Reconstructed rates for an ``(n, D)`` integer index array."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, self.ndim)
        prod = np.ones((len(indices), self.rank))
        for d, f in enumerate(self.factors):
            prod *= f[indices[:, d]]
        return (prod * self.weights).sum(axis=1)

    def total_rate(self) -> float:
        """Sum of the rate over every cell of the tensor."""
        colsums = np.prod([f.sum(axis=0) for f in self.factors], axis=0)
        return float(self.weights @ colsums)

    def full(self) -> np.ndarray:
        """Dense reconstruction; only sensible for small shapes."""
        idx = np.indices(self.shape).reshape(self.ndim, -1).T
        return self.rates(idx).reshape(self.shape)

    def check_index(self, index: Sequence[int]) -> tuple[int, ...]:
        index = tuple(int(i) for i in index)
        if len(index) != self.ndim:
            raise DataError(f"expected a {self.ndim}-index, got {index}")
        for d, (i, n) in enumerate(zip(index, self.shape)):
            if not 0 <= i < n:
                raise DataError(f"index {i} out of bounds in mode {d} (size {n})")
        return index

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(),
                "factors": [f.tolist() for f in self.factors]}

    @classmethod
    def from_dict(cls, d) -> "KruskalModel":
        return cls(np.array(d["weights"], dtype=float),
                   tuple(np.array(f, dtype=float) for f in d["factors"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, KruskalModel):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights)
                and len(self.factors) == len(other.factors)
                and all(np.array_equal(a, b) for a, b in zip(self.factors, other.factors)))


def reconstruct_lambda(model: KruskalModel | "SmoothedModel", index: Sequence[int]) -> float:
    index = model.check_index(index)
    return float(model.rates(np.array([index]))[0])


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 200
    inner_iters: int = 10
    tol: float = 1e-4
    kappa: float = 1e-2
    kappa_tol: float = 1e-10
    eps: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        for name in ("max_iters", "inner_iters", "tol", "kappa", "kappa_tol", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"FitOptions.{name} must be positive")
        if self.seed < 0:
            raise ConfigError("FitOptions.seed must be non-negative")


@dataclass
class FitResult:
    model: KruskalModel
    # objectives[0] is the starting point, then one value per outer iteration
    objectives: list[float] = field(default_factory=list)
    kkt: list[float] = field(default_factory=list)
    n_iters: int = 0
    converged: bool = False
    n_kappa_shifts: int = 0

    @property
    def objective(self) -> float:
        return self.objectives[-1]


def sparse_objective(tensor: SparseTensorCOO, model: KruskalModel) -> float:
    """``sum(rate over all cells) - sum(x log rate)``, touching only stored entries."""
    rates = model.rates(tensor.coords)
    with np.errstate(divide="ignore"):
        loglik = float(tensor.values @ np.log(rates))
    return model.total_rate() - loglik


def _normalize(B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = B.sum(axis=0)
    A = np.empty_like(B)
    live = w > 0
    A[:, live] = B[:, live] / w[live]
    # dead components keep a uniform column and zero weight
    A[:, ~live] = 1.0 / B.shape[0]
    return A, w


def _initial_factors(shape, rank: int, seed: int):
    rng = np.random.default_rng(seed)
    factors = [rng.uniform(0.0, 1.0, size=(n, rank)) for n in shape]
    weights = np.ones(rank)
    normed = []
    for f in factors:
        a, w = _normalize(f)
        normed.append(a)
        weights = weights * w
    return normed, weights


def _mode_objective(B, Pi, rows, x) -> float:
    # other modes are column-normalized, so the dense term is just sum(B)
    v = np.einsum("ij,ij->i", B[rows], Pi)
    with np.errstate(divide="ignore"):
        return float(B.sum() - x @ np.log(v))


def _shift_inadmissible_zeros(B, A_n, weights, Pi, rows, x, select_n, options):
    """Lift entries stuck at zero whose gradient says they should grow.

    Multiplicative updates can never move an exact zero, so such entries get a
    ``kappa`` offset. The offset is halved until the mode objective does not
    increase; the directional derivative is negative, so this terminates.
    """
    v = np.einsum("ij,ij->i", B[rows], Pi)
    phi = select_n @ ((x / np.maximum(v, options.eps))[:, None] * Pi)
    stuck = (phi > 1.0) & (A_n < options.kappa_tol)
    if not stuck.any():
        return B, 0
    base = _mode_objective(B, Pi, rows, x)
    step = options.kappa * np.broadcast_to(weights, B.shape) * stuck
    for _ in range(40):
        trial = B + step
        if _mode_objective(trial, Pi, rows, x) <= base:
            return trial, int(stuck.sum())
        step = step / 2
    return B, 0


def fit_detailed(
    tensor: SparseTensorCOO, rank: int, options: FitOptions | None = None
) -> FitResult:
    """Fit a rank-``rank`` Poisson CP model and keep the per-iteration trace."""
    options = options or FitOptions()
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    if tensor.nnz == 0:
        raise DataError("cannot fit an empty tensor")
    D, shape, R = tensor.ndim, tensor.shape, int(rank)
    subs, x = tensor.coords, tensor.values
    nnz = tensor.nnz

    # row-selection matrices: (S_n @ Y)[i] = sum of Y rows whose mode-n index is i
    select = [sp.csr_matrix((np.ones(nnz), (subs[:, n], np.arange(nnz))),
                            shape=(shape[n], nnz)) for n in range(D)]

    A, weights = _initial_factors(shape, R, options.seed)
    phi = [np.zeros((n, R)) for n in shape]
    result = FitResult(model=None)
    result.objectives.append(
        sparse_objective(tensor, KruskalModel(weights.copy(), tuple(a.copy() for a in A))))

    for it in range(options.max_iters):
        converged = True
        kkt_modes = np.zeros(D)
        for n in range(D):
            B = A[n] * weights
            Pi = np.ones((nnz, R))
            for m in range(D):
                if m != n:
                    Pi *= A[m][subs[:, m]]
            rows = subs[:, n]
            if it > 0:
                B, shifted = _shift_inadmissible_zeros(B, A[n], weights, Pi, rows, x,
                                                       select[n], options)
                result.n_kappa_shifts += shifted
            for _ in range(options.inner_iters):
                v = np.einsum("ij,ij->i", B[rows], Pi)
                ratio = x / np.maximum(v, options.eps)
                phi[n] = select[n] @ (ratio[:, None] * Pi)
                kkt_modes[n] = np.max(np.abs(np.minimum(B, 1.0 - phi[n])))
                if kkt_modes[n] < options.tol:
                    break
                converged = False
                B = B * phi[n]
            A[n], weights = _normalize(B)

        model = KruskalModel(weights.copy(), tuple(a.copy() for a in A))
        obj = sparse_objective(tensor, model)
        if not math.isfinite(obj):
            raise SolverError(f"objective became non-finite at iteration {it}")
        result.objectives.append(obj)
        result.kkt.append(float(kkt_modes.max()))
        result.n_iters = it + 1
        result.model = model
        if converged:
            result.converged = True
            break
    return result


def fit(tensor: SparseTensorCOO, rank: int, options: FitOptions | None = None) -> KruskalModel:
    return fit_detailed(tensor, rank, options).model


@dataclass(frozen=True, eq=False)
class SmoothedModel:
    """Convex mix of a rank-1 and a rank-R model; every rate is strictly positive."""

    rank1: KruskalModel
    rankR: KruskalModel
    w1: float = DEFAULT_FUSION[0]
    wR: float = DEFAULT_FUSION[1]

    def __post_init__(self):
        if not (self.w1 > 0 and self.wR > 0):
            raise ConfigError(f"fusion weights must both be positive, got ({self.w1}, {self.wR})")
        if abs(self.w1 + self.wR - 1.0) > 1e-12:
            raise ConfigError(f"fusion weights must sum to 1, got ({self.w1}, {self.wR})")
        if self.rank1.shape != self.rankR.shape:
            raise DataError(
                f"shape mismatch: rank-1 {self.rank1.shape} vs rank-R {self.rankR.shape}")
        if self.rank1.rank != 1:
            raise DataError(f"first model must have rank 1, got {self.rank1.rank}")
        if self.rank1.weights[0] <= 0 or any(f.min() <= 0 for f in self.rank1.factors):
            raise SolverError(
                "rank-1 model has a zero rate somewhere; smoothing needs every "
                "slice of the training tensor to contain a nonzero")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.rankR.shape

    @property
    def ndim(self) -> int:
        return self.rankR.ndim

    @property
    def rank(self) -> int:
        return self.rankR.rank

    def rates(self, indices: np.ndarray) -> np.ndarray:
        return self.w1 * self.rank1.rates(indices) + self.wR * self.rankR.rates(indices)

    def check_index(self, index):
        return self.rankR.check_index(index)

    def to_dict(self) -> dict:
        return {"rank1": self.rank1.to_dict(), "rankR": self.rankR.to_dict(),
                "w1": self.w1, "wR": self.wR}

    @classmethod
    def from_dict(cls, d) -> "SmoothedModel":
        return cls(KruskalModel.from_dict(d["rank1"]), KruskalModel.from_dict(d["rankR"]),
                   float(d["w1"]), float(d["wR"]))


def fuse(rank1: KruskalModel, rankR: KruskalModel,
         w1: float = DEFAULT_FUSION[0], wR: float = DEFAULT_FUSION[1]) -> SmoothedModel:
    return SmoothedModel(rank1, rankR, w1, wR)


def fit_smoothed(
    tensor: SparseTensorCOO,
    rank: int,
    options: FitOptions | None = None,
    fusion: tuple[float, float] = DEFAULT_FUSION,
) -> tuple[SmoothedModel, FitResult]:
    """Fit rank-1 and rank-``rank`` models and fuse them."""
    r1 = fit_detailed(tensor, 1, options)
    rR = fit_detailed(tensor, rank, options) if rank > 1 else r1
    return fuse(r1.model, rR.model, *fusion), rR
