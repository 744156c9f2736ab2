"""Sparse non-negative count tensors in coordinate (COO) format."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from scadatensor.errors import DataError

__all__ = [
    "SparseTensorCOO",
    "from_entries",
    "inflate_binary",
    "inflation_factor",
    "lookup",
]


@dataclass(frozen=True, eq=False)
class SparseTensorCOO:
    """Immutable sparse tensor.

    ``coords`` is an ``(nnz, D)`` integer array kept in lexicographic order and
    ``values`` the matching strictly positive entries. Zeros are never stored.
    Build instances with :meth:`from_entries` or :meth:`from_arrays`; the raw
    constructor assumes the invariants already hold.
    """

    shape: tuple[int, ...]
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.coords.setflags(write=False)
        self.values.setflags(write=False)

    # construction ---------------------------------------------------------

    @classmethod
    def from_entries(
        cls,
        entries: Iterable[tuple[Sequence[int], float]],
        shape: Sequence[int],
    ) -> "SparseTensorCOO":
        entries = list(entries)
        ndim = len(shape)
        if entries:
            coords = np.array([tuple(idx) for idx, _ in entries], dtype=np.int64)
            if coords.ndim != 2 or coords.shape[1] != ndim:
                raise DataError(f"every index must have {ndim} components")
            values = np.array([float(v) for _, v in entries], dtype=float)
        else:
            coords = np.zeros((0, ndim), dtype=np.int64)
            values = np.zeros(0, dtype=float)
        return cls.from_arrays(coords, values, shape)

    @classmethod
    def from_arrays(
        cls, coords: np.ndarray, values: np.ndarray, shape: Sequence[int]
    ) -> "SparseTensorCOO":
        """Validate, merge duplicate coordinates by summation, drop zeros, sort."""
        shape = tuple(int(n) for n in shape)
        if len(shape) < 2:
            raise DataError(f"tensor order must be >= 2, got {len(shape)}")
        if any(n < 1 for n in shape):
            raise DataError(f"dimension sizes must be positive, got {shape}")
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(shape))
        values = np.asarray(values, dtype=float).reshape(-1)
        if len(coords) != len(values):
            raise DataError("coords and values differ in length")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise DataError("tensor values must be finite and non-negative")
        for mode, size in enumerate(shape):
            col = coords[:, mode]
            bad = (col < 0) | (col >= size)
            if np.any(bad):
                v = int(col[np.argmax(bad)])
                raise DataError(
                    f"index {v} out of bounds in mode {mode} (size {size})"
                )
        if len(coords):
            uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
            summed = np.bincount(inverse.reshape(-1), weights=values,
                                 minlength=len(uniq))
            keep = summed > 0
            coords, values = uniq[keep], summed[keep]
        return cls(shape, np.ascontiguousarray(coords), values.astype(float))

    # queries --------------------------------------------------------------

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def density(self) -> float:
        return self.nnz / self.size

    def total(self) -> float:
        return float(self.values.sum())

    def is_binary(self) -> bool:
        return bool(np.all(self.values == 1.0))

    def check_index(self, index: Sequence[int]) -> tuple[int, ...]:
        index = tuple(int(i) for i in index)
        if len(index) != self.ndim:
            raise DataError(f"expected a {self.ndim}-index, got {index}")
        for mode, (i, n) in enumerate(zip(index, self.shape)):
            if not 0 <= i < n:
                raise DataError(f"index {i} out of bounds in mode {mode} (size {n})")
        return index

    def lookup(self, index: Sequence[int]) -> float:
        index = self.check_index(index)
        pos = self._position(index)
        return float(self.values[pos]) if pos is not None else 0.0

    @cached_property
    def linear_keys(self) -> np.ndarray:
        # sorted because coords are lexicographic
        if not self.nnz:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(self.coords.T), self.shape)

    def _position(self, index: tuple[int, ...]) -> int | None:
        key = self.linear_keys
        if not self.nnz:
            return None
        target = np.ravel_multi_index(index, self.shape)
        pos = int(np.searchsorted(key, target))
        if pos < self.nnz and key[pos] == target:
            return pos
        return None

    def slice_sums(self, mode: int) -> np.ndarray:
        return np.bincount(self.coords[:, mode], weights=self.values,
                           minlength=self.shape[mode])

    def to_dense(self) -> np.ndarray:
        """Dense copy; meant for small tensors in tests and diagnostics."""
        out = np.zeros(self.shape)
        if self.nnz:
            out[tuple(self.coords.T)] = self.values
        return out

    def scaled(self, factor: float) -> "SparseTensorCOO":
        if factor <= 0:
            raise DataError("scale factor must be positive")
        return SparseTensorCOO(self.shape, self.coords.copy(), self.values * factor)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensorCOO):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        dims = "x".join(str(n) for n in self.shape)
        return f"SparseTensorCOO({dims}, nnz={self.nnz})"

    # serialization --------------------------------------------------------

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write("shape=" + ",".join(str(n) for n in self.shape) + "\n")
        for idx, v in zip(self.coords.tolist(), self.values.tolist()):
            buf.write(",".join(str(i) for i in idx) + "," + repr(v) + "\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "SparseTensorCOO":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("shape="):
            raise DataError("tensor file must start with a 'shape=' header")
        try:
            shape = tuple(int(s) for s in lines[0][len("shape="):].split(","))
        except ValueError as exc:
            raise DataError(f"bad shape header: {lines[0]!r}") from exc
        coords, values = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != len(shape) + 1:
                raise DataError(f"line {lineno}: expected {len(shape) + 1} fields")
            try:
                coords.append([int(p) for p in parts[:-1]])
                values.append(float(parts[-1]))
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
        tensor = cls.from_arrays(
            np.array(coords, dtype=np.int64).reshape(-1, len(shape)),
            np.array(values, dtype=float), shape)
        if tensor.nnz != len(values):
            raise DataError("tensor file has duplicate or zero entries")
        return tensor

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "SparseTensorCOO":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def from_entries(entries, shape) -> SparseTensorCOO:
    return SparseTensorCOO.from_entries(entries, shape)


def lookup(tensor: SparseTensorCOO, index: Sequence[int]) -> float:
    return tensor.lookup(index)


def inflation_factor(tensor: SparseTensorCOO) -> int:
    """Integer round (half up) of ``cells / nnz``."""
    if tensor.nnz == 0:
        raise DataError("cannot inflate an empty tensor")
    return max(1, math.floor(tensor.size / tensor.nnz + 0.5))


def inflate_binary(tensor: SparseTensorCOO) -> SparseTensorCOO:
    """Scale a binary tensor so its mean over all cells is close to one.

    Every stored 1 becomes ``c = round(cells / nnz)``; the support is unchanged.
    """
    if tensor.nnz == 0:
        raise DataError("cannot inflate an empty tensor")
    if not tensor.is_binary():
        raise DataError("inflate_binary expects a binary tensor (all stored values 1)")
    return tensor.scaled(float(inflation_factor(tensor)))
