"""A fitted tensor detector: schema + encoders + binning + smoothed CP model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from scadatensor.artifacts import read_document, write_document
from scadatensor.cpapr import DEFAULT_FUSION, FitOptions, SmoothedModel, fit_smoothed
from scadatensor.errors import ConfigError
from scadatensor.evaluation import SweepResult, rank_sweep
from scadatensor.ingest import (
    OK,
    OOV,
    DimensionEncoder,
    TensorBuild,
    TimeBinning,
    encode_records,
    get_schema,
)

# used when no rank sweep is run
DEFAULT_RANKS = {"IPT": 5, "IPCT": 5, "IPC": 47}


@dataclass(frozen=True, eq=False)
class DetectorModel:
    schema: object
    encoders: dict
    binning: TimeBinning | None
    model: SmoothedModel
    objective: float = float("nan")
    inflation: int = 1
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = tuple(self.binning.n_bins if m == "dt" else len(self.encoders[m])
                      for m in self.schema.modes)
        if shape != self.model.shape:
            raise ConfigError(
                f"model shape {self.model.shape} does not match encoders {shape}")

    @property
    def rank(self) -> int:
        return self.model.rank

    @property
    def shape(self) -> tuple[int, ...]:
        return self.model.shape

    def rates(self, indices: np.ndarray) -> np.ndarray:
        return self.model.rates(indices)

    def to_dict(self) -> dict:
        return {
            "kind": "cp_apr",
            "schema": self.schema.name,
            "shape": list(self.shape),
            "rank": self.rank,
            "objective": self.objective,
            "inflation": self.inflation,
            "options": self.options,
            "encoders": {m: e.to_dict() for m, e in self.encoders.items()},
            "binning": self.binning.to_dict() if self.binning else None,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorModel":
        schema = get_schema(d["schema"])
        model = SmoothedModel.from_dict(d["model"])
        if list(model.shape) != list(d["shape"]):
            raise ConfigError("stored shape does not match stored factors")
        return cls(
            schema=schema,
            encoders={m: DimensionEncoder.from_dict(e) for m, e in d["encoders"].items()},
            binning=TimeBinning.from_dict(d["binning"]) if d.get("binning") else None,
            model=model,
            objective=float(d.get("objective", float("nan"))),
            inflation=int(d.get("inflation", 1)),
            options=dict(d.get("options", {})),
        )

    def save(self, path) -> None:
        write_document(path, "model", self.to_dict())

    @classmethod
    def load(cls, path) -> "DetectorModel":
        doc = read_document(path, "model")
        if doc.get("kind") != "cp_apr":
            raise ConfigError(f"{path}: not a tensor model (kind={doc.get('kind')!r})")
        return cls.from_dict(doc)


def train_detector(build: TensorBuild, rank: int, options: FitOptions | None = None,
                   fusion: tuple[float, float] = DEFAULT_FUSION) -> DetectorModel:
    """Fit rank-1 and rank-R models on a built tensor and fuse them."""
    options = options or FitOptions()
    smoothed, result = fit_smoothed(build.tensor, rank, options, fusion)
    return DetectorModel(
        schema=build.schema,
        encoders=build.encoders,
        binning=build.binning,
        model=smoothed,
        objective=result.objective,
        inflation=build.inflation,
        options=asdict(options),
    )


def sweep_detector(build: TensorBuild, validation, ranks, options: FitOptions | None = None,
                   fusion: tuple[float, float] = DEFAULT_FUSION) -> SweepResult:
    """Rank sweep on labeled validation records encoded with ``build``'s encoders.

    Out-of-vocabulary records count as p = 0; records without an inter-arrival
    time under a time-bearing schema are left out.
    """
    if any(r.label is None for r in validation):
        raise ConfigError("every validation record needs a label")
    batch = encode_records(validation, build.schema, build.encoders, build.binning)
    pairs = []
    for i, r in enumerate(validation):
        if batch.status[i] == OK:
            pairs.append((tuple(batch.indices[i]), r.label))
        elif batch.status[i] == OOV:
            pairs.append((None, r.label))
    return rank_sweep(build.tensor, pairs, ranks, options, fusion)
