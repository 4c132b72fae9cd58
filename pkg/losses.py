"""Main loss (-log_prob + physics penalty), multi-task composition and the physics penalty interface."""
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

import diffcore as dc
from diffcore import DenseArray
from errors import ContractError, DataError, DimensionError
from selfsup import selfsup_loss

RELATIONS_FILE_MAGIC = "# faultflow linear relations"


class LossConfig(BaseModel):
    """Weights of the loss terms; a zero weight disables its term entirely."""

    model_config = ConfigDict(extra="forbid")

    physics_weight: float = Field(1.0, ge=0, allow_inf_nan=False)
    selfsup_weight: float = Field(1.0, ge=0, allow_inf_nan=False)
    physics_samples: int = Field(32, ge=1)


class RelationSet:
    """Linear sensor relations A @ x_t = b that hold for nominal telemetry."""

    def __init__(self, sensors: Sequence[str], A, b):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if A.shape[1] != len(sensors) or A.shape[0] != b.shape[0]:
            raise DimensionError(f"relations: A {A.shape} and b {b.shape} do not fit {len(sensors)} sensors")
        self.sensors = list(sensors)
        self.A = A
        self.b = b

    def __len__(self):
        return self.A.shape[0]

    def rescaled(self, scaler) -> "RelationSet":
        """Express the relations in min-max scaled units: x_raw = lo + (hi - lo) * x_scaled."""
        lo, hi = scaler.data_min, scaler.data_max
        return RelationSet(self.sensors, self.A * (hi - lo), self.b - self.A @ lo)

    def normalized(self) -> "RelationSet":
        """Scale each row to a unit-norm coefficient vector; all-zero rows are kept as they are."""
        norms = np.linalg.norm(self.A, axis=1)
        norms[norms == 0] = 1.0
        return RelationSet(self.sensors, self.A / norms[:, None], self.b / norms)

    def residuals(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) @ self.A.T - self.b


def write_relations(path, relations: RelationSet):
    """One relation per line: coefficients in sensor order, then the offset."""
    lines = [RELATIONS_FILE_MAGIC, ",".join(relations.sensors + ["offset"])]
    for coefficients, offset in zip(relations.A.tolist(), relations.b.tolist()):
        lines.append(",".join(repr(float(v)) for v in coefficients + [offset]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_relations(path) -> RelationSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: relations file not found")
    with open(path, "r") as f:
        first = f.readline().rstrip("\r\n")
    if first != RELATIONS_FILE_MAGIC:
        raise DataError(f"{path}: not a relations file (line 1)")
    try:
        frame = pd.read_csv(path, skiprows=1, dtype=str, keep_default_na=False, index_col=False)
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: line 2: missing header") from e
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: ragged row: {e}") from e
    header = list(frame.columns)
    if header[-1] != "offset":
        raise DataError(f"{path}: line 2: last column must be 'offset'")
    # short rows are padded with NaN by the parser
    counts = frame.notna().sum(axis=1).to_numpy()
    short = np.flatnonzero(counts < len(header))
    if short.size:
        row = int(short[0])
        raise DataError(f"{path}: line {row + 3}: expected {len(header)} values, got {counts[row]}")
    cells = frame.to_numpy(dtype=object)
    try:
        table = cells.astype(np.float64).reshape(-1, len(header))
    except ValueError:
        for row, col in np.ndindex(cells.shape):
            try:
                float(cells[row, col])
            except ValueError:
                raise DataError(f"{path}: line {row + 3}: {header[col]} is not numeric: "
                                f"{cells[row, col]!r}") from None
        raise
    return RelationSet(header[:-1], table[:, :-1], table[:, -1])


def reference_penalty(samples, A, b) -> DenseArray:
    """Mean over samples and timestamps of ||A @ x_t - b||^2.

    `samples` is a (B, L*n) batch of time-major flattened windows.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    samples = dc.as_array(samples)
    n = A.shape[1]
    if samples.values.ndim != 2 or samples.shape[1] % n != 0 or A.shape[0] != b.shape[0]:
        raise DimensionError(f"penalty: samples {samples.shape} cannot be unflattened into rows of {n} sensors "
                             f"(A {A.shape}, b {b.shape})")
    rows = dc.reshape(samples, (-1, n))
    count = rows.shape[0]
    offsets = DenseArray(np.broadcast_to(b, (count, A.shape[0])))
    residual = dc.matmul(rows, DenseArray(A.T)) - offsets
    return dc.sum(dc.square(residual)) * (1.0 / count)


class PhysicsPenalty:
    """Evaluation contract: (model, generated samples in data space) -> non-negative scalar."""

    def __call__(self, model, samples: DenseArray) -> DenseArray:
        raise NotImplementedError


class LinearRelationPenalty(PhysicsPenalty):
    """Squared residual of declared linear sensor relations."""

    def __init__(self, relations: RelationSet):
        self.relations = relations

    def __call__(self, model, samples: DenseArray) -> DenseArray:
        return reference_penalty(samples, self.relations.A, self.relations.b)


def main_loss(model, nominal_batch, penalty: Optional[PhysicsPenalty], cfg: LossConfig,
              rng: Optional[np.random.Generator] = None) -> DenseArray:
    """mean(-log_prob) over nominal windows + physics_weight * penalty on generated samples."""
    batch = dc.as_array(nominal_batch)
    if batch.values.ndim != 2 or batch.shape[0] == 0:
        raise ContractError(f"main_loss: expected a non-empty (B, d) batch, got shape {batch.shape}")
    loss = dc.mean(-model.log_prob(batch))
    if penalty is None or cfg.physics_weight == 0:
        return loss
    if rng is None:
        raise ContractError("main_loss: a generator is required to draw physics samples")
    draws = rng.standard_normal((cfg.physics_samples, model.input_dim))
    generated = model.inverse(draws)
    return loss + penalty(model, generated) * cfg.physics_weight


def multitask_loss(model, head, nominal_batch, permuted_batch, labels,
                   penalty: Optional[PhysicsPenalty], cfg: LossConfig,
                   rng: Optional[np.random.Generator] = None) -> DenseArray:
    """main_loss + selfsup_weight * selfsup_loss."""
    loss = main_loss(model, nominal_batch, penalty, cfg, rng)
    if cfg.selfsup_weight == 0:
        return loss
    return loss + selfsup_loss(model, head, permuted_batch, labels) * cfg.selfsup_weight
