"""Telemetry ingestion, min-max scaling, windowing, split plans and the synthetic EPS generator."""
import math
from fractions import Fraction
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.preprocessing import MinMaxScaler

from config import write_json
from errors import ConfigError, ContractError, DataError, DimensionError
from losses import RelationSet

LABEL_COLUMN = "label"
NOMINAL, FAULT = "nominal", "fault"
ROLES = ("train", "validation", "test")


class TelemetryTable:
    """Rows of sensor readings with a nominal/fault label and the file each row came from."""

    def __init__(self, sensors: Sequence[str], values, faults, sources):
        values = np.asarray(values, dtype=np.float64)
        faults = np.asarray(faults, dtype=bool)
        if values.ndim != 2 or values.shape[1] != len(sensors):
            raise DimensionError(f"telemetry values {values.shape} do not match {len(sensors)} sensors")
        if faults.shape != (values.shape[0],):
            raise DimensionError(f"expected {values.shape[0]} labels, got {faults.shape}")
        if isinstance(sources, str):
            sources = np.full(values.shape[0], sources, dtype=object)
        sources = np.asarray(sources, dtype=object)
        if sources.shape != (values.shape[0],):
            raise DimensionError(f"expected {values.shape[0]} source ids, got {sources.shape}")
        self.sensors = list(sensors)
        self.values = values
        self.faults = faults
        self.sources = sources

    @property
    def n_sensors(self) -> int:
        return len(self.sensors)

    def __len__(self):
        return self.values.shape[0]

    @property
    def source_ids(self) -> List[str]:
        return list(dict.fromkeys(self.sources.tolist()))

    def rows(self, selector) -> "TelemetryTable":
        return TelemetryTable(self.sensors, self.values[selector], self.faults[selector], self.sources[selector])

    def with_values(self, values) -> "TelemetryTable":
        return TelemetryTable(self.sensors, values, self.faults, self.sources)

    def segments(self) -> List[Tuple[int, int]]:
        """Contiguous [start, end) runs of rows sharing one source file."""
        if len(self) == 0:
            return []
        change = np.flatnonzero(self.sources[1:] != self.sources[:-1]) + 1
        bounds = [0, *change.tolist(), len(self)]
        return list(zip(bounds[:-1], bounds[1:]))

    @classmethod
    def concat(cls, tables: Sequence["TelemetryTable"]) -> "TelemetryTable":
        if not tables:
            raise ContractError("cannot concatenate zero telemetry tables")
        sensors = tables[0].sensors
        for table in tables[1:]:
            if table.sensors != sensors:
                raise DataError(f"sensor columns differ between files: {sensors} vs {table.sensors}")
        return cls(sensors,
                   np.concatenate([t.values for t in tables]),
                   np.concatenate([t.faults for t in tables]),
                   np.concatenate([t.sources for t in tables]))


# ===== CSV in/out =====

def ingest_csv(path) -> TelemetryTable:
    """Parse a telemetry CSV: header row, numeric sensor columns and a 'label' column."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, index_col=False)
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: line 1: empty file") from e
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: ragged row: {e}") from e
    if LABEL_COLUMN not in frame.columns:
        raise DataError(f"{path}: line 1: missing '{LABEL_COLUMN}' column")
    # short rows are padded with NaN by the parser
    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        line = int(np.flatnonzero(ragged)[0]) + 2
        raise DataError(f"{path}: line {line}: ragged row, expected {len(frame.columns)} fields")

    labels = frame[LABEL_COLUMN].str.strip().to_numpy()
    unknown = ~np.isin(labels, [NOMINAL, FAULT])
    if unknown.any():
        row = int(np.flatnonzero(unknown)[0])
        raise DataError(f"{path}: line {row + 2}: label must be '{NOMINAL}' or '{FAULT}', got {labels[row]!r}")

    sensors = [column for column in frame.columns if column != LABEL_COLUMN]
    cells = frame[sensors].to_numpy(dtype=object)
    try:
        values = cells.astype(np.float64)
    except ValueError:
        for row, col in np.ndindex(cells.shape):
            try:
                float(cells[row, col])
            except ValueError:
                raise DataError(f"{path}: line {row + 2}: column '{sensors[col]}' is not numeric: "
                                f"{cells[row, col]!r}") from None
        raise
    return TelemetryTable(sensors, values.reshape(len(frame), len(sensors)), labels == FAULT, path.stem)


def write_csv(table: TelemetryTable, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(table.values, columns=table.sensors)
    frame[LABEL_COLUMN] = np.where(table.faults, FAULT, NOMINAL)
    # 17 significant digits round-trip float64 exactly
    frame.to_csv(path, index=False, float_format="%.17g")


def write_sidecar(path, **metadata):
    """Seed and generator settings next to an artifact, as <artifact>.meta.json."""
    path = Path(path)
    write_json(path.with_name(path.name + ".meta.json"), metadata)


def load_directory(directory) -> List[TelemetryTable]:
    """Every *.csv file in a directory, one table per file, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: data directory not found")
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise DataError(f"{directory}: no CSV files")
    tables = [ingest_csv(path) for path in files]
    print(f"📦 [data] Loaded {len(tables)} files, {sum(len(t) for t in tables)} rows from {directory}")
    return tables


# ===== Scaling =====

class Scaler:
    """Per-column min-max scaling fitted on training rows only."""

    def __init__(self, data_min, data_max):
        data_min = np.asarray(data_min, dtype=np.float64)
        data_max = np.asarray(data_max, dtype=np.float64)
        if np.any(data_max < data_min):
            raise ContractError("scaler: max must not be below min in any column")
        self.data_min = data_min
        self.data_max = data_max
        # constant columns get unit scale, so their fitted value maps to 0
        self._scaler = MinMaxScaler().fit(np.vstack([data_min, data_max]))

    @classmethod
    def fit(cls, values) -> "Scaler":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] == 0:
            raise ContractError("scaler: cannot fit on zero training rows")
        return cls(values.min(axis=0), values.max(axis=0))

    def transform(self, values) -> np.ndarray:
        return self._scaler.transform(np.asarray(values, dtype=np.float64))

    def inverse_transform(self, values) -> np.ndarray:
        return self._scaler.inverse_transform(np.asarray(values, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"min": self.data_min.tolist(), "max": self.data_max.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Scaler":
        return cls(payload["min"], payload["max"])


def fit_scale(table: TelemetryTable, training_rows=None) -> Scaler:
    """Fit on the selected training rows (all rows when None)."""
    selected = table.values if training_rows is None else table.values[training_rows]
    return Scaler.fit(selected)


def apply_scale(scaler: Scaler, table: TelemetryTable) -> TelemetryTable:
    return table.with_values(scaler.transform(table.values))


# ===== Windows =====

class WindowedDataset:
    """Fixed-length windows (W, L, n) with any-row-fault labels."""

    def __init__(self, windows, faults, sources, sensors: Sequence[str], split: Optional[int] = None,
                 role: str = "train", skipped_segments: int = 0):
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3:
            raise DimensionError(f"windows must be (count, length, sensors), got {windows.shape}")
        if role not in ROLES:
            raise ContractError(f"unknown dataset role {role!r}")
        self.windows = windows
        self.faults = np.asarray(faults, dtype=bool)
        self.sources = np.asarray(sources, dtype=object)
        self.sensors = list(sensors)
        self.split = split
        self.role = role
        self.skipped_segments = skipped_segments

    def __len__(self):
        return self.windows.shape[0]

    @property
    def length(self) -> int:
        return self.windows.shape[1]

    @property
    def input_dim(self) -> int:
        return self.windows.shape[1] * self.windows.shape[2]

    def flat(self) -> np.ndarray:
        """Time-major flattening: all sensors of timestamp 1, then timestamp 2, ..."""
        return self.windows.reshape(len(self), -1)

    def subset(self, index, role: Optional[str] = None) -> "WindowedDataset":
        return WindowedDataset(self.windows[index], self.faults[index], self.sources[index], self.sensors,
                               self.split, role or self.role)

    def nominal(self) -> "WindowedDataset":
        return self.subset(~self.faults)


def make_windows(table: TelemetryTable, length: int = 50, stride: int = 50,
                 split: Optional[int] = None, role: str = "train") -> WindowedDataset:
    """Slide a window over every file segment; windows never cross file boundaries."""
    if length < 1 or stride < 1:
        raise ConfigError(f"window length and stride must be positive, got {length} and {stride}")
    windows, faults, sources = [], [], []
    skipped = 0
    for start, end in table.segments():
        if end - start < length:
            skipped += 1
            continue
        values = sliding_window_view(table.values[start:end], length, axis=0)[::stride]
        windows.append(values.transpose(0, 2, 1))
        faults.append(sliding_window_view(table.faults[start:end], length)[::stride].any(axis=1))
        sources.append(np.full(values.shape[0], table.sources[start], dtype=object))
    if skipped:
        print(f"⚠️  [data] Skipped {skipped} segment(s) shorter than {length} rows")
    if not windows:
        return WindowedDataset(np.zeros((0, length, table.n_sensors)), [], [], table.sensors, split, role, skipped)
    return WindowedDataset(np.concatenate(windows), np.concatenate(faults), np.concatenate(sources),
                           table.sensors, split, role, skipped)


def _exact_fraction(value: float) -> Fraction:
    return Fraction(str(value))


def reduce_windows(dataset: WindowedDataset, keep: float = 0.34, seed: int = 0) -> WindowedDataset:
    """Keep ceil(keep * N) randomly chosen windows, in their original order."""
    if not 0 < keep <= 1:
        raise ConfigError(f"reduced fraction must lie in (0, 1], got {keep}")
    count = math.ceil(_exact_fraction(keep) * len(dataset))
    chosen = np.sort(np.random.default_rng(seed).choice(len(dataset), size=count, replace=False))
    return dataset.subset(chosen)


def train_validation_split(dataset: WindowedDataset, fraction: float = 0.3,
                           seed: int = 0) -> Tuple[WindowedDataset, WindowedDataset]:
    """Hold out round(fraction * N) windows for validation (at least one of each when N >= 2)."""
    if not 0 < fraction < 1:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    total = len(dataset)
    n_val = round(_exact_fraction(fraction) * total)
    if total >= 2:
        n_val = min(max(n_val, 1), total - 1)
    order = np.random.default_rng(seed).permutation(total)
    val_index, train_index = np.sort(order[:n_val]), np.sort(order[n_val:])
    return dataset.subset(train_index, "train"), dataset.subset(val_index, "validation")


# ===== Split plans =====

class Split(BaseModel):
    train: List[str]
    test: List[str]


class SplitPlan(BaseModel):
    """k assignments of source files to train/test sides."""

    files: List[str]
    seed: int
    test_fraction: float
    splits: List[Split]

    def split(self, index: int) -> Split:
        if not 0 <= index < len(self.splits):
            raise ConfigError(f"split index {index} out of range 0..{len(self.splits) - 1}")
        return self.splits[index]


def plan_splits(files: Sequence[str], k: int = 7, seed: int = 0, test_fraction: float = 1 / 3) -> SplitPlan:
    """Random file-level train/test partitions, reproducible under `seed` (default ratio 2:1)."""
    files = list(files)
    if len(files) < 2:
        raise ContractError(f"need at least 2 files to split, got {len(files)}")
    if len(set(files)) != len(files):
        raise ContractError("file names must be unique")
    if k < 1 or not 0 < test_fraction < 1:
        raise ConfigError(f"invalid split request: k={k}, test_fraction={test_fraction}")
    rng = np.random.default_rng(seed)
    n_test = min(len(files) - 1, max(1, round(len(files) * test_fraction)))
    splits = []
    for _ in range(k):
        order = rng.permutation(len(files))
        test = sorted(files[i] for i in order[:n_test])
        train = sorted(files[i] for i in order[n_test:])
        splits.append(Split(train=train, test=test))
    return SplitPlan(files=files, seed=seed, test_fraction=test_fraction, splits=splits)


class SplitData:
    """Everything one training run sees for a split, plus the held-out test windows."""

    def __init__(self, scaler: Scaler, train: WindowedDataset, validation: WindowedDataset,
                 ssl_train: WindowedDataset, ssl_validation: WindowedDataset, test: Optional[WindowedDataset]):
        self.scaler = scaler
        self.train = train
        self.validation = validation
        self.ssl_train = ssl_train
        self.ssl_validation = ssl_validation
        self.test = test

    @property
    def input_dim(self) -> int:
        return self.train.input_dim

    @property
    def n_sensors(self) -> int:
        return self.train.windows.shape[2]


def _select_files(tables: Sequence[TelemetryTable], names: Sequence[str]) -> TelemetryTable:
    by_name = {}
    for table in tables:
        for source in table.source_ids:
            by_name[source] = table
    missing = [name for name in names if name not in by_name]
    if missing:
        raise DataError(f"split references unknown files: {', '.join(missing)}")
    return TelemetryTable.concat([by_name[name].rows(by_name[name].sources == name) for name in names])


def held_out_windows(tables: Sequence[TelemetryTable], files: Sequence[str], scaler: Scaler,
                     length: int = 50, stride: int = 1, split: Optional[int] = None) -> WindowedDataset:
    """Scaled test windows of the named files, using a scaler fitted on training files."""
    test_table = apply_scale(scaler, _select_files(tables, files))
    return make_windows(test_table, length, stride, split, "test")


def prepare_split(tables: Sequence[TelemetryTable], plan: SplitPlan, split_index: int, *,
                  scope: str = "split_train", length: int = 50, train_stride: int = 50, test_stride: int = 1,
                  validation_fraction: float = 0.3, reduced_fraction: float = 0.34, seed: int = 0,
                  include_test: bool = True) -> SplitData:
    """Scale on training files, window, reduce, and carve validation sets for both tasks.

    The "complete_dataset" scope feeds every non-test window to the self-supervision task;
    the main loss always sees the reduced nominal training windows.
    """
    split = plan.split(split_index)
    train_table = _select_files(tables, split.train)
    scaler = fit_scale(train_table)
    windows = make_windows(apply_scale(scaler, train_table), length, train_stride, split_index, "train")
    if len(windows) == 0:
        raise DataError(f"split {split_index}: no training windows of length {length}")
    reduced = reduce_windows(windows, reduced_fraction, seed)

    nominal = reduced.nominal()
    if len(nominal) < 2:
        raise DataError(f"split {split_index}: need at least 2 nominal training windows, got {len(nominal)}")
    train, validation = train_validation_split(nominal, validation_fraction, seed)

    if scope == "split_train":
        pool = reduced
    elif scope == "complete_dataset":
        pool = windows
    else:
        raise ConfigError(f"unknown dataset scope {scope!r}")
    ssl_train, ssl_validation = train_validation_split(pool, validation_fraction, seed + 1)

    test = held_out_windows(tables, split.test, scaler, length, test_stride, split_index) if include_test else None
    print(f"📦 [data] Split {split_index}: {len(train)} train / {len(validation)} validation nominal windows, "
          f"{len(ssl_train)} self-supervision windows ({scope})"
          + (f", {len(test)} test windows" if test is not None else ""))
    return SplitData(scaler, train, validation, ssl_train, ssl_validation, test)


# ===== Synthetic EPS telemetry =====

class LoadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    resistance: float = Field(gt=0)
    bus: Literal["A", "B"]
    toggle_probability: float = Field(0.01, ge=0, le=1)
    initially_on: bool = True


class FaultSpec(BaseModel):
    """One injected fault over rows [start, end).

    stuck / offset target a sensor column; short targets a load, whose
    resistance is multiplied by `magnitude` (a current spike).
    """

    model_config = ConfigDict(extra="forbid")

    kind: Literal["stuck", "offset", "short"]
    target: str
    start: int = Field(ge=0)
    end: int
    magnitude: float = 0.0
    value: Optional[float] = None

    @model_validator(mode="after")
    def _check_interval(self):
        if self.end <= self.start:
            raise ValueError(f"fault interval [{self.start}, {self.end}) is empty")
        if self.kind == "short" and self.magnitude <= 0:
            raise ValueError("a short needs a positive resistance factor in 'magnitude'")
        return self


def _default_loads() -> List[LoadSpec]:
    return [
        LoadSpec(name="L1", resistance=12.0, bus="A"),
        LoadSpec(name="L2", resistance=24.0, bus="A", toggle_probability=0.02),
        LoadSpec(name="L3", resistance=16.0, bus="B"),
        LoadSpec(name="L4", resistance=30.0, bus="B", toggle_probability=0.02),
    ]


class SynthConfig(BaseModel):
    """Small DC circuit: one source feeding two buses through line resistances."""

    model_config = ConfigDict(extra="forbid")

    rows: int = Field(1000, ge=1)
    source_voltage: float = Field(24.0, gt=0)
    source_drift: float = Field(0.3, ge=0)
    drift_period: float = Field(400.0, gt=0)
    line_resistance_a: float = Field(0.05, ge=0)
    line_resistance_b: float = Field(0.08, ge=0)
    loads: List[LoadSpec] = Field(default_factory=_default_loads)
    noise_sigma: float = Field(0.01, ge=0)
    faults: List[FaultSpec] = Field(default_factory=list)

    def sensor_names(self) -> List[str]:
        return ["V_src", "I_src", "V_busA", "V_busB"] + [f"I_{load.name}" for load in self.loads]


class CorpusConfig(BaseModel):
    """A multi-file synthetic corpus; a fraction of files receive random faults."""

    model_config = ConfigDict(extra="forbid")

    files: int = Field(20, ge=2)
    base: SynthConfig = Field(default_factory=SynthConfig)
    fault_file_fraction: float = Field(0.5, ge=0, le=1)
    max_faults_per_file: int = Field(2, ge=1)
    fault_length: Tuple[int, int] = (100, 300)
    voltage_offset: float = 1.0
    current_offset: float = 1.0
    short_factor: float = Field(0.1, gt=0)


def _validate_schedule(config: SynthConfig):
    sensors = config.sensor_names()
    loads = [load.name for load in config.loads]
    for fault in config.faults:
        valid = loads if fault.kind == "short" else sensors
        if fault.target not in valid:
            raise ConfigError(f"{fault.kind} fault targets unknown {'load' if fault.kind == 'short' else 'sensor'} "
                              f"{fault.target!r}")
        if fault.end > config.rows:
            raise ConfigError(f"fault interval [{fault.start}, {fault.end}) exceeds {config.rows} rows")
    for i, first in enumerate(config.faults):
        for second in config.faults[i + 1:]:
            if first.target == second.target and first.start < second.end and second.start < first.end:
                raise ConfigError(f"contradictory faults on {first.target}: [{first.start}, {first.end}) "
                                  f"overlaps [{second.start}, {second.end})")


def eps_relations(config: SynthConfig) -> RelationSet:
    """Linear circuit laws the generator satisfies exactly at zero noise."""
    sensors = config.sensor_names()
    column = {name: i for i, name in enumerate(sensors)}
    A = np.zeros((3, len(sensors)))
    # source current is the sum of all load currents
    A[0, column["I_src"]] = 1.0
    for load in config.loads:
        A[0, column[f"I_{load.name}"]] = -1.0
    # each bus sits one line drop below the source
    for row, bus, resistance in ((1, "A", config.line_resistance_a), (2, "B", config.line_resistance_b)):
        A[row, column[f"V_bus{bus}"]] = 1.0
        A[row, column["V_src"]] = -1.0
        for load in config.loads:
            if load.bus == bus:
                A[row, column[f"I_{load.name}"]] = resistance
    return RelationSet(sensors, A, np.zeros(3))


def synth_eps(config: SynthConfig, seed: int = 0, source: str = "eps") -> TelemetryTable:
    """Generate correlated EPS telemetry with the configured fault schedule."""
    _validate_schedule(config)
    rng = np.random.default_rng(seed)
    rows = config.rows
    t = np.arange(rows, dtype=np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    v_src = config.source_voltage + config.source_drift * np.sin(2 * np.pi * t / config.drift_period + phase)

    # load on/off states toggle as independent Markov chains
    initial = np.array([load.initially_on for load in config.loads])
    flips = rng.random((rows, len(config.loads))) < np.array([load.toggle_probability for load in config.loads])
    flips[0] = False
    states = np.logical_xor(initial, np.logical_xor.accumulate(flips, axis=0))

    resistance = np.tile([load.resistance for load in config.loads], (rows, 1)).astype(np.float64)
    faults = np.zeros(rows, dtype=bool)
    loads = [load.name for load in config.loads]
    for fault in config.faults:
        faults[fault.start:fault.end] = True
        if fault.kind == "short":
            resistance[fault.start:fault.end, loads.index(fault.target)] *= fault.magnitude
    conductance = states / resistance

    buses = {}
    currents = np.zeros_like(conductance)
    for bus, line in (("A", config.line_resistance_a), ("B", config.line_resistance_b)):
        members = [i for i, load in enumerate(config.loads) if load.bus == bus]
        v_bus = v_src / (1.0 + line * conductance[:, members].sum(axis=1))
        currents[:, members] = conductance[:, members] * v_bus[:, None]
        buses[bus] = v_bus
    i_src = currents[:, 0].copy()
    for k in range(1, currents.shape[1]):
        i_src = i_src + currents[:, k]

    values = np.column_stack([v_src, i_src, buses["A"], buses["B"], currents])
    if config.noise_sigma > 0:
        values = values + config.noise_sigma * rng.standard_normal(values.shape)

    sensors = config.sensor_names()
    for fault in config.faults:
        if fault.kind == "short":
            continue
        column = sensors.index(fault.target)
        if fault.kind == "offset":
            values[fault.start:fault.end, column] += fault.magnitude
        else:
            stuck = values[fault.start, column] if fault.value is None else fault.value
            values[fault.start:fault.end, column] = stuck
    return TelemetryTable(sensors, values, faults, source)


def _random_schedule(cfg: CorpusConfig, rng: np.random.Generator) -> List[FaultSpec]:
    base = cfg.base
    sensors = base.sensor_names()
    loads = [load.name for load in base.loads]
    low, high = cfg.fault_length
    count = int(rng.integers(1, cfg.max_faults_per_file + 1))
    # faults occupy disjoint slots so schedules never contradict
    slot = base.rows // count
    faults = []
    for i in range(count):
        length = int(min(rng.integers(low, high + 1), slot - 1))
        if length < 1:
            continue
        start = i * slot + int(rng.integers(0, slot - length + 1))
        kind = str(rng.choice(["stuck", "offset", "short"]))
        if kind == "short":
            faults.append(FaultSpec(kind=kind, target=str(rng.choice(loads)), start=start, end=start + length,
                                    magnitude=cfg.short_factor))
            continue
        target = str(rng.choice(sensors))
        size = cfg.voltage_offset if target.startswith("V") else cfg.current_offset
        magnitude = float(rng.choice([-1.0, 1.0])) * size if kind == "offset" else 0.0
        faults.append(FaultSpec(kind=kind, target=target, start=start, end=start + length, magnitude=magnitude))
    return faults


def synth_corpus(cfg: CorpusConfig, seed: int = 0) -> List[TelemetryTable]:
    """One table per synthetic file, named eps_000, eps_001, ..."""
    children = np.random.SeedSequence(seed).spawn(cfg.files + 1)
    schedule_rng = np.random.default_rng(children[0])
    faulty = set(schedule_rng.choice(cfg.files, size=round(cfg.files * cfg.fault_file_fraction),
                                     replace=False).tolist())
    tables = []
    for index in range(cfg.files):
        faults = _random_schedule(cfg, schedule_rng) if index in faulty else []
        file_cfg = cfg.base.model_copy(update={"faults": faults})
        file_seed = int(children[index + 1].generate_state(1)[0])
        tables.append(synth_eps(file_cfg, file_seed, source=f"eps_{index:03d}"))
    return tables
