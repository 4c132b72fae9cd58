"""Training loops for the baseline and the three self-supervised settings, and the experiment matrix."""
import sys
import traceback
from contextlib import contextmanager
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

import diffcore as dc
from config import Config, build_model, read_json, write_json
from data import (Scaler, SplitData, SplitPlan, TelemetryTable, held_out_windows, load_directory, plan_splits,
                  prepare_split)
from errors import ConfigError, ContractError, NumericError
from flow import FlowModel, load_checkpoint, save_checkpoint
from losses import LinearRelationPenalty, LossConfig, PhysicsPenalty, main_loss, multitask_loss, read_relations
from metrics import evaluate, render_summary, score_windows, write_report_csv
from selfsup import (PermutationSet, SelfSupHead, draw_permuted_batch, generate_set, permute_batch,
                     read_permutation_set, selfsup_accuracy, selfsup_loss, write_permutation_set)

Setting = Literal["baseline", "multitask", "pretrain", "selfsup_only"]
Scope = Literal["split_train", "complete_dataset"]

# Child streams spawned from one seed, one per concern
STREAMS = ("init", "head", "batches", "physics", "selfsup", "validation")


class TrainConfig(BaseModel):
    """Hyperparameters of one training run; CLI flags mirror these field names."""

    model_config = ConfigDict(extra="forbid")

    setting: Setting = "baseline"
    scope: Scope = "split_train"
    n_perms: int = Field(200, ge=2)
    epochs: int = Field(200, ge=0)
    pretrain_epochs: int = Field(100, ge=0)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(1e-3, gt=0, allow_inf_nan=False)
    patience: int = Field(20, ge=1)
    min_delta: float = Field(1e-4, ge=0)
    seed: int = 0
    selfsup_weight: float = Field(1.0, ge=0, allow_inf_nan=False)
    physics_weight: float = Field(1.0, ge=0, allow_inf_nan=False)
    physics_samples: int = Field(32, ge=1)
    multitask_mode: Literal["sum", "alternate"] = "sum"
    flow_layers: int = Field(4, ge=2)
    hidden_units: int = Field(32, ge=1)
    window_length: int = Field(50, ge=1)
    train_stride: int = Field(50, ge=1)
    test_stride: int = Field(1, ge=1)
    validation_fraction: float = Field(0.3, gt=0, lt=1)
    reduced_fraction: float = Field(0.34, gt=0, le=1)
    pool_factor: int = Field(10, ge=2)

    def loss_config(self) -> LossConfig:
        return LossConfig(physics_weight=self.physics_weight, selfsup_weight=self.selfsup_weight,
                          physics_samples=self.physics_samples)

    @property
    def uses_perms(self) -> bool:
        return self.setting != "baseline"


class EarlyStopper:
    """Tracks the best validation loss and the parameters that produced it."""

    def __init__(self, patience: int = 20, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self._state: Optional[List[np.ndarray]] = None

    def update(self, epoch: int, value: float, params: List[dc.ParamNode]) -> bool:
        """Record one validation result; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            self._state = [p.values.copy() for p in params]
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, params: List[dc.ParamNode]):
        if self._state is None:
            return
        for param, values in zip(params, self._state):
            param.values[...] = values


class TrainResult:
    """A trained flow, the optional head, and one history entry per epoch and phase."""

    def __init__(self, model: FlowModel, head: Optional[SelfSupHead], history: List[dict]):
        self.model = model
        self.head = head
        self.history = history


class _Streams:
    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(STREAMS))
        for name, child in zip(STREAMS, children):
            setattr(self, name, np.random.default_rng(child))
        # validation draws are regenerated each evaluation so they never drift
        self.validation_seed = int(children[-1].generate_state(1)[0])

    def validation_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.validation_seed)


def _build(cfg: TrainConfig, data: SplitData, streams: _Streams, n_classes: Optional[int]):
    model = FlowModel(data.input_dim, cfg.flow_layers, cfg.hidden_units, rng=streams.init)
    head = None if n_classes is None else SelfSupHead(data.input_dim, n_classes, rng=streams.head)
    return model, head


def _check_loss(loss: dc.DenseArray, phase: str, epoch: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"{phase}: non-finite loss at epoch {epoch}")
    return value


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _fit(phase: str, cfg: TrainConfig, epochs: int, params: List[dc.ParamNode],
         run_epoch: Callable[[dc.Adam, int], float], validate: Callable[[], Dict[str, float]],
         history: List[dict]):
    """Adam + early stopping on validate()['loss']; the initial state counts as epoch 0."""
    optimizer = dc.Adam(params, lr=cfg.learning_rate)
    stopper = EarlyStopper(cfg.patience, cfg.min_delta)

    for epoch in range(epochs + 1):
        train_loss = run_epoch(optimizer, epoch) if epoch > 0 else None
        with dc.no_grad():
            metrics = validate()
        if not np.isfinite(metrics["loss"]):
            raise NumericError(f"{phase}: non-finite validation loss at epoch {epoch}")
        stop = stopper.update(epoch, metrics["loss"], params)
        history.append({"phase": phase, "epoch": epoch, "train_loss": train_loss,
                        "best": stopper.best_epoch == epoch, **{f"val_{k}": v for k, v in metrics.items()}})
        if epoch == 0 or epoch % 10 == 0 or epoch == epochs:
            shown = "" if train_loss is None else f"train {train_loss:.4f}, "
            print(f"📊 [train] {phase} epoch {epoch}: {shown}validation {metrics['loss']:.4f}")
        if stop:
            print(f"⏹️  [train] {phase}: early stop at epoch {epoch}, best epoch {stopper.best_epoch}")
            break
    stopper.restore(params)
    print(f"✅ [train] {phase}: best validation {stopper.best:.4f} at epoch {stopper.best_epoch}")


# ===== Validation objectives =====

def _main_validation(model: FlowModel, data: SplitData, penalty: Optional[PhysicsPenalty],
                     cfg: TrainConfig, streams: _Streams) -> Callable[[], float]:
    windows = data.validation.flat()
    loss_cfg = cfg.loss_config()
    return lambda: main_loss(model, windows, penalty, loss_cfg, streams.validation_rng()).item()


def _selfsup_validation(model: FlowModel, head: SelfSupHead, data: SplitData, perms: PermutationSet,
                        streams: _Streams) -> Callable[[], Tuple[float, float]]:
    windows = data.ssl_validation.windows
    if len(windows) == 0:
        raise ContractError("self-supervision needs at least one validation window")
    labels = streams.validation_rng().integers(0, perms.size, size=len(windows))
    batch = permute_batch(windows, perms, labels)

    def run():
        return selfsup_loss(model, head, batch, labels).item(), selfsup_accuracy(model, head, batch, labels)
    return run


def _selfsup_epoch(model: FlowModel, head: SelfSupHead, data: SplitData, perms: PermutationSet,
                   cfg: TrainConfig, rng: np.random.Generator, phase: str) -> Callable[[dc.Adam, int], float]:
    windows = data.ssl_train.windows

    def run(optimizer: dc.Adam, epoch: int) -> float:
        losses = []
        for index in _batches(len(windows), cfg.batch_size, rng):
            batch, labels = draw_permuted_batch(windows[index], perms, rng)
            optimizer.zero_grad()
            loss = selfsup_loss(model, head, batch, labels)
            losses.append(_check_loss(loss, phase, epoch))
            dc.backward(loss)
            optimizer.step()
        return float(np.mean(losses))
    return run


def _main_epoch(model: FlowModel, data: SplitData, penalty: Optional[PhysicsPenalty], cfg: TrainConfig,
                streams: _Streams, phase: str) -> Callable[[dc.Adam, int], float]:
    windows = data.train.flat()
    loss_cfg = cfg.loss_config()

    def run(optimizer: dc.Adam, epoch: int) -> float:
        losses = []
        for index in _batches(len(windows), cfg.batch_size, streams.batches):
            optimizer.zero_grad()
            loss = main_loss(model, windows[index], penalty, loss_cfg, streams.physics)
            losses.append(_check_loss(loss, phase, epoch))
            dc.backward(loss)
            optimizer.step()
        return float(np.mean(losses))
    return run


def _require_nominal(data: SplitData):
    if len(data.train) == 0 or len(data.validation) == 0:
        raise ContractError("training needs nominal training and validation windows")


def _require_perms(cfg: TrainConfig, data: SplitData, perms: PermutationSet):
    if perms.n != data.n_sensors:
        raise ConfigError(f"permutation set acts on {perms.n} sensors, data has {data.n_sensors}")
    if perms.size != cfg.n_perms:
        raise ConfigError(f"n_perms={cfg.n_perms} but the permutation set holds {perms.size}")
    if len(data.ssl_train) == 0:
        raise ContractError("self-supervision needs at least one training window")
    if not data.ssl_train.faults.any():
        print("⚠️  [train] No fault windows in the self-supervision pool; it degrades to nominal-only")


# ===== Settings =====

def train_baseline(cfg: TrainConfig, data: SplitData, penalty: Optional[PhysicsPenalty] = None) -> TrainResult:
    """Main loss on nominal windows only."""
    _require_nominal(data)
    streams = _Streams(cfg.seed)
    model, _ = _build(cfg, data, streams, None)
    history: List[dict] = []
    validate_main = _main_validation(model, data, penalty, cfg, streams)
    _fit("baseline", cfg, cfg.epochs, model.parameters(), _main_epoch(model, data, penalty, cfg, streams, "baseline"),
         lambda: {"loss": validate_main()}, history)
    return TrainResult(model, None, history)


def train_multitask(cfg: TrainConfig, data: SplitData, perms: PermutationSet,
                    penalty: Optional[PhysicsPenalty] = None) -> TrainResult:
    """Main loss and self-supervision together; self-supervision batches mix nominal and fault windows."""
    _require_nominal(data)
    _require_perms(cfg, data, perms)
    streams = _Streams(cfg.seed)
    model, head = _build(cfg, data, streams, perms.size)
    loss_cfg = cfg.loss_config()
    nominal = data.train.flat()
    pool = data.ssl_train.windows
    weight = cfg.selfsup_weight

    def step(optimizer: dc.Adam, loss: dc.DenseArray, epoch: int) -> float:
        value = _check_loss(loss, "multitask", epoch)
        dc.backward(loss)
        optimizer.step()
        return value

    def run(optimizer: dc.Adam, epoch: int) -> float:
        losses = []
        for index in _batches(len(nominal), cfg.batch_size, streams.batches):
            picked = streams.selfsup.integers(0, len(pool), size=len(index))
            permuted, labels = draw_permuted_batch(pool[picked], perms, streams.selfsup)
            optimizer.zero_grad()
            if cfg.multitask_mode == "sum":
                losses.append(step(optimizer, multitask_loss(model, head, nominal[index], permuted, labels,
                                                             penalty, loss_cfg, streams.physics), epoch))
                continue
            # alternate: a main step on the batch, then a self-supervision step unless lambda is 0
            value = step(optimizer, main_loss(model, nominal[index], penalty, loss_cfg, streams.physics), epoch)
            if weight > 0:
                optimizer.zero_grad()
                value += step(optimizer, selfsup_loss(model, head, permuted, labels) * weight, epoch)
            losses.append(value)
        return float(np.mean(losses))

    validate_main = _main_validation(model, data, penalty, cfg, streams)
    validate_selfsup = _selfsup_validation(model, head, data, perms, streams)

    def validate() -> Dict[str, float]:
        main = validate_main()
        if weight == 0:
            return {"loss": main, "main": main}
        ssl, accuracy = validate_selfsup()
        return {"loss": main + weight * ssl, "main": main, "selfsup": ssl, "accuracy": accuracy}

    history: List[dict] = []
    _fit("multitask", cfg, cfg.epochs, model.parameters() + head.parameters(), run, validate, history)
    return TrainResult(model, head, history)


def train_pretrain_finetune(cfg: TrainConfig, data: SplitData, perms: PermutationSet,
                            penalty: Optional[PhysicsPenalty] = None) -> TrainResult:
    """Phase 1: self-supervision with the head; phase 2: main loss from the pre-trained flow, head dropped."""
    _require_nominal(data)
    _require_perms(cfg, data, perms)
    streams = _Streams(cfg.seed)
    model, head = _build(cfg, data, streams, perms.size)
    history: List[dict] = []

    if cfg.pretrain_epochs > 0:
        validate_selfsup = _selfsup_validation(model, head, data, perms, streams)

        def validate_phase1() -> Dict[str, float]:
            loss, accuracy = validate_selfsup()
            return {"loss": loss, "accuracy": accuracy}

        _fit("pretrain", cfg, cfg.pretrain_epochs, model.parameters() + head.parameters(),
             _selfsup_epoch(model, head, data, perms, cfg, streams.selfsup, "pretrain"), validate_phase1, history)

    validate_main = _main_validation(model, data, penalty, cfg, streams)
    _fit("finetune", cfg, cfg.epochs, model.parameters(),
         _main_epoch(model, data, penalty, cfg, streams, "finetune"), lambda: {"loss": validate_main()}, history)
    return TrainResult(model, None, history)


def train_selfsup_only(cfg: TrainConfig, data: SplitData, perms: PermutationSet) -> TrainResult:
    """Self-supervision as the only loss; the head is dropped before scoring."""
    _require_perms(cfg, data, perms)
    streams = _Streams(cfg.seed)
    model, head = _build(cfg, data, streams, perms.size)
    validate_selfsup = _selfsup_validation(model, head, data, perms, streams)

    def validate() -> Dict[str, float]:
        loss, accuracy = validate_selfsup()
        return {"loss": loss, "accuracy": accuracy}

    history: List[dict] = []
    _fit("selfsup_only", cfg, cfg.epochs, model.parameters() + head.parameters(),
         _selfsup_epoch(model, head, data, perms, cfg, streams.selfsup, "selfsup_only"), validate, history)
    return TrainResult(model, head, history)


def train(cfg: TrainConfig, data: SplitData, perms: Optional[PermutationSet] = None,
          penalty: Optional[PhysicsPenalty] = None) -> TrainResult:
    """Dispatch on cfg.setting."""
    if cfg.setting == "baseline":
        return train_baseline(cfg, data, penalty)
    if perms is None:
        raise ConfigError(f"setting {cfg.setting!r} needs a permutation set")
    if cfg.setting == "multitask":
        return train_multitask(cfg, data, perms, penalty)
    if cfg.setting == "pretrain":
        return train_pretrain_finetune(cfg, data, perms, penalty)
    return train_selfsup_only(cfg, data, perms)


# ===== Experiment matrix =====

class CellSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    setting: Setting
    scope: Scope = "split_train"
    n_perms: int = Field(200, ge=2)

    @property
    def label(self) -> str:
        if self.setting == "baseline":
            return "baseline"
        suffix = "-complete" if self.scope == "complete_dataset" else ""
        return f"{self.setting}{suffix}-p{self.n_perms}"


class ExperimentConfig(BaseModel):
    """settings x splits x seeds, with shared training overrides."""

    model_config = ConfigDict(extra="forbid")

    data: str
    settings: List[CellSpec]
    splits: int = Field(default_factory=lambda: Config.SPLITS, ge=1)
    seeds: List[int] = Field(default_factory=lambda: list(Config.SEEDS))
    split_seed: int = 0
    test_fraction: float = Field(1 / 3, gt=0, lt=1)
    perm_seed: int = 0
    relations: Optional[str] = None
    train: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if not self.settings:
            raise ValueError("at least one setting is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    def base_train(self) -> TrainConfig:
        return build_model(TrainConfig, self.train)


def cell_dir(out_dir, spec: CellSpec, split: int, seed: int) -> Path:
    return Path(out_dir) / spec.label / f"split{split}" / f"seed{seed}"


def perms_path(out_dir, n: int, P: int, seed: int) -> Path:
    return Path(out_dir) / "perms" / f"perms-n{n}-p{P}-s{seed}.txt"


class _Tee:
    """Writes to the console and a per-cell log file."""

    def __init__(self, stream, log):
        self.stream = stream
        self.log = log

    def write(self, text):
        self.stream.write(text)
        self.log.write(text)

    def flush(self):
        self.stream.flush()
        self.log.flush()


@contextmanager
def tee_stdout(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    original = sys.stdout
    with open(path, "w", buffering=1) as log:
        sys.stdout = _Tee(original, log)
        try:
            yield
        finally:
            sys.stdout = original


def build_penalty(relations_path: Optional[str], scaler: Scaler) -> Optional[PhysicsPenalty]:
    if not relations_path:
        return None
    # unit-norm rows: each residual is a distance to its constraint plane
    return LinearRelationPenalty(read_relations(relations_path).rescaled(scaler).normalized())


def train_cell(cfg: TrainConfig, tables: List[TelemetryTable], plan: SplitPlan, split: int, directory,
               perms: Optional[PermutationSet] = None, relations: Optional[str] = None,
               data_dir: Optional[str] = None) -> dict:
    """Train and evaluate one cell; writes model.json, metrics.json, history.json and cell.json."""
    directory = Path(directory)
    data = prepare_split(tables, plan, split, scope=cfg.scope, length=cfg.window_length,
                         train_stride=cfg.train_stride, test_stride=cfg.test_stride,
                         validation_fraction=cfg.validation_fraction, reduced_fraction=cfg.reduced_fraction,
                         seed=plan.seed + split)
    penalty = build_penalty(relations, data.scaler)
    result = train(cfg, data, perms, penalty)

    cell = {
        "train": cfg.model_dump(),
        "split": split,
        "files": plan.split(split).model_dump(),
        "data": data_dir,
        "relations": relations,
        "scaler": data.scaler.to_dict(),
    }
    save_checkpoint(directory / "model.json", result.model, result.head, extra={"scaler": data.scaler.to_dict()})
    write_json(directory / "history.json", {"history": result.history})
    write_json(directory / "cell.json", cell)

    report = evaluate(score_windows(result.model, data.test))
    write_json(directory / "metrics.json", report.model_dump())
    print(f"🎯 [experiment] AUROC {report.auroc:.4f}, FPR95 {report.fpr95:.4f}, "
          f"F1 {report.f1:.4f}, AP {report.average_precision:.4f}")
    return report.model_dump()


def rescore_cell(directory, tables: Optional[List[TelemetryTable]] = None) -> dict:
    """Re-evaluate a stored cell from its checkpoint; the head is never loaded."""
    directory = Path(directory)
    cell = read_json(directory / "cell.json")
    cfg = build_model(TrainConfig, cell["train"])
    model, _, extra = load_checkpoint(directory / "model.json")
    if tables is None:
        tables = load_directory(cell["data"])
    test = held_out_windows(tables, cell["files"]["test"], Scaler.from_dict(extra["scaler"]),
                            cfg.window_length, cfg.test_stride, cell["split"])
    report = evaluate(score_windows(model, test))
    write_json(directory / "metrics.json", report.model_dump())
    return report.model_dump()


_TABLES: Dict[str, List[TelemetryTable]] = {}


def _tables(data_dir: str) -> List[TelemetryTable]:
    # loaded once per worker process
    if data_dir not in _TABLES:
        _TABLES[data_dir] = load_directory(data_dir)
    return _TABLES[data_dir]


def _run_cell(task: dict) -> dict:
    spec = CellSpec.model_validate(task["spec"])
    record = {"setting": spec.setting, "scope": spec.scope,
              "n_perms": None if spec.setting == "baseline" else spec.n_perms,
              "split": task["split"], "seed": task["seed"], "status": "ok", "error": ""}
    directory = Path(task["dir"])
    with tee_stdout(directory / "train.log"):
        print(f"🚀 [experiment] {spec.label} split {task['split']} seed {task['seed']}")
        try:
            cfg = TrainConfig.model_validate({**task["train"], "setting": spec.setting, "scope": spec.scope,
                                              "n_perms": spec.n_perms, "seed": task["seed"]})
            perms = read_permutation_set(task["perms"]) if task["perms"] else None
            plan = SplitPlan.model_validate(task["plan"])
            record.update(train_cell(cfg, _tables(task["data"]), plan, task["split"], directory, perms,
                                     task["relations"], task["data"]))
        except Exception as e:
            record["status"] = "failed"
            record["error"] = f"{type(e).__name__}: {e}"
            print(f"❌ [experiment] {spec.label} split {task['split']} seed {task['seed']}: {record['error']}")
            traceback.print_exc(file=sys.stdout)
    return record


def run_experiment(exp: ExperimentConfig, out_dir, jobs: int = 1) -> pd.DataFrame:
    """Train and evaluate every cell; failed cells are recorded, not fatal."""
    out_dir = Path(out_dir)
    base = exp.base_train()
    tables = _tables(exp.data)
    files = [source for table in tables for source in table.source_ids]
    plan = plan_splits(files, exp.splits, exp.split_seed, exp.test_fraction)
    write_json(out_dir / "splits.json", plan.model_dump())
    n_sensors = tables[0].n_sensors

    perm_files = {}
    for spec in exp.settings:
        if spec.setting == "baseline" or spec.n_perms in perm_files:
            continue
        path = perms_path(out_dir, n_sensors, spec.n_perms, exp.perm_seed)
        if not path.exists():
            write_permutation_set(path, generate_set(n_sensors, spec.n_perms, base.pool_factor, exp.perm_seed))
            print(f"✅ [experiment] Wrote {path}")
        perm_files[spec.n_perms] = str(path)

    tasks = []
    for spec in exp.settings:
        for split in range(exp.splits):
            for seed in exp.seeds:
                tasks.append({
                    "spec": spec.model_dump(), "split": split, "seed": seed,
                    "dir": str(cell_dir(out_dir, spec, split, seed)),
                    "train": base.model_dump(exclude={"setting", "scope", "n_perms", "seed"}),
                    "perms": perm_files.get(spec.n_perms) if spec.setting != "baseline" else None,
                    "plan": plan.model_dump(), "data": exp.data, "relations": exp.relations,
                })
    print(f"🎯 [experiment] {len(tasks)} cells: {len(exp.settings)} settings x {exp.splits} splits x "
          f"{len(exp.seeds)} seeds, {jobs} job(s)")

    if jobs > 1:
        with Pool(jobs) as pool:
            records = pool.map(_run_cell, tasks)
    else:
        records = [_run_cell(task) for task in tasks]

    frame = pd.DataFrame.from_records(records)
    write_report_csv(out_dir / "results.csv", records)
    failures = [f"{r['setting']}/{r['scope']} split {r['split']} seed {r['seed']}: {r['error']}"
                for r in records if r["status"] != "ok"]
    summary = render_summary(frame, failures)
    (out_dir / "summary.txt").write_text(summary)
    print(summary)
    if failures:
        print(f"⚠️  [experiment] {len(failures)} of {len(records)} cells failed")
    return frame
