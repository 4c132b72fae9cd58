"""Window scoring by negative log-likelihood and the four detection metrics."""
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

import diffcore as dc
from config import Config
from errors import DimensionError, NumericError, UndefinedMetricError

SUMMARY_COLUMNS = ["Setting", "Configuration", "# Perms", "AUROC", "FPR95", "F1", "Avg. Prec."]
SETTING_TITLES = {
    "baseline": "Baseline",
    "multitask": "Multi-task",
    "pretrain": "Pre-train + fine-tune",
    "selfsup_only": "Only self-supervision",
}
SCOPE_TITLES = {"split_train": "Split train", "complete_dataset": "Complete dataset"}


class ScoreSet:
    """Per-window anomaly scores (higher is more anomalous) with fault labels."""

    def __init__(self, scores, labels):
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels, dtype=bool).reshape(-1)
        if scores.shape != labels.shape:
            raise DimensionError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
        if not np.all(np.isfinite(scores)):
            raise NumericError("scores contain non-finite values")
        self.scores = scores
        self.labels = labels

    def __len__(self):
        return self.scores.shape[0]

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    def require_both_classes(self, metric: str):
        if self.n_positive == 0 or self.n_negative == 0:
            raise UndefinedMetricError(f"{metric} needs both fault and nominal windows "
                                       f"(got {self.n_positive} fault, {self.n_negative} nominal)")


def score_windows(model, dataset, chunk: int = 1024) -> ScoreSet:
    """-log_prob of every window; the self-supervision head is never consulted."""
    flat = dataset.flat()
    if flat.size and (flat.min() < Config.SCALE_WARN_LOW or flat.max() > Config.SCALE_WARN_HIGH):
        print(f"⚠️  [metrics] Window values span [{flat.min():.3g}, {flat.max():.3g}]; "
              f"was the input scaled with the training scaler?")
    scores = []
    with dc.no_grad():
        for start in range(0, flat.shape[0], chunk):
            scores.append(-model.log_prob(flat[start:start + chunk]).values)
    values = np.concatenate(scores) if scores else np.zeros(0)
    return ScoreSet(values, dataset.faults)


def _sweep(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) when predicting fault for score >= each distinct threshold, descending."""
    order = np.argsort(-scores.scores, kind="mergesort")
    ranked = scores.scores[order]
    hits = scores.labels[order]
    # last index of every group of equal scores
    ends = np.flatnonzero(np.r_[ranked[1:] != ranked[:-1], True])
    tp = np.cumsum(hits)[ends]
    fp = np.cumsum(~hits)[ends]
    return ranked[ends], tp, fp


def auroc(scores: ScoreSet) -> float:
    """Mann-Whitney statistic with half credit for ties."""
    scores.require_both_classes("AUROC")
    ranks = pd.Series(scores.scores).rank(method="average").to_numpy()
    n_pos, n_neg = scores.n_positive, scores.n_negative
    u = ranks[scores.labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr95(scores: ScoreSet) -> float:
    """FPR at the highest threshold whose TPR reaches 0.95."""
    scores.require_both_classes("FPR95")
    _, tp, fp = _sweep(scores)
    reached = np.flatnonzero(tp >= 0.95 * scores.n_positive)
    return float(fp[reached[0]] / scores.n_negative)


def _best_f1(scores: ScoreSet) -> Tuple[float, int]:
    _, tp, fp = _sweep(scores)
    fn = scores.n_positive - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    best = int(np.argmax(f1))
    return float(f1[best]), best


def f1(scores: ScoreSet) -> Tuple[float, float]:
    """Maximum F1 over thresholds induced by the scores; returns (f1, threshold)."""
    scores.require_both_classes("F1")
    value, best = _best_f1(scores)
    thresholds, _, _ = _sweep(scores)
    return value, float(thresholds[best])


def average_precision(scores: ScoreSet) -> float:
    """Sum of recall increments times precision, walking equal-score groups."""
    scores.require_both_classes("average precision")
    _, tp, fp = _sweep(scores)
    recall_step = np.diff(np.r_[0, tp]) / scores.n_positive
    precision = tp / (tp + fp)
    return float(np.sum(recall_step * precision))


class MetricsReport(BaseModel):
    auroc: float = Field(ge=0, le=1)
    fpr95: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    average_precision: float = Field(ge=0, le=1)
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int


def evaluate(scores: ScoreSet) -> MetricsReport:
    """All four metrics plus the confusion counts at the best-F1 threshold."""
    scores.require_both_classes("evaluation")
    best_f1, threshold = f1(scores)
    predicted = scores.scores >= threshold
    tp = int(np.sum(predicted & scores.labels))
    fp = int(np.sum(predicted & ~scores.labels))
    return MetricsReport(
        auroc=auroc(scores),
        fpr95=fpr95(scores),
        f1=best_f1,
        average_precision=average_precision(scores),
        threshold=threshold,
        tp=tp,
        fp=fp,
        fn=scores.n_positive - tp,
        tn=scores.n_negative - fp,
    )


# ===== Reports =====

def report_rows(records: Sequence[dict]) -> pd.DataFrame:
    """One row per cell: identifying columns followed by the report fields."""
    return pd.DataFrame.from_records(list(records))


def write_report_csv(path, records: Sequence[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_rows(records).to_csv(path, index=False, float_format="%.17g")


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and std over splits and seeds per (setting, scope, P), in percent."""
    ok = frame[frame["status"] == "ok"] if "status" in frame.columns else frame
    if ok.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    keys = ["setting", "scope", "n_perms"]
    grouped = ok.groupby(keys, sort=False, dropna=False)
    stats = grouped[["auroc", "fpr95", "f1", "average_precision"]].agg(["mean", "std"]) * 100.0

    def cell(row, metric: str) -> str:
        mean, std = row[(metric, "mean")], row[(metric, "std")]
        return f"{mean:.2f}" if pd.isna(std) else f"{mean:.2f} ± {std:.2f}"

    rows = []
    for (setting, scope, n_perms), row in stats.iterrows():
        rows.append({
            "Setting": SETTING_TITLES.get(setting, setting),
            "Configuration": "-" if setting == "baseline" else SCOPE_TITLES.get(scope, scope),
            "# Perms": "-" if setting == "baseline" or pd.isna(n_perms) else str(int(n_perms)),
            "AUROC": cell(row, "auroc"),
            "FPR95": cell(row, "fpr95"),
            "F1": cell(row, "f1"),
            "Avg. Prec.": cell(row, "average_precision"),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def render_summary(frame: pd.DataFrame, failures: Optional[List[str]] = None) -> str:
    """Human-readable table, with failed cells listed beneath it."""
    text = summarize(frame).to_string(index=False)
    if failures:
        text += "\n\nFailed cells:\n" + "\n".join(f"  {line}" for line in failures)
    return text + "\n"
