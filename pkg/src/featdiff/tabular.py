"""Dataset ingestion, deterministic cross-validated scoring, task metrics.

The downstream model is a random forest (100 trees).  Fold assignment hashes
row content, so scores are invariant to row permutation and bit-reproducible
for a fixed seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.metrics import f1_score

from .expr import FeatureSet, evaluate

__all__ = [
    "Dataset",
    "EvalResult",
    "RAW",
    "NonNumericFeature",
    "EmptyDataset",
    "DegenerateTarget",
    "load_csv",
    "downstream_score",
    "metric_f1",
    "metric_one_minus_rae",
]

# Sentinel: score the untransformed table.
RAW = "raw"

N_FOLDS = 5
N_TREES = 100
MIN_ROWS = 20


class NonNumericFeature(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class DegenerateTarget(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str  # "classification" | "regression"
    name: str

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    @property
    def metric_name(self) -> str:
        return "f1" if self.task == "classification" else "one_minus_rae"


@dataclass(frozen=True)
class EvalResult:
    metric_name: str
    value: float
    per_fold: tuple[float, ...] = field(default_factory=tuple)


def _is_classification(y: pd.Series) -> bool:
    if not pd.api.types.is_numeric_dtype(y):
        return True
    vals = y.dropna().to_numpy()
    return np.all(vals == np.round(vals)) and len(np.unique(vals)) <= 20


def load_csv(path, name: str | None = None) -> Dataset:
    """Load a CSV whose last column is the target.

    Missing feature cells are imputed with the column median; categorical
    targets are label-encoded.
    """
    df = pd.read_csv(path)
    if df.shape[0] == 0 or df.shape[1] < 2:
        raise EmptyDataset(f"{path}: need >=1 row and >=2 columns")
    target = df.iloc[:, -1]
    feats = df.iloc[:, :-1]
    for col in feats.columns:
        if not pd.api.types.is_numeric_dtype(feats[col]):
            coerced = pd.to_numeric(feats[col], errors="coerce")
            if coerced.isna().all():
                raise NonNumericFeature(f"column {col!r} is not numeric")
            feats[col] = coerced
    feats = feats.fillna(feats.median())
    X = feats.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(X)):
        # columns that were entirely NaN have no median; treat as constant 0
        X = np.nan_to_num(X, nan=0.0)
    if _is_classification(target):
        task = "classification"
        codes, _ = pd.factorize(target.astype(str), sort=True)
        y = codes.astype(np.int64)
    else:
        task = "regression"
        y = target.to_numpy(dtype=np.float64)
    return Dataset(X=X, y=y, task=task, name=name or str(path))


def metric_f1(y_true, y_pred) -> float:
    """Weighted F1 over classes."""
    return float(f1_score(y_true, y_pred, average="weighted", zero_division=0))


def metric_one_minus_rae(y_true, y_pred) -> float:
    """1 - relative absolute error; 0 when y_true is constant."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    denom = np.sum(np.abs(y_true - np.mean(y_true)))
    if denom == 0.0:
        return 0.0
    return float(1.0 - np.sum(np.abs(y_true - y_pred)) / denom)


def _row_digests(X: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Per-row content digest; independent of row order."""
    out = np.empty(X.shape[0], dtype=np.uint64)
    seed_bytes = int(seed).to_bytes(8, "little", signed=True)
    yb = np.asarray(y)
    for i in range(X.shape[0]):
        h = hashlib.blake2b(digest_size=8)
        h.update(seed_bytes)
        h.update(X[i].tobytes())
        h.update(yb[i].tobytes())
        out[i] = int.from_bytes(h.digest(), "little")
    return out


def downstream_score(ds: Dataset, fs: FeatureSet | str, seed: int) -> EvalResult:
    """Mean k-fold random-forest score of the transformed (or raw) table.

    Deterministic given (ds, fs, seed): folds come from a seeded hash of row
    content and rows are fed to the model in digest order.
    """
    if isinstance(fs, FeatureSet):
        # expression outputs are clipped at 1e100 which overflows sklearn's
        # internal float32 cast; narrow to the float32-safe range
        X = np.clip(evaluate(fs, ds.X), -1e38, 1e38)
    elif fs == RAW:
        X = ds.X
    else:
        raise TypeError(f"fs must be a FeatureSet or RAW, got {fs!r}")
    y = ds.y
    if ds.task == "classification" and len(np.unique(y)) < 2:
        raise DegenerateTarget("classification target has a single class")

    digests = _row_digests(ds.X, y, seed)
    folds = digests % N_FOLDS
    order = np.argsort(digests, kind="stable")
    scores = []
    for k in range(N_FOLDS):
        train = order[folds[order] != k]
        test = order[folds[order] == k]
        if len(test) == 0 or len(train) == 0:
            continue
        if ds.task == "classification":
            model = RandomForestClassifier(n_estimators=N_TREES, random_state=seed, n_jobs=1)
            model.fit(X[train], y[train])
            scores.append(metric_f1(y[test], model.predict(X[test])))
        else:
            model = RandomForestRegressor(n_estimators=N_TREES, random_state=seed, n_jobs=1)
            model.fit(X[train], y[train])
            scores.append(metric_one_minus_rae(y[test], model.predict(X[test])))
    return EvalResult(ds.metric_name, float(np.mean(scores)), tuple(scores))
