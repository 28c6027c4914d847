"""Fold-scoped mean imputation and standardization.

Statistics are fitted on training patients only and then applied unchanged to
validation and test patients. Missing cells are imputed with the training mean
before scaling, so they map to exactly zero.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator, OneToOneFeatureMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cohort import MODALITIES, parse_modality
from .exceptions import SchemaError
from .ingest import ModalityTable, format_float

EPSILON = 1e-8


class MissingMeanScaler(OneToOneFeatureMixin, TransformerMixin, BaseEstimator):
    """Impute NaN with the column mean, then standardize with population std.

    ``transform`` computes ``(x - mean) / (std + epsilon)``; unlike
    ``StandardScaler`` a zero-variance column is not special-cased, the
    ``epsilon`` keeps it finite.
    """

    def __init__(self, epsilon: float = EPSILON):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        present = ~np.isnan(X)
        count = present.sum(axis=0)
        filled = np.where(present, X, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(count > 0, filled.sum(axis=0) / np.maximum(count, 1), 0.0)
            sq = np.where(present, (X - mean) ** 2, 0.0)
            std = np.where(count > 0, np.sqrt(sq.sum(axis=0) / np.maximum(count, 1)), 0.0)
        empty = np.flatnonzero(count == 0)
        if empty.size:
            warnings.warn(
                f"{empty.size} feature(s) have no observed training value; using mean=0, std=0",
                RuntimeWarning,
                stacklevel=2,
            )
        self.mean_ = mean
        self.scale_ = std
        self.n_samples_seen_ = count
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan", ensure_min_samples=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, scaler was fitted with {self.n_features_in_}")
        X = np.where(np.isnan(X), self.mean_, X)
        return (X - self.mean_) / (self.scale_ + self.epsilon)


@dataclass(frozen=True, eq=False)
class FoldStats:
    """Per-modality feature means and standard deviations for one fold."""

    feature_names: dict  # Modality -> tuple[str]
    means: dict  # Modality -> ndarray
    stds: dict  # Modality -> ndarray
    epsilon: float = EPSILON
    patients: frozenset = field(default_factory=frozenset)

    def scaler(self, modality) -> MissingMeanScaler:
        m = parse_modality(modality)
        sc = MissingMeanScaler(epsilon=self.epsilon)
        sc.mean_ = self.means[m]
        sc.scale_ = self.stds[m]
        sc.n_features_in_ = len(self.feature_names[m])
        return sc

    def equals(self, other: "FoldStats") -> bool:
        if set(self.means) != set(other.means) or self.epsilon != other.epsilon:
            return False
        return all(
            self.feature_names[m] == other.feature_names[m]
            and self.means[m].tobytes() == other.means[m].tobytes()
            and self.stds[m].tobytes() == other.stds[m].tobytes()
            for m in self.means
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["modality", "feature", "mean", "std"])
            for m in MODALITIES:
                if m not in self.means:
                    continue
                for name, mu, sd in zip(self.feature_names[m], self.means[m], self.stds[m]):
                    writer.writerow([m.value, name, format_float(mu), format_float(sd)])

    @classmethod
    def from_csv(cls, path, epsilon: float = EPSILON) -> "FoldStats":
        names, means, stds = {}, {}, {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                m = parse_modality(row["modality"])
                names.setdefault(m, []).append(row["feature"])
                means.setdefault(m, []).append(float(row["mean"]))
                stds.setdefault(m, []).append(float(row["std"]))
        return cls(
            {m: tuple(v) for m, v in names.items()},
            {m: np.asarray(v) for m, v in means.items()},
            {m: np.asarray(v) for m, v in stds.items()},
            epsilon,
        )


def _table_dict(tables) -> dict:
    if isinstance(tables, ModalityTable):
        return {tables.modality: tables}
    if isinstance(tables, Mapping):
        return {parse_modality(k): v for k, v in tables.items()}
    return {t.modality: t for t in tables}


def fit_stats(tables, train_patients: Optional[Iterable[str]] = None, epsilon: float = EPSILON) -> FoldStats:
    """Fit imputation/standardization statistics on training rows only.

    When ``train_patients`` is given, rows of every other patient are ignored.
    """
    tables = _table_dict(tables)
    if train_patients is not None:
        train_patients = frozenset(train_patients)
        tables = {m: t.for_patients(train_patients) for m, t in tables.items()}
    else:
        train_patients = frozenset(p for t in tables.values() for p in t.patients)
    if not train_patients or all(len(t) == 0 for t in tables.values()):
        raise ValueError("cannot fit fold statistics on an empty training set")
    names, means, stds = {}, {}, {}
    for m, t in tables.items():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sc = MissingMeanScaler(epsilon).fit(t.values) if len(t) else None
        if sc is None or np.any(sc.n_samples_seen_ == 0):
            empty = t.feature_names if sc is None else [n for n, c in zip(t.feature_names, sc.n_samples_seen_) if c == 0]
            warnings.warn(
                f"{m.value}: no training values for {', '.join(empty)}; using mean=0, std=0",
                RuntimeWarning,
                stacklevel=2,
            )
        names[m] = t.feature_names
        means[m] = sc.mean_ if sc is not None else np.zeros(t.n_features)
        stds[m] = sc.scale_ if sc is not None else np.zeros(t.n_features)
    return FoldStats(names, means, stds, epsilon, train_patients)


def transform(table: ModalityTable, stats: FoldStats) -> ModalityTable:
    m = table.modality
    if m not in stats.means:
        raise SchemaError(f"fold statistics do not cover modality {m.value}")
    if tuple(table.feature_names) != tuple(stats.feature_names[m]):
        raise SchemaError(
            f"{m.value}: feature names {list(table.feature_names)} do not match fitted {list(stats.feature_names[m])}"
        )
    if len(table) == 0:
        return table
    return table.with_values(stats.scaler(m).transform(table.values))


def transform_all(tables, stats: FoldStats) -> dict:
    return {m: transform(t, stats) for m, t in _table_dict(tables).items()}
