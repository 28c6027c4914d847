"""Leave-one-subject-out evaluation and modality ablations."""

from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from ._random import make_rng
from .bags import build_bags, index_instances
from .cohort import (
    MODALITIES,
    DeltaClass,
    Horizon,
    HorizonWindows,
    Task,
    parse_horizon,
    parse_modality,
    parse_task,
    subset_label,
)
from .ingest import ClinicalRecords, build_labels, format_float, load_cohort_dir
from .metrics import balanced_accuracy, class_weights, macro_f1, weighted_f1
from .mil import ModelConfig, forward, init_model, train
from .preprocess import FoldStats, fit_stats, transform_all

logger = logging.getLogger(__name__)

ABLATION_SUBSETS = (
    (MODALITIES[0], MODALITIES[1]),
    (MODALITIES[0], MODALITIES[2]),
    (MODALITIES[1], MODALITIES[2]),
)

FOLD_HEADER = ["task", "horizon", "subset", "fold_patient", "balanced_accuracy", "macro_f1"]
SUMMARY_HEADER = [
    "task", "horizon", "subset",
    "balacc_mean", "balacc_std", "f1_mean", "f1_std",
    "balacc_pooled", "f1_pooled", "n_folds", "n_skipped",
]  # fmt: skip
ATTENTION_HEADER = ["patient", "horizon", "modality", "date", "alpha"]


@dataclass
class CohortData:
    """Raw (untransformed) modality tables plus labels and baseline dates."""

    tables: dict  # Modality -> ModalityTable
    labels: list
    baselines: dict
    windows: HorizonWindows = HorizonWindows()

    @classmethod
    def from_records(cls, tables, clinical: ClinicalRecords, windows=HorizonWindows(), margins=None) -> "CohortData":
        return cls(dict(tables), build_labels(clinical, margins), dict(clinical.baselines), windows)

    @classmethod
    def from_dir(cls, directory, windows=HorizonWindows(), margins=None) -> "CohortData":
        tables, clinical = load_cohort_dir(directory)
        return cls.from_records(tables, clinical, windows, margins)


def loso_folds(patients) -> list[tuple[str, list[str]]]:
    """One fold per patient: ``(held_out, everyone_else)`` in sorted patient order."""
    patients = sorted(set(patients))
    if len(patients) < 3:
        raise ValueError(f"LOSO needs at least 3 patients, got {len(patients)}")
    return [(p, [q for q in patients if q != p]) for p in patients]


def inner_split(pool, ratio: float = 0.8, seed: int = 0, labels: Optional[Mapping] = None):
    """Patient-wise train/validation split of a LOSO training pool.

    The validation part has ``max(1, round((1 - ratio) * len(pool)))``
    patients. With ``labels`` (patient -> class) covering all three classes
    the split is stratified by class.
    """
    pool = sorted(set(pool))
    if len(pool) < 2:
        raise ValueError("inner split needs at least 2 patients")
    n_val = max(1, int(round((1.0 - ratio) * len(pool))))
    n_val = min(n_val, len(pool) - 1)
    rng = make_rng(seed, "inner-split")
    classes = {} if labels is None else {p: int(labels[p]) for p in pool}
    if classes and len(set(classes.values())) == len(DeltaClass):
        by_class = {c: [p for p in pool if classes[p] == c] for c in sorted(set(classes.values()))}
        quota = {c: n_val * len(ps) / len(pool) for c, ps in by_class.items()}
        take = {c: int(np.floor(q)) for c, q in quota.items()}
        leftover = n_val - sum(take.values())
        for c in sorted(quota, key=lambda c: (-(quota[c] - take[c]), c))[:leftover]:
            take[c] += 1
        val = []
        for c, ps in by_class.items():
            val += [ps[i] for i in rng.permutation(len(ps))[: take[c]]]
    else:
        if labels is not None:
            warnings.warn("not every class is present in the pool; validation split is unstratified", RuntimeWarning, stacklevel=2)
        val = [pool[i] for i in rng.permutation(len(pool))[:n_val]]
    val_set = set(val)
    return [p for p in pool if p not in val_set], sorted(val_set)


@dataclass
class FoldResult:
    patient: str
    horizons: list
    labels: np.ndarray
    preds: np.ndarray
    probs: np.ndarray
    attention: list  # per bag: list of (modality, date, alpha)
    balanced_accuracy: float
    f1: float
    train_patients: list = field(default_factory=list)
    val_patients: list = field(default_factory=list)
    stats: Optional[FoldStats] = field(default=None, repr=False)
    class_weights: Optional[np.ndarray] = None
    history: list = field(default_factory=list, repr=False)
    model_digest: str = ""


@dataclass
class RunReport:
    task: Task
    horizon: Horizon
    subset: str
    folds: list  # FoldResult, sorted by patient
    skipped: list = field(default_factory=list)
    dropped_bags: int = 0

    def _fold_values(self, attr) -> np.ndarray:
        return np.array([getattr(f, attr) for f in self.folds], dtype=np.float64)

    @property
    def balacc_mean(self) -> float:
        return float(self._fold_values("balanced_accuracy").mean())

    @property
    def balacc_std(self) -> float:
        return float(self._fold_values("balanced_accuracy").std())

    @property
    def f1_mean(self) -> float:
        return float(self._fold_values("f1").mean())

    @property
    def f1_std(self) -> float:
        return float(self._fold_values("f1").std())

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        preds = np.concatenate([f.preds for f in self.folds])
        labels = np.concatenate([f.labels for f in self.folds])
        return preds, labels

    @property
    def balacc_pooled(self) -> float:
        return balanced_accuracy(*self.pooled())

    @property
    def f1_pooled(self) -> float:
        return macro_f1(*self.pooled())


def _digest(model) -> str:
    h = hashlib.sha256()
    for name, value in model.params.items():
        h.update(name.encode())
        h.update(value.tobytes())
    return h.hexdigest()


def _run_fold(k, patient, pool, data, task, horizon, mods, config, label_of, seed, index, weighted, f1_kind):
    train_p, val_p = inner_split(pool, 0.8, seed ^ k, labels=label_of)
    stats = fit_stats({m: data.tables[m] for m in mods}, train_p)
    tables = transform_all({m: data.tables[m] for m in mods}, stats)
    labels = [l for l in data.labels if l.task is task and l.horizon is horizon]
    bags = build_bags(tables, labels, data.windows, data.baselines, mods, index)
    train_set, val_set = set(train_p), set(val_p)
    train_bags = [b for b in bags if b.patient in train_set]
    val_bags = [b for b in bags if b.patient in val_set]
    test_bags = [b for b in bags if b.patient == patient]
    if not train_bags or not val_bags or not test_bags:
        return None
    y_train = [int(b.label) for b in train_bags]
    weights = class_weights(y_train) if weighted else np.ones(3)
    dims = {m: tables[m].n_features for m in mods}
    model = init_model(config, dims, seed=config.seed)
    best, history = train(model, train_bags, val_bags, config, weights)
    traces = [forward(best, b) for b in test_bags]
    probs = np.vstack([t.probs for t in traces])
    preds = probs.argmax(axis=1)
    y = np.array([int(b.label) for b in test_bags])
    attention = []
    for b, t in zip(test_bags, traces):
        rows = []
        for m, s in t.slices.items():
            rows += [(m, d, float(a)) for d, a in zip(b.dates[m], t.alpha[s])]
        attention.append(rows)
    f1 = weighted_f1 if f1_kind == "weighted" else macro_f1
    return FoldResult(
        patient,
        [b.horizon for b in test_bags],
        y,
        preds,
        probs,
        attention,
        balanced_accuracy(preds, y),
        f1(preds, y),
        train_p,
        val_p,
        stats,
        weights,
        history,
        _digest(best),
    )


def run_loso(
    data: CohortData,
    config: ModelConfig,
    task="handgrip",
    horizon="M6",
    modalities=None,
    jobs: int = 1,
    weighted: bool = True,
    f1: str = "macro",
) -> RunReport:
    """LOSO over every patient with a non-empty bag for ``(task, horizon)``.

    Per fold: fold statistics and class weights come from the inner training
    split only; the model early-stops on the validation split and predicts the
    held-out patient's bag(s). The global seed is ``config.seed``; the inner
    split of fold ``k`` uses ``config.seed ^ k``.
    """
    task, horizon = parse_task(task), parse_horizon(horizon)
    mods = tuple(m for m in MODALITIES if modalities is None or m in {parse_modality(x) for x in modalities})
    mods = tuple(m for m in mods if m in data.tables)
    if not mods:
        raise ValueError("no modality tables selected")
    labels = [l for l in data.labels if l.task is task and l.horizon is horizon]
    index = index_instances({m: data.tables[m] for m in mods}, data.baselines, data.windows)
    skeleton = build_bags({m: data.tables[m] for m in mods}, labels, data.windows, data.baselines, mods, index)
    label_of = {b.patient: int(b.label) for b in skeleton}
    folds = loso_folds(label_of)
    seed = int(config.seed)
    results = Parallel(n_jobs=jobs)(
        delayed(_run_fold)(k, p, pool, data, task, horizon, mods, config, label_of, seed, index, weighted, f1)
        for k, (p, pool) in enumerate(folds)
    )
    done = [r for r in results if r is not None]
    skipped = [p for (p, _), r in zip(folds, results) if r is None]
    if skipped:
        logger.warning("skipped %d fold(s) without training/validation bags: %s", len(skipped), skipped)
    return RunReport(task, horizon, subset_label(mods), done, skipped, len(skeleton.dropped))


def run_ablation(data: CohortData, config: ModelConfig, task="handgrip", horizon="M6", jobs: int = 1, **kwargs) -> list:
    """Same protocol and seeds on each modality pair (P+S, P+E, S+E)."""
    missing = [m.value for m in MODALITIES if m not in data.tables]
    if missing:
        raise ValueError(f"ablation needs all three modalities; missing {missing}")
    return [run_loso(data, config, task, horizon, subset, jobs, **kwargs) for subset in ABLATION_SUBSETS]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_fold_csv(reports: Sequence[RunReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FOLD_HEADER)
        for r in reports:
            for f in r.folds:
                writer.writerow([r.task.value, r.horizon.value, r.subset, f.patient, _fmt(f.balanced_accuracy), _fmt(f.f1)])


def write_summary_csv(reports: Sequence[RunReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for r in reports:
            writer.writerow(
                [
                    r.task.value,
                    r.horizon.value,
                    r.subset,
                    *(_fmt(v) for v in (r.balacc_mean, r.balacc_std, r.f1_mean, r.f1_std, r.balacc_pooled, r.f1_pooled)),
                    len(r.folds),
                    len(r.skipped),
                ]
            )


def write_attention_csv(reports: Sequence[RunReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ATTENTION_HEADER)
        for r in reports:
            for f in r.folds:
                for h, rows in zip(f.horizons, f.attention):
                    for m, d, a in rows:
                        writer.writerow([f.patient, h.value, m.value, d.isoformat(), format_float(a)])


def write_predictions_csv(reports: Sequence[RunReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "horizon", "subset", "patient", "label", "pred", "p_worsened", "p_stable", "p_improved"])
        for r in reports:
            for f in r.folds:
                for y, yhat, p in zip(f.labels, f.preds, f.probs):
                    writer.writerow([r.task.value, r.horizon.value, r.subset, f.patient, int(y), int(yhat), *(_fmt(v) for v in p)])
