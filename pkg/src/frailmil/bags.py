"""Patient-horizon multimodal bags."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .cohort import (
    HORIZONS,
    MODALITIES,
    DeltaClass,
    Horizon,
    HorizonWindows,
    Task,
    parse_modality,
)
from .ingest import ModalityTable, horizon_of_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Bag:
    """Instances of one patient-horizon pair, one matrix per modality.

    A modality without windowed observations is kept as an empty ``(0, F_m)``
    matrix. Rows are in chronological order.
    """

    patient: str
    horizon: Horizon
    task: Task
    label: DeltaClass
    instances: dict = field(repr=False)  # Modality -> ndarray (N_m, F_m)
    dates: dict = field(default_factory=dict, repr=False)  # Modality -> tuple of dates

    @property
    def n_instances(self) -> int:
        return sum(x.shape[0] for x in self.instances.values())

    def counts(self) -> dict:
        return {m: x.shape[0] for m, x in self.instances.items()}

    @property
    def modalities(self) -> tuple:
        return tuple(m for m in MODALITIES if m in self.instances)

    def restrict(self, modalities) -> "Bag":
        keep = {parse_modality(m) for m in modalities}
        return Bag(
            self.patient,
            self.horizon,
            self.task,
            self.label,
            {m: x for m, x in self.instances.items() if m in keep},
            {m: d for m, d in self.dates.items() if m in keep},
        )

    def permuted(self, rng: np.random.Generator) -> "Bag":
        """Copy with rows shuffled independently inside each modality."""
        inst, dates = {}, {}
        for m, x in self.instances.items():
            order = rng.permutation(x.shape[0])
            inst[m] = x[order]
            if m in self.dates:
                dates[m] = tuple(self.dates[m][i] for i in order)
        return Bag(self.patient, self.horizon, self.task, self.label, inst, dates)


class BagList(list):
    """List of bags that also remembers labeled pairs dropped for having no instances."""

    def __init__(self, bags=(), dropped=()):
        super().__init__(bags)
        self.dropped = list(dropped)


def index_instances(tables, baselines: Mapping, windows: HorizonWindows) -> dict:
    """Row indices per (modality, patient, horizon), chronologically sorted."""
    index = {}
    for table in _tables(tables).values():
        groups = defaultdict(list)
        for i, (p, h) in enumerate(zip(table.patients, horizon_of_rows(table, baselines, windows))):
            if h is not None:
                groups[(p, h)].append(i)
        index[table.modality] = {
            key: np.asarray(sorted(rows, key=lambda i: table.dates[i]), dtype=np.int64)
            for key, rows in groups.items()
        }
    return index


def _tables(tables) -> dict:
    if isinstance(tables, ModalityTable):
        return {tables.modality: tables}
    if isinstance(tables, Mapping):
        return {parse_modality(k): v for k, v in tables.items()}
    return {t.modality: t for t in tables}


def build_bags(
    tables,
    labels,
    windows: HorizonWindows,
    baselines: Mapping,
    modalities=None,
    index: dict | None = None,
) -> BagList:
    """One bag per labeled (patient, horizon) with at least one windowed instance.

    ``tables`` should already be transformed with the current fold's
    statistics. ``modalities`` restricts which tables contribute (ablations).
    ``index`` may be a cached :func:`index_instances` result for the same
    tables' row layout.
    """
    tables = _tables(tables)
    mods = [m for m in MODALITIES if m in tables and (modalities is None or m in {parse_modality(x) for x in modalities})]
    if index is None:
        index = index_instances({m: tables[m] for m in mods}, baselines, windows)
    bags, dropped = [], []
    for lab in sorted(labels, key=lambda l: (l.patient, HORIZONS.index(l.horizon), l.task.value)):
        inst, dates = {}, {}
        for m in mods:
            t = tables[m]
            rows = index[m].get((lab.patient, lab.horizon), np.empty(0, dtype=np.int64))
            inst[m] = t.values[rows]
            dates[m] = tuple(t.dates[i] for i in rows)
        if sum(x.shape[0] for x in inst.values()) == 0:
            dropped.append(lab)
            continue
        bags.append(Bag(lab.patient, lab.horizon, lab.task, lab.label, inst, dates))
    if dropped:
        logger.info("dropped %d labeled patient-horizon pair(s) without instances", len(dropped))
    return BagList(bags, dropped)


def bag_statistics(bags) -> dict:
    """Instance counts keyed by (modality, horizon, class)."""
    stats = {(m, h, c): 0 for m in MODALITIES for h in HORIZONS for c in DeltaClass}
    for bag in bags:
        for m, x in bag.instances.items():
            stats[(m, bag.horizon, bag.label)] += x.shape[0]
    return stats


def write_bag_manifest(bags, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "horizon", "task", "label", "n_phys", "n_sleep", "n_hrv"])
        for b in bags:
            counts = b.counts()
            writer.writerow(
                [b.patient, b.horizon.value, b.task.value, int(b.label), *(counts.get(m, 0) for m in MODALITIES)]
            )
