"""CSV ingestion for modality tables, clinical endpoints and ECG recordings.

File layouts
------------
Modality table
    ``patient_id,date,<feature_1>,...,<feature_F>``; ISO dates, empty cell = missing.
Clinical records
    ``patient_id,baseline_date,task,timepoint,value``; task in {facit, handgrip},
    timepoint in {BL, M3, M6}. An empty ``value`` means the visit was not done.
ECG recording
    either ``patient_id,date,fs,sample`` (one row per sample) or a single column
    of samples with a ``<file>.json`` sidecar holding ``patient_id``, ``date``, ``fs``.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .cohort import (
    DEFAULT_MARGINS,
    HORIZONS,
    MODALITIES,
    DeltaClass,
    EndpointLabel,
    Horizon,
    HorizonWindows,
    InstanceRow,
    Modality,
    Task,
    assign_horizon,
    compute_delta,
    discretize_delta,
    parse_modality,
    parse_task,
)
from .exceptions import SchemaError
from .hrv import EcgRecording

logger = logging.getLogger(__name__)

TIMEPOINTS = ("BL", "M3", "M6")
CLINICAL_HEADER = ["patient_id", "baseline_date", "task", "timepoint", "value"]
ECG_HEADER = ["patient_id", "date", "fs", "sample"]


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float; NaN becomes an empty cell."""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


@dataclass(frozen=True, eq=False)
class ModalityTable:
    """All dated instances of one modality, stored column-wise.

    ``values`` has one row per instance and one column per feature, with NaN
    marking missing cells.
    """

    modality: Modality
    feature_names: tuple
    patients: tuple
    dates: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "modality", parse_modality(self.modality))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "dates", tuple(self.dates))
        values = np.asarray(self.values, dtype=np.float64).reshape(len(self.patients), len(self.feature_names))
        object.__setattr__(self, "values", values)
        if len(self.dates) != len(self.patients):
            raise SchemaError("patients and dates must have equal length")
        if any(not p for p in self.patients):
            raise SchemaError(f"{self.modality.value}: empty patient id")
        seen = {}
        for i, key in enumerate(zip(self.patients, self.dates)):
            if key in seen:
                raise SchemaError(
                    f"{self.modality.value}: duplicate (patient, date) {key[0]} {key[1]} at rows {seen[key]} and {i}"
                )
            seen[key] = i

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def __len__(self) -> int:
        return len(self.patients)

    def rows(self) -> Iterable[InstanceRow]:
        for p, d, v in zip(self.patients, self.dates, self.values):
            feats = tuple(None if math.isnan(x) else float(x) for x in v)
            yield InstanceRow(p, self.modality, d, feats)

    def patient_ids(self) -> list[str]:
        return sorted(set(self.patients))

    def mask_patients(self, patients) -> np.ndarray:
        keep = set(patients)
        return np.fromiter((p in keep for p in self.patients), dtype=bool, count=len(self))

    def subset(self, mask) -> "ModalityTable":
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        return ModalityTable(
            self.modality,
            self.feature_names,
            [self.patients[i] for i in idx],
            [self.dates[i] for i in idx],
            self.values[idx],
        )

    def for_patients(self, patients) -> "ModalityTable":
        return self.subset(self.mask_patients(patients))

    def with_values(self, values) -> "ModalityTable":
        return ModalityTable(self.modality, self.feature_names, self.patients, self.dates, values)

    def equals(self, other: "ModalityTable") -> bool:
        """Bit-exact equality, missing cells included."""
        return (
            self.modality == other.modality
            and self.feature_names == other.feature_names
            and self.patients == other.patients
            and self.dates == other.dates
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    @classmethod
    def from_rows(cls, modality, feature_names, rows: Iterable[InstanceRow]) -> "ModalityTable":
        rows = list(rows)
        values = np.array(
            [[np.nan if x is None else x for x in r.features] for r in rows], dtype=np.float64
        ).reshape(len(rows), len(feature_names))
        return cls(modality, feature_names, [r.patient for r in rows], [r.date for r in rows], values)


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise SchemaError(f"{where}: malformed date {text!r}") from None


def _parse_float(text: str, where: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(f"{where}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise SchemaError(f"{where}: non-finite value {text!r}")
    return value


def load_modality_table(path, modality) -> ModalityTable:
    modality = parse_modality(modality)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(header) < 2 or [h.strip() for h in header[:2]] != ["patient_id", "date"]:
            raise SchemaError(f"{path}: header must start with patient_id,date; got {header[:2]}")
        names = [h.strip() for h in header[2:]]
        patients, dates, values = [], [], []
        first_row = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise SchemaError(f"{where}: expected {len(header)} columns, got {len(row)}")
            pid = row[0].strip()
            if not pid:
                raise SchemaError(f"{where}: empty patient_id")
            date = _parse_date(row[1], where)
            key = (pid, date)
            if key in first_row:
                raise SchemaError(f"{where}: duplicate (patient, date) {pid} {date}, first seen at row {first_row[key]}")
            first_row[key] = lineno
            patients.append(pid)
            dates.append(date)
            values.append([_parse_float(c, f"{where} column {names[j]!r}") for j, c in enumerate(row[2:])])
    arr = np.array(values, dtype=np.float64).reshape(len(patients), len(names))
    return ModalityTable(modality, names, patients, dates, arr)


def write_modality_table(table: ModalityTable, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "date", *table.feature_names])
        for p, d, v in zip(table.patients, table.dates, table.values):
            writer.writerow([p, d.isoformat(), *(format_float(x) for x in v)])


@dataclass
class ClinicalRecords:
    baselines: dict = field(default_factory=dict)  # patient -> date
    values: dict = field(default_factory=dict)  # (patient, Task, timepoint) -> float

    def value(self, patient: str, task, timepoint: str) -> Optional[float]:
        return self.values.get((patient, parse_task(task), timepoint))

    def patients(self) -> list[str]:
        return sorted(self.baselines)


def load_clinical(path, required_patients: Iterable[str] = ()) -> ClinicalRecords:
    """Parse the clinical CSV.

    Every patient in ``required_patients`` (typically everyone appearing in a
    modality table) must have a baseline date.
    """
    path = Path(path)
    records = ClinicalRecords()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != CLINICAL_HEADER:
            raise SchemaError(f"{path}: header must be {','.join(CLINICAL_HEADER)}; got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(CLINICAL_HEADER):
                raise SchemaError(f"{where}: expected {len(CLINICAL_HEADER)} columns, got {len(row)}")
            pid, bl, task, tp, value = (c.strip() for c in row)
            if not pid:
                raise SchemaError(f"{where}: empty patient_id")
            if bl:
                date = _parse_date(bl, where)
                if records.baselines.setdefault(pid, date) != date:
                    raise SchemaError(f"{where}: conflicting baseline date for {pid}")
            if not task and not tp and not value:
                continue
            try:
                task = parse_task(task)
            except ValueError:
                raise SchemaError(f"{where}: unknown task {task!r}") from None
            if tp not in TIMEPOINTS:
                raise SchemaError(f"{where}: unknown timepoint {tp!r}")
            v = _parse_float(value, f"{where} column 'value'")
            if math.isnan(v):
                continue
            key = (pid, task, tp)
            if key in records.values:
                raise SchemaError(f"{where}: duplicate value for {pid} {task.value} {tp}")
            records.values[key] = v
    missing = sorted(set(required_patients) - set(records.baselines))
    if missing:
        raise SchemaError(f"{path}: no baseline date for patient(s) {', '.join(missing)}")
    return records


def write_clinical(records: ClinicalRecords, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLINICAL_HEADER)
        by_patient = defaultdict(list)
        for (pid, task, tp), v in records.values.items():
            by_patient[pid].append((task.value, TIMEPOINTS.index(tp), tp, v))
        for pid in sorted(records.baselines):
            bl = records.baselines[pid].isoformat()
            entries = sorted(by_patient.get(pid, []))
            if not entries:
                writer.writerow([pid, bl, "", "", ""])
            for task, _, tp, v in entries:
                writer.writerow([pid, bl, task, tp, format_float(v)])


def build_labels(clinical: ClinicalRecords, margins: Mapping | None = None) -> list[EndpointLabel]:
    """Discretized change-from-baseline labels for every complete (patient, task, horizon)."""
    margins = {parse_task(k): float(v) for k, v in (margins or DEFAULT_MARGINS).items()}
    for task, r in margins.items():
        if not r > 0:
            raise ValueError(f"margin for {task.value} must be positive, got {r}")
    labels = []
    for pid in clinical.patients():
        for task in Task:
            if task not in margins:
                continue
            y_bl = clinical.value(pid, task, "BL")
            if y_bl is None:
                continue
            for horizon in HORIZONS:
                y_h = clinical.value(pid, task, horizon.value)
                if y_h is None:
                    continue
                delta = compute_delta(y_h, y_bl)
                labels.append(EndpointLabel(pid, task, horizon, delta, discretize_delta(delta, margins[task])))
    return labels


def horizon_of_rows(table: ModalityTable, baselines: Mapping, windows: HorizonWindows) -> list:
    """Horizon assigned to each row of ``table`` (None when excluded or no baseline)."""
    out = []
    for p, d in zip(table.patients, table.dates):
        b = baselines.get(p)
        out.append(None if b is None else assign_horizon((d - b).days, windows))
    return out


@dataclass
class CohortSummary:
    patient_counts: dict = field(default_factory=dict)  # (Task, Horizon, DeltaClass) -> int
    instance_counts: dict = field(default_factory=dict)  # (Modality, Task, Horizon, DeltaClass) -> int

    def class_row(self, task, horizon) -> tuple[int, int, int, int]:
        counts = [self.patient_counts.get((parse_task(task), Horizon(horizon), c), 0) for c in DeltaClass]
        return (*counts, sum(counts))


def summarize_cohort(tables, labels, windows: HorizonWindows, baselines: Mapping | None = None) -> CohortSummary:
    """Table-I style patient counts and Table-II style windowed instance counts."""
    summary = CohortSummary()
    for task in Task:
        for horizon in HORIZONS:
            for c in DeltaClass:
                summary.patient_counts[(task, horizon, c)] = 0
                for m in MODALITIES:
                    summary.instance_counts[(m, task, horizon, c)] = 0
    label_of = {}
    for lab in labels:
        summary.patient_counts[(lab.task, lab.horizon, lab.label)] += 1
        label_of[(lab.patient, lab.task, lab.horizon)] = lab.label
    if baselines is None:
        return summary
    for table in _as_table_list(tables):
        horizons = horizon_of_rows(table, baselines, windows)
        for p, h in zip(table.patients, horizons):
            if h is None:
                continue
            for task in Task:
                c = label_of.get((p, task, h))
                if c is not None:
                    summary.instance_counts[(table.modality, task, h, c)] += 1
    return summary


def _as_table_list(tables) -> list[ModalityTable]:
    if isinstance(tables, Mapping):
        return list(tables.values())
    return list(tables)


def write_summary(summary: CohortSummary, class_path, instance_path) -> None:
    with Path(class_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "horizon", "worsened", "stable", "improved", "total"])
        for task in Task:
            for h in HORIZONS:
                writer.writerow([task.value, h.value, *summary.class_row(task, h)])
    with Path(instance_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        order = (DeltaClass.STABLE, DeltaClass.WORSENED, DeltaClass.IMPROVED)
        writer.writerow(
            ["modality", "task"] + [f"{c.name.lower()}_{h.value}" for c in order for h in HORIZONS]
        )
        for m in MODALITIES:
            for task in Task:
                writer.writerow(
                    [m.value, task.value]
                    + [summary.instance_counts[(m, task, h, c)] for c in order for h in HORIZONS]
                )


def filter_adherence(tables, min_days_per_week: float) -> dict:
    """Drop patients observed on fewer than ``min_days_per_week`` distinct days per week.

    The rate uses distinct dates across all modalities over each patient's
    observed span. Not applied unless requested.
    """
    tables = {t.modality: t for t in _as_table_list(tables)}
    days = defaultdict(set)
    for t in tables.values():
        for p, d in zip(t.patients, t.dates):
            days[p].add(d)
    keep = []
    for p, ds in days.items():
        weeks = max(1.0, ((max(ds) - min(ds)).days + 1) / 7.0)
        if len(ds) / weeks >= min_days_per_week:
            keep.append(p)
        else:
            logger.info("adherence filter drops patient %s (%.2f days/week)", p, len(ds) / weeks)
    return {m: t.for_patients(keep) for m, t in tables.items()}


MODALITY_FILES = {m: f"{m.value}.csv" for m in MODALITIES}


def load_cohort_dir(directory, modalities=MODALITIES) -> tuple[dict, ClinicalRecords]:
    """Load ``<modality>.csv`` files and ``clinical.csv`` from one directory."""
    directory = Path(directory)
    tables = {}
    for m in modalities:
        m = parse_modality(m)
        path = directory / MODALITY_FILES[m]
        if not path.exists():
            raise SchemaError(f"missing modality file {path}")
        tables[m] = load_modality_table(path, m)
    patients = set()
    for t in tables.values():
        patients.update(t.patients)
    clinical = load_clinical(directory / "clinical.csv", required_patients=patients)
    return tables, clinical


def load_ecg(path) -> list[EcgRecording]:
    """Read ECG recordings from ``path`` (either supported layout)."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header == ECG_HEADER:
            groups: dict = {}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                where = f"{path}:{lineno}"
                if len(row) != 4:
                    raise SchemaError(f"{where}: expected 4 columns, got {len(row)}")
                key = (row[0].strip(), _parse_date(row[1], where), _parse_float(row[2], where))
                sample = _parse_float(row[3], where)
                if math.isnan(key[2]) or math.isnan(sample):
                    raise SchemaError(f"{where}: empty fs or sample")
                groups.setdefault(key, []).append(sample)
            return [EcgRecording(p, d, np.asarray(s), fs) for (p, d, fs), s in groups.items()]
        if not sidecar.exists():
            raise SchemaError(f"{path}: header is not {','.join(ECG_HEADER)} and no sidecar {sidecar.name}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        samples = []
        rows = [header] + list(reader) if header and header != ["sample"] else list(reader)
        for lineno, row in enumerate(rows, start=1):
            if row:
                samples.append(_parse_float(row[0], f"{path}:{lineno}"))
        return [
            EcgRecording(
                str(meta["patient_id"]),
                _parse_date(str(meta["date"]), str(sidecar)),
                np.asarray(samples),
                float(meta.get("fs", 130.0)),
            )
        ]


def write_ecg(recording: EcgRecording, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ECG_HEADER)
        pid, date, fs = recording.patient, recording.date.isoformat(), format_float(recording.fs)
        for s in recording.samples:
            writer.writerow([pid, date, fs, format_float(s)])


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def list_files(directory, suffix=".csv") -> list[Path]:
    return sorted(Path(directory) / f for f in os.listdir(directory) if f.endswith(suffix))
