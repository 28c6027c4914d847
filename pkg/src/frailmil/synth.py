"""Synthetic multimodal cohorts with planted, analytically known class signal.

Generative model, per patient and horizon ``h`` with class ``c`` in {0, 1, 2}::

    x_f = offset_f + scale_f * (z + (c - 1) * s * mask_f),   z ~ N(0, 1)

``mask_f`` is 1 on the leading ``signal_features[m]`` columns of modality ``m``
and 0 elsewhere; each cell is then deleted with probability ``missing_prob``.
Clinical values are emitted so that their change from baseline discretizes to
exactly ``c`` for both endpoints.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ._random import make_rng
from .cohort import (
    DEFAULT_MARGINS,
    HORIZONS,
    MODALITIES,
    DeltaClass,
    HorizonWindows,
    Task,
    compute_delta,
    discretize_delta,
    parse_modality,
)
from .hrv import DEFAULT_FS
from .ingest import MODALITY_FILES, ClinicalRecords, ModalityTable, write_clinical, write_modality_table

LEDGER_HEADER = [
    "patient_id", "horizon", "class",
    "n_phys", "n_sleep", "n_hrv",
    "missing_phys", "missing_sleep", "missing_hrv",
]  # fmt: skip


def _per_modality(value, cast=float) -> dict:
    if isinstance(value, Mapping):
        given = {parse_modality(k): cast(v) for k, v in value.items()}
        return {m: given.get(m, cast(0)) for m in MODALITIES}
    return {m: cast(value) for m in MODALITIES}


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 30
    n_features: Mapping = field(default_factory=lambda: {"phys": 12, "sleep": 8, "hrv": 10})
    instances: tuple = (5, 25)  # per modality and horizon, inclusive
    outside_window: tuple = (0, 3)  # extra instances outside both windows
    missing_prob: object = 0.10  # float or per-modality mapping
    class_prior: tuple = (1 / 3, 1 / 3, 1 / 3)
    signal: float = 2.0
    signal_features: Mapping = field(default_factory=lambda: {"phys": 4, "sleep": 4, "hrv": 4})
    seed: int = 1
    windows: HorizonWindows = HorizonWindows()

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        lo, hi = self.instances
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid instance range {self.instances}")
        if any(not 0 <= p <= 1 for p in self.missing.values()):
            raise ValueError("missing probabilities must lie in [0, 1]")
        prior = np.asarray(self.class_prior, dtype=float)
        if prior.shape != (3,) or np.any(prior < 0) or not math.isclose(prior.sum(), 1.0, abs_tol=1e-9):
            raise ValueError(f"class prior must be 3 non-negative numbers summing to 1, got {self.class_prior}")
        if self.signal < 0:
            raise ValueError("signal strength must be >= 0")
        for m in MODALITIES:
            if not 0 <= self.mask_counts[m] <= self.features[m]:
                raise ValueError(f"{m.value}: signal features exceed feature count")

    @property
    def features(self) -> dict:
        return _per_modality(self.n_features, int)

    @property
    def missing(self) -> dict:
        return _per_modality(self.missing_prob, float)

    @property
    def mask_counts(self) -> dict:
        return _per_modality(self.signal_features, int)

    def mask(self, modality) -> np.ndarray:
        m = parse_modality(modality)
        out = np.zeros(self.features[m])
        out[: self.mask_counts[m]] = 1.0
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_features"] = {m.value: v for m, v in self.features.items()}
        d["signal_features"] = {m.value: v for m, v in self.mask_counts.items()}
        d["missing_prob"] = {m.value: v for m, v in self.missing.items()}
        d["windows"] = {"m3": list(self.windows.m3), "m6": list(self.windows.m6)}
        return d


@dataclass
class SynthLedger:
    classes: dict = field(default_factory=dict)  # (patient, Horizon) -> DeltaClass
    shifts: dict = field(default_factory=dict)  # Modality -> per-feature shift for one class step
    counts: dict = field(default_factory=dict)  # (patient, Horizon, Modality) -> in-window instances
    missing: dict = field(default_factory=dict)  # (patient, Horizon, Modality) -> missing in-window cells

    def class_counts(self, horizon) -> tuple:
        vals = [c for (p, h), c in self.classes.items() if h == horizon]
        return tuple(sum(1 for v in vals if v == c) for c in DeltaClass)

    def instance_counts(self) -> dict:
        """Windowed instances per (modality, horizon, class), as in Table II layouts."""
        out = {(m, h, c): 0 for m in MODALITIES for h in HORIZONS for c in DeltaClass}
        for (p, h, m), n in self.counts.items():
            out[(m, h, self.classes[(p, h)])] += n
        return out

    def write(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LEDGER_HEADER)
            for (p, h), c in sorted(self.classes.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
                writer.writerow(
                    [p, h.value, int(c)]
                    + [self.counts[(p, h, m)] for m in MODALITIES]
                    + [self.missing[(p, h, m)] for m in MODALITIES]
                )


@dataclass
class SynthCohort:
    tables: dict  # Modality -> ModalityTable
    clinical: ClinicalRecords
    ledger: SynthLedger
    config: SynthConfig

    def write(self, out_dir) -> dict:
        """Write modality, clinical and ledger CSVs; returns name -> path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for m in MODALITIES:
            paths[m.value] = out / MODALITY_FILES[m]
            write_modality_table(self.tables[m], paths[m.value])
        paths["clinical"] = out / "clinical.csv"
        write_clinical(self.clinical, paths["clinical"])
        paths["ledger"] = out / "ledger.csv"
        self.ledger.write(paths["ledger"])
        return paths


# clinical value scales: (baseline low, baseline high)
_ENDPOINT_RANGE = {Task.FACIT: (20.0, 45.0), Task.HANDGRIP: (12.0, 30.0)}


def _draw_delta(rng, c: DeltaClass, r: float) -> float:
    # keep at least 0.5 away from the margins so one-decimal rounding cannot flip a class
    if c is DeltaClass.WORSENED:
        return -(r + rng.uniform(0.5, 5.0))
    if c is DeltaClass.IMPROVED:
        return r + rng.uniform(0.5, 5.0)
    return rng.uniform(-(r - 0.5), r - 0.5) if r > 0.5 else 0.0


def generate_cohort(config: SynthConfig = SynthConfig(), margins: Optional[Mapping] = None) -> SynthCohort:
    """Draw a cohort; fully determined by ``config`` (including its seed)."""
    margins = dict(DEFAULT_MARGINS if margins is None else margins)
    rng = make_rng(config.seed, "synth-cohort")
    feats = config.features
    offsets = {m: rng.uniform(0.0, 100.0, feats[m]) for m in MODALITIES}
    scales = {m: rng.uniform(1.0, 10.0, feats[m]) for m in MODALITIES}
    ledger = SynthLedger(shifts={m: config.signal * config.mask(m) for m in MODALITIES})
    rows = {m: [] for m in MODALITIES}
    clinical = ClinicalRecords()
    w = config.windows
    width = len(str(config.n_patients))
    outside_days = list(range(0, w.m3[0])) + list(range(w.m6[1] + 1, w.m6[1] + 31))
    epoch = dt.date(2023, 1, 2)

    for k in range(1, config.n_patients + 1):
        pid = f"P{k:0{width}d}"
        baseline = epoch + dt.timedelta(days=int(rng.integers(0, 365)))
        clinical.baselines[pid] = baseline
        classes = {h: DeltaClass(int(rng.choice(3, p=config.class_prior))) for h in HORIZONS}
        for h, c in classes.items():
            ledger.classes[(pid, h)] = c

        for task, r in margins.items():
            lo, hi = _ENDPOINT_RANGE[task]
            y_bl = round(float(rng.uniform(lo, hi)), 1)
            clinical.values[(pid, task, "BL")] = y_bl
            for h, c in classes.items():
                y_h = round(y_bl + _draw_delta(rng, c, r), 1)
                assert discretize_delta(compute_delta(y_h, y_bl), r) is c
                clinical.values[(pid, task, h.value)] = y_h

        for m in MODALITIES:
            p_miss = config.missing[m]
            mask = config.mask(m)
            for h in HORIZONS:
                lo, hi = w.interval(h)
                n = int(rng.integers(config.instances[0], config.instances[1] + 1))
                n = min(n, hi - lo + 1)
                days = np.sort(rng.choice(np.arange(lo, hi + 1), size=n, replace=False))
                z = rng.standard_normal((n, feats[m])) + (int(classes[h]) - 1) * config.signal * mask
                x = offsets[m] + scales[m] * z
                gone = rng.random(x.shape) < p_miss
                x[gone] = np.nan
                ledger.counts[(pid, h, m)] = n
                ledger.missing[(pid, h, m)] = int(gone.sum())
                rows[m] += [(pid, baseline + dt.timedelta(days=int(d)), xi) for d, xi in zip(days, x)]
            n_out = int(rng.integers(config.outside_window[0], config.outside_window[1] + 1))
            if n_out:
                days = rng.choice(outside_days, size=n_out, replace=False)
                x = offsets[m] + scales[m] * rng.standard_normal((n_out, feats[m]))
                x[rng.random(x.shape) < p_miss] = np.nan
                rows[m] += [(pid, baseline + dt.timedelta(days=int(d)), xi) for d, xi in zip(days, x)]

    tables = {}
    for m in MODALITIES:
        ordered = sorted(rows[m], key=lambda r: (r[0], r[1]))
        names = [f"{m.value}_f{j + 1:02d}" for j in range(feats[m])]
        values = np.array([r[2] for r in ordered]).reshape(len(ordered), feats[m])
        tables[m] = ModalityTable(m, names, [r[0] for r in ordered], [r[1] for r in ordered], values)
    return SynthCohort(tables, clinical, ledger, config)


def oracle_accuracy(config: SynthConfig, modalities=None, n_bags: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo Bayes-optimal balanced accuracy and its standard error.

    Simulates bags from the planted model with equal class frequencies and
    classifies each by maximum likelihood on the observed signal cells
    (equivalently, the likelihood ratio on their mean), which maximizes
    balanced accuracy. ``modalities`` restricts the evidence to a subset.
    """
    mods = MODALITIES if modalities is None else tuple(parse_modality(m) for m in modalities)
    rng = make_rng(seed, "oracle")
    labels = np.arange(n_bags) % 3
    n_obs = np.zeros(n_bags)
    lo, hi = config.instances
    for m in mods:
        k = config.mask_counts[m]
        n_inst = rng.integers(lo, hi + 1, size=n_bags)
        n_obs += rng.binomial(n_inst * k, 1.0 - config.missing[m])
    s = config.signal
    mu = s * (labels - 1.0)
    total = n_obs * mu + np.sqrt(n_obs) * rng.standard_normal(n_bags)
    class_means = s * (np.arange(3) - 1.0)
    loglik = total[:, None] * class_means[None, :] - 0.5 * n_obs[:, None] * class_means[None, :] ** 2
    preds = np.argmax(loglik, axis=1)
    recalls = np.array([np.mean(preds[labels == c] == c) for c in range(3)])
    counts = np.bincount(labels, minlength=3)
    stderr = float(np.sqrt(np.sum(recalls * (1 - recalls) / counts)) / 3.0)
    return float(recalls.mean()), stderr


def synthetic_ecg(
    duration: float,
    fs: float = DEFAULT_FS,
    mean_hr: float = 70.0,
    lf_amplitude: float = 0.04,
    hf_amplitude: float = 0.03,
    noise: float = 0.01,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """ECG-like trace (Gaussian P-QRS-T complexes) and its true R-peak indices.

    Beat-to-beat intervals are modulated at 0.1 Hz and 0.25 Hz with the given
    relative amplitudes.
    """
    rng = make_rng(seed, "synthetic-ecg")
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    beats = []
    time = 0.3
    base = 60.0 / mean_hr
    while time < duration - 0.3:
        beats.append(time)
        mod = 1.0 + lf_amplitude * np.sin(2 * np.pi * 0.1 * time) + hf_amplitude * np.sin(2 * np.pi * 0.25 * time)
        time += base * mod
    peaks = np.round(np.asarray(beats) * fs).astype(np.int64)
    x = np.zeros(n)
    for b in peaks / fs:
        for offset, width, amp in ((-0.2, 0.025, 0.1), (-0.03, 0.008, -0.12), (0.0, 0.010, 1.0), (0.03, 0.008, -0.2), (0.25, 0.04, 0.3)):
            x += amp * np.exp(-0.5 * ((t - b - offset) / width) ** 2)
    x += noise * rng.standard_normal(n)
    return x, peaks
