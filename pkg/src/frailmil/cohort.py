"""Core domain types: modalities, horizons, label derivation and window alignment."""

from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass
from typing import Optional

from .exceptions import ConfigError


class Modality(str, enum.Enum):
    PHYS = "phys"
    SLEEP = "sleep"
    HRV = "hrv"


# canonical concatenation order of modality blocks inside a bag
MODALITIES = (Modality.PHYS, Modality.SLEEP, Modality.HRV)

MODALITY_LETTER = {Modality.PHYS: "P", Modality.SLEEP: "S", Modality.HRV: "E"}


class Horizon(str, enum.Enum):
    M3 = "M3"
    M6 = "M6"


HORIZONS = (Horizon.M3, Horizon.M6)


class DeltaClass(enum.IntEnum):
    WORSENED = 0
    STABLE = 1
    IMPROVED = 2


class Task(str, enum.Enum):
    FACIT = "facit"
    HANDGRIP = "handgrip"


DEFAULT_MARGINS = {Task.FACIT: 5.0, Task.HANDGRIP: 2.0}


def parse_modality(value) -> Modality:
    if isinstance(value, Modality):
        return value
    try:
        return Modality(str(value).strip().lower())
    except ValueError:
        raise ConfigError(f"unknown modality {value!r}; expected one of phys, sleep, hrv") from None


def parse_horizon(value) -> Horizon:
    if isinstance(value, Horizon):
        return value
    try:
        return Horizon(str(value).strip().upper())
    except ValueError:
        raise ConfigError(f"unknown horizon {value!r}; expected M3 or M6") from None


def parse_task(value) -> Task:
    if isinstance(value, Task):
        return value
    try:
        return Task(str(value).strip().lower())
    except ValueError:
        raise ConfigError(f"unknown task {value!r}; expected facit or handgrip") from None


def subset_label(modalities) -> str:
    """Short label for a modality subset, e.g. ``P+S`` for phys and sleep."""
    mods = {parse_modality(m) for m in modalities}
    return "+".join(MODALITY_LETTER[m] for m in MODALITIES if m in mods)


def parse_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value).strip()[:10])


def days_from_baseline(d, baseline) -> int:
    """Signed whole days from the patient's baseline date to ``d``."""
    return (parse_date(d) - parse_date(baseline)).days


def compute_delta(y_h: float, y_bl: float) -> float:
    if not (math.isfinite(y_h) and math.isfinite(y_bl)):
        raise ValueError(f"non-finite endpoint value: follow-up={y_h!r}, baseline={y_bl!r}")
    return y_h - y_bl


def discretize_delta(delta: float, r: float) -> DeltaClass:
    """Map a change-from-baseline onto worsened/stable/improved with margin ``r``.

    The boundaries belong to the outer classes: ``delta == -r`` is worsened and
    ``delta == r`` is improved.
    """
    if not r > 0:
        raise ValueError(f"margin must be positive, got {r!r}")
    if delta <= -r:
        return DeltaClass.WORSENED
    if delta >= r:
        return DeltaClass.IMPROVED
    return DeltaClass.STABLE


@dataclass(frozen=True)
class HorizonWindows:
    """Inclusive day intervals (days from baseline) that feed each horizon."""

    m3: tuple[int, int] = (46, 135)
    m6: tuple[int, int] = (136, 225)

    def __post_init__(self):
        for name, (lo, hi) in (("M3", self.m3), ("M6", self.m6)):
            if lo > hi:
                raise ConfigError(f"{name} window has start {lo} after end {hi}")
        (a0, a1), (b0, b1) = self.m3, self.m6
        if a0 <= b1 and b0 <= a1:
            raise ConfigError(f"horizon windows overlap: M3={self.m3}, M6={self.m6}")

    def interval(self, horizon: Horizon) -> tuple[int, int]:
        return self.m3 if parse_horizon(horizon) is Horizon.M3 else self.m6

    def assign(self, tau: int) -> Optional[Horizon]:
        return assign_horizon(tau, self)


def assign_horizon(tau: int, windows: HorizonWindows) -> Optional[Horizon]:
    """Horizon whose window contains ``tau``, or None when the instance is excluded."""
    for horizon in HORIZONS:
        lo, hi = windows.interval(horizon)
        if lo <= tau <= hi:
            return horizon
    return None


@dataclass(frozen=True)
class InstanceRow:
    patient: str
    modality: Modality
    date: dt.date
    features: tuple  # floats, None where missing

    def __post_init__(self):
        if not self.patient:
            raise ValueError("patient id must be non-empty")


@dataclass(frozen=True)
class EndpointLabel:
    patient: str
    task: Task
    horizon: Horizon
    delta: float
    label: DeltaClass
