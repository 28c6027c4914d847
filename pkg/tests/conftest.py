import datetime as dt

import pytest

from frailmil.cohort import DeltaClass, Horizon, Modality, Task
from frailmil.bags import Bag
from frailmil.mil import ModelConfig, init_model
from frailmil.synth import SynthConfig, generate_cohort

TINY = ModelConfig(embed_dim=4, encoder_hidden=5, attention_dim=3, max_epochs=3, patience=2, accumulate=2)


def random_bag(rng, dims, counts=None, label=0, patient="P1"):
    counts = counts or {m: int(rng.integers(1, 5)) for m in dims}
    inst = {m: rng.standard_normal((counts.get(m, 0), f)) for m, f in dims.items()}
    return Bag(patient, Horizon.M3, Task.HANDGRIP, DeltaClass(label), inst)


@pytest.fixture
def dims():
    return {Modality.PHYS: 3, Modality.SLEEP: 2, Modality.HRV: 4}


@pytest.fixture
def tiny_model(dims):
    return init_model(TINY, dims, seed=3)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SynthConfig(n_patients=8, instances=(3, 6), seed=5))


@pytest.fixture
def day():
    return dt.date(2024, 3, 1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
