import numpy as np
import pytest

from frailmil.cohort import Modality, Task, compute_delta, discretize_delta
from frailmil.ingest import build_labels, load_cohort_dir
from frailmil.synth import SynthConfig, generate_cohort, oracle_accuracy


def test_deterministic():
    a, b = generate_cohort(SynthConfig(n_patients=5, seed=9)), generate_cohort(SynthConfig(n_patients=5, seed=9))
    for m in a.tables:
        assert a.tables[m].equals(b.tables[m])
    assert a.clinical.values == b.clinical.values
    c = generate_cohort(SynthConfig(n_patients=5, seed=10))
    assert not a.tables[Modality.PHYS].equals(c.tables[Modality.PHYS])


def test_deltas_reproduce_ledger(small_cohort):
    margins = {Task.FACIT: 5.0, Task.HANDGRIP: 2.0}
    for (pid, h), c in small_cohort.ledger.classes.items():
        for task, r in margins.items():
            y_bl = small_cohort.clinical.value(pid, task, "BL")
            y_h = small_cohort.clinical.value(pid, task, h.value)
            assert discretize_delta(compute_delta(y_h, y_bl), r) is c
    assert len(build_labels(small_cohort.clinical)) == 2 * len(small_cohort.ledger.classes)


def test_written_files_match_ledger(tmp_path, small_cohort):
    paths = small_cohort.write(tmp_path)
    assert sorted(paths) == ["clinical", "hrv", "ledger", "phys", "sleep"]
    tables, clinical = load_cohort_dir(tmp_path)
    for m, t in tables.items():
        assert t.equals(small_cohort.tables[m])
    rows = (tmp_path / "ledger.csv").read_text().splitlines()
    assert len(rows) == 1 + len(small_cohort.ledger.classes)


def test_fully_missing_modality():
    cohort = generate_cohort(SynthConfig(n_patients=4, missing_prob={"phys": 0.0, "sleep": 1.0, "hrv": 0.0}))
    assert np.isnan(cohort.tables[Modality.SLEEP].values).all()
    assert not np.isnan(cohort.tables[Modality.PHYS].values).any()


def test_planted_shift_visible_in_signal_features():
    cfg = SynthConfig(n_patients=60, signal=2.0, missing_prob=0.0, seed=3)
    cohort = generate_cohort(cfg)
    t = cohort.tables[Modality.PHYS]
    bl = cohort.clinical.baselines
    w = cfg.windows
    z = {c: [] for c in range(3)}
    for p, d, x in zip(t.patients, t.dates, t.values):
        h = w.assign((d - bl[p]).days)
        if h is not None:
            z[int(cohort.ledger.classes[(p, h)])].append(x)
    means = {c: np.mean(v, axis=0) for c, v in z.items()}
    assert np.all(means[2][:4] > means[1][:4]) and np.all(means[1][:4] > means[0][:4])


@pytest.mark.parametrize("bad", [dict(n_patients=0), dict(missing_prob=1.5), dict(signal=-1), dict(instances=(5, 2))])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)


def test_oracle_bounds():
    null, se = oracle_accuracy(SynthConfig(signal=0.0), n_bags=6000)
    assert abs(null - 1 / 3) < 4 * se + 0.01
    strong, _ = oracle_accuracy(SynthConfig(signal=3.0, instances=(10, 25)))
    assert strong >= 0.99
    weak_all, _ = oracle_accuracy(SynthConfig(signal=0.3))
    weak_one, _ = oracle_accuracy(SynthConfig(signal=0.3), modalities=["sleep"])
    assert weak_one < weak_all
