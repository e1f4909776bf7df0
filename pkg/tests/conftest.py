import numpy as np
import pytest

from stepfg import data_model as dm
from stepfg import synth
from stepfg.finegray import FitConfig
from stepfg.stepwise import fit_stepwise


def random_labels(rng, n, n_events=2, p_cens=0.3, ties=False):
    times = rng.exponential(10.0, n) + 0.1
    if ties:
        times = np.round(times) + 1.0
    events = rng.integers(1, n_events + 1, n)
    events[rng.random(n) < p_cens] = 0
    if not np.any(events == 1):
        events[0] = 1
    return times, events


@pytest.fixture(scope="session")
def small_cohort():
    cfg = synth.SynthConfig(n_subjects=500, dynamic_signal=True, seed=3)
    return cfg, synth.generate(cfg)


@pytest.fixture(scope="session")
def small_snapshots(small_cohort):
    _, ds = small_cohort
    train, val, test = dm.split_stratified(ds, seed=0)
    grid = list(range(6, 241))
    return (dm.build_snapshots(train), dm.build_snapshots(val, times=grid),
            dm.build_snapshots(test, times=grid))


FAST_FIT = FitConfig(learning_rates=(1e-3,), max_iterations=15, early_stop_patience=5,
                     hidden_dims=(16,), seed=0)


@pytest.fixture(scope="session")
def small_model(small_snapshots):
    tr, va, _ = small_snapshots
    return fit_stepwise(tr, va, 1, FAST_FIT, horizons=(24.0, 48.0, 72.0))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")
