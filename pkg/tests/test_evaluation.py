import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FAST_FIT
from oracles import cindex
from stepfg import data_model as dm
from stepfg import synth
from stepfg.evaluation import (cr_cindex, harrell_cindex, landmark_evaluate,
                               mean_cindex_over_times, subgroup_summary)
from stepfg.stepwise import fit_stepwise


def test_perfect_and_tied():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    d = np.ones(4, dtype=int)
    assert cr_cindex(-t, t, d, 1) == 1.0
    assert cr_cindex(t, t, d, 1) == 0.0
    assert cr_cindex(np.zeros(4), t, d, 1) == 0.5
    assert harrell_cindex(np.zeros(4), t, d, 1) == 0.5


def test_five_subject_fixture():
    # one censored, one competing event
    t = np.array([2.0, 5.0, 3.0, 1.0, 4.0])
    d = np.array([1, 1, 0, 2, 1])
    s = np.array([0.9, 0.1, 0.5, 0.7, 0.5])
    # anchors 0 (t=2): vs 1,2,3(competing),4 -> 4 pairs, all concordant
    # anchor 1 (t=5): vs 2(censored), 3(competing) -> 0.1 < 0.5, 0.7 -> 0 of 2
    # anchor 4 (t=4): vs 1, 2(censored, tie 0.5), 3 -> 1 + 0.5 + 0 = 1.5 of 3
    assert cr_cindex(s, t, d, 1) == (4 + 0 + 1.5) / 9
    assert cr_cindex(s, t, d, 1) == cindex(list(s), list(t), list(d), 1, "cr")


def test_six_subject_harrell_fixture():
    t = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    d = np.array([1, 2, 1, 0, 1, 2])
    s = np.array([3.0, 1.0, 2.0, 2.5, 0.5, 0.0])
    assert harrell_cindex(s, t, d, 1) == cindex(list(s), list(t), list(d), 1, "harrell")
    # the competing event at 2 precedes the event at 3: excluded by Harrell, kept by CR
    h_only = harrell_cindex(s[[1, 2]], t[[1, 2]], d[[1, 2]], 1)
    assert math.isnan(h_only)
    assert cr_cindex(s[[1, 2]], t[[1, 2]], d[[1, 2]], 1) == 1.0


def test_no_comparable_pairs_is_nan():
    assert math.isnan(cr_cindex([1.0, 2.0], [1.0, 2.0], [0, 2], 1))
    assert math.isnan(harrell_cindex([1.0], [1.0], [1], 1))


def test_coincide_without_competing_or_censoring():
    rng = np.random.default_rng(0)
    t, s = rng.exponential(size=30), rng.normal(size=30)
    d = np.ones(30, dtype=int)
    assert cr_cindex(s, t, d, 1) == harrell_cindex(s, t, d, 1)


def test_tau_truncation():
    t = np.array([1.0, 2.0, 3.0])
    d = np.array([1, 1, 1])
    s = np.array([3.0, 1.0, 2.0])
    assert cr_cindex(s, t, d, 1, tau=1.5) == 1.0
    assert cr_cindex(s, t, d, 1) == 2 / 3


def test_chunking_matches_oracle():
    rng = np.random.default_rng(5)
    n = 2500  # spans two chunks
    t = np.round(rng.exponential(10, n), 1) + 0.1
    d = rng.integers(0, 3, n)
    s = np.round(rng.normal(size=n), 1)
    num = den = 0.0
    for i in np.nonzero(d == 1)[0]:
        comp = (t[i] < t) | (d != 1)
        comp[i] = False
        den += comp.sum()
        num += (s[i] > s[comp]).sum() + 0.5 * (s[i] == s[comp]).sum()
    assert cr_cindex(s, t, d, 1) == pytest.approx(num / den, rel=1e-13)


fixture = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-3, 3), min_size=n, max_size=n),
    st.lists(st.integers(1, 8), min_size=n, max_size=n),
    st.lists(st.integers(0, 3), min_size=n, max_size=n),
    st.integers(1, 3)))


@settings(max_examples=200, deadline=None)
@given(fixture)
def test_brute_force_oracle(fx):
    s, t = np.array(fx[0], dtype=float), np.array(fx[1], dtype=float)
    d, k = np.array(fx[2]), fx[3]
    for fn, kind in ((cr_cindex, "cr"), (harrell_cindex, "harrell")):
        got, ref = fn(s, t, d, k), cindex(list(s), list(t), list(d), k, kind)
        assert (math.isnan(got) and math.isnan(ref)) or got == ref


@settings(max_examples=100, deadline=None)
@given(fixture)
def test_monotone_invariance_and_negation(fx):
    s, t = np.array(fx[0], dtype=float), np.array(fx[1], dtype=float)
    d, k = np.array(fx[2]), fx[3]
    base = cr_cindex(s, t, d, k)
    if math.isnan(base):
        return
    assert cr_cindex(np.exp(s) * 3 + 1, t, d, k) == base
    assert 0.0 <= base <= 1.0
    s_unique = s + np.arange(s.size) * 1e-3
    c = cr_cindex(s_unique, t, d, k)
    assert cr_cindex(-s_unique, t, d, k) == pytest.approx(1.0 - c, abs=1e-15)


def test_mean_cindex_over_times_skips_empty(small_snapshots):
    _, va, _ = small_snapshots
    scores = -va.residual_time
    per_t = [cr_cindex(scores[va.t == t], va.residual_time[va.t == t], va.event[va.t == t], 1)
             for t in (6.0, 12.0)]
    assert mean_cindex_over_times(scores, va, 1, (6, 12, 1000)) == np.mean(per_t)


def test_landmark_layout(small_model, small_snapshots):
    _, _, te = small_snapshots
    rows = landmark_evaluate(small_model, te, (6, 12, 24, 48))
    assert [r.t for r in rows] == [6.0, 12.0, 24.0, 48.0]
    ns = [r.n_at_risk for r in rows]
    assert ns == [int((te.t == t).sum()) for t in (6, 12, 24, 48)]
    for r in rows:
        assert set(r.thresholded) == {24.0, 48.0, 72.0}
        for v in (r.phase1, r.phase2, *r.thresholded.values()):
            assert math.isnan(v) or 0 <= v <= 1
        snap = te.at_time(r.t)
        assert r.phase1 == cr_cindex(small_model.phase1.score(snap), snap.residual_time,
                                     snap.event, 1)
        # at-risk only: every snapshot's subject is still event-free at t
        assert np.all(snap.residual_time > 0)
        assert r.thresholded_mean == pytest.approx(np.nanmean(list(r.thresholded.values())))


def test_landmark_at_risk_nonincreasing_when_monitoring_starts_early(small_model, small_snapshots):
    # the synthetic series start within the first 5 h, so the risk sets are nested
    _, _, te = small_snapshots
    ns = [r.n_at_risk for r in landmark_evaluate(small_model, te, (6, 12, 24, 48))]
    assert all(a >= b for a, b in zip(ns, ns[1:]))


def test_landmark_empty_time(small_model, small_snapshots):
    _, _, te = small_snapshots
    (row,) = landmark_evaluate(small_model, te, (10_000,))
    assert row.n_at_risk == 0 and math.isnan(row.phase1)


def test_subgroup_matches_groupby(small_model, small_snapshots):
    _, _, te = small_snapshots
    out = subgroup_summary(small_model, te, h=72.0, t_max=30.0)
    snaps = te.subset(te.t <= 30.0)
    frame = pd.DataFrame({"g": snaps.stratum, "t": snaps.t,
                          "cif": small_model.phase2.cif(snaps, 72.0),
                          "I": small_model.incremental_contribution(snaps, 72.0)})
    ref = frame.groupby(["g", "t"]).agg(cif=("cif", "mean"), I=("I", "mean"), n=("cif", "size"))
    got = [(g.group, t, c, i, n) for g in out for t, c, i, n in
           zip(g.t, g.mean_cif, g.mean_contribution, g.n)]
    assert len(got) == len(ref)
    for g, t, c, i, n in got:
        row = ref.loc[(g, t)]
        assert n == row["n"]
        assert c == pytest.approx(row["cif"], rel=1e-12)
        assert i == pytest.approx(row["I"], rel=1e-12, abs=1e-12)


def test_subgroup_single_stratum(small_model, small_snapshots):
    _, _, te = small_snapshots
    one = te.subset(te.stratum == te.stratum[0])
    assert len(subgroup_summary(small_model, one, h=72.0)) == 1


def test_subgroup_orders_planted_risk():
    # stratum 2 carries +1.5 on the log subhazard scale
    cfg = synth.SynthConfig(n_subjects=1500, beta1=(0.3, 0.0, 0.0, 1.5), seed=8)
    ds = synth.generate(cfg)
    tr, va, te = dm.split_stratified(ds, seed=0)
    grid = list(range(6, 73))
    model = fit_stepwise(dm.build_snapshots(tr), dm.build_snapshots(va, times=grid), 1, FAST_FIT,
                         horizons=(24.0, 48.0))
    low, high = subgroup_summary(model, dm.build_snapshots(te, times=grid), h=48.0, t_max=24.0)
    assert (low.group, high.group) == (1, 2)
    assert np.all(np.array(high.mean_cif) > np.array(low.mean_cif))
