import math
from collections import Counter

import numpy as np
import pandas as pd
import pytest

from stemmed.coop import (CoopSchedule, DecayCurve, EditOperation,
                          ErrorInjection, compare_variants, inject_errors,
                          mspe, robustness_decay, run_online)
from stemmed.models.database import EventDatabase
from stemmed.models.fit import FitOptions
from stemmed.models.model import Event, ModelVariant, NodeId, NodeParams
from stemmed.simulate import build_scenario, simulate_scenario
from stemmed.utils.errors import InvalidInputError
from stemmed.utils.metrics import compute_mspe


def symmetric_difference(db1, db2):
    a, b = Counter(db1.events), Counter(db2.events)
    return sum(((a - b) + (b - a)).values())


@pytest.fixture
def history(grid_spec):
    rng = np.random.default_rng(0)
    events = [
        Event(float(t), grid_spec.node_at(int(rng.integers(4))), (float(rng.uniform()),))
        for t in np.sort(rng.uniform(0, 20, size=40))
    ]
    return EventDatabase(grid_spec, 1, events)


def test_compute_mspe_examples():
    assert compute_mspe([2, 5], [2, 5])[0] == 0.0
    assert compute_mspe([3], [5])[0] == 4.0
    assert compute_mspe([1, 3], [1, 5])[0] == 2.0
    with pytest.raises(InvalidInputError):
        compute_mspe([1, 2], [1])


def test_mspe_table():
    log = pd.DataFrame(
        {
            "variant": ["stemmed"] * 3 + ["sepp"],
            "horizon": [1, 1, 3, 1],
            "drug": ["x", "x", "x", "y"],
            "predicted": [1.0, 3.0, 2.0, 0.0],
            "realized": [1, 5, 2, 1],
        }
    )
    table = mspe(log, ("drug",)).set_index(["variant", "horizon", "drug"])
    assert table.loc[("stemmed", 1, "x"), "mspe"] == 2.0
    assert table.loc[("stemmed", 1, "x"), "n"] == 2
    assert table.loc[("stemmed", 3, "x"), "mspe"] == 0.0
    assert ("stemmed", 1, "y") not in table.index
    with pytest.raises(InvalidInputError):
        mspe(log.iloc[:0])


class TestInjectErrors:
    def test_no_operations(self, history):
        assert inject_errors(history, ErrorInjection((5.0, 10.0))) == history

    def test_add_one(self, history, grid_spec):
        event = Event(7.5, NodeId(1, 1), (0.4,))
        corrupted = inject_errors(history, ErrorInjection((5.0, 10.0), [EditOperation("add", events=(event,))]))
        assert symmetric_difference(history, corrupted) == 1
        assert len(history) == 40

    def test_add_outside_window(self, history):
        op = EditOperation("add", events=(Event(12.0, NodeId(0, 0), (0.1,)),))
        with pytest.raises(InvalidInputError):
            inject_errors(history, ErrorInjection((5.0, 10.0), [op]))

    def test_random_adds_stay_in_window(self, history):
        op = EditOperation("add", target_nodes=(NodeId(0, 1),), magnitude=3)
        corrupted = inject_errors(history, ErrorInjection((5.0, 10.0), [op], seed=4))
        extra = Counter(corrupted.events) - Counter(history.events)
        assert sum(extra.values()) == 3
        assert all(5.0 <= e.time <= 10.0 and e.node == NodeId(0, 1) for e in extra)

    def test_remove_node_records(self, history):
        v = NodeId(0, 0)
        injection = ErrorInjection((5.0, 10.0), [EditOperation("remove", target_nodes=(v,), magnitude=1.0)])
        corrupted = inject_errors(history, injection)
        for node in history.spec.nodes:
            kept = corrupted.node_events(node)
            if node == v:
                assert all(not injection.contains(e.time) for e in kept)
                assert [e for e in history.node_events(v) if not injection.contains(e.time)] == list(kept)
            else:
                assert kept == history.node_events(node)

    def test_modify_jitters_inside_window(self, history):
        injection = ErrorInjection((5.0, 10.0), [EditOperation("modify", magnitude=2.0)], seed=1)
        corrupted = inject_errors(history, injection)
        assert len(corrupted) == len(history)
        moved = Counter(corrupted.events) - Counter(history.events)
        assert moved and all(5.0 <= e.time <= 10.0 for e in moved)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            ErrorInjection((4.0, 4.0))
        with pytest.raises(InvalidInputError):
            EditOperation("rename")
        with pytest.raises(InvalidInputError):
            EditOperation("remove", magnitude=1.5)


class TestSchedule:
    def test_single_refit_when_refresh_covers_span(self):
        schedule = CoopSchedule(upload_period=5.0, refresh_period=30.0, start=10.0, end=40.0)
        assert schedule.refit_times() == [10.0]
        assert schedule.issue_times(10.0) == [10.0, 15.0, 20.0, 25.0, 30.0, 35.0]

    def test_cadence(self):
        schedule = CoopSchedule(upload_period=3.0, refresh_period=6.0, start=0.0, end=14.0)
        assert schedule.refit_times() == [0.0, 6.0, 12.0]
        assert schedule.issue_times(12.0) == [12.0]

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            CoopSchedule(upload_period=4.0, refresh_period=2.0)
        with pytest.raises(InvalidInputError):
            CoopSchedule(upload_period=1.0, refresh_period=2.0, horizons=(0,))


@pytest.fixture(scope="module")
def simulated():
    scenario = build_scenario(2, T=40.0, seed=1)
    return scenario, simulate_scenario(scenario, seed=3)


def test_online_log_structure(simulated):
    scenario, db = simulated
    schedule = CoopSchedule(upload_period=5.0, refresh_period=30.0, horizons=(1, 3), start=10.0, end=40.0)
    log = run_online(db, ModelVariant.SEPP, schedule, FitOptions(max_iterations=10), seed=2, tracks=scenario.tracks)
    assert set(log["refit_time"]) == {10.0}
    assert (log["data_cutoff"] == log["issue_time"]).all()
    assert (log["issue_time"] + log["horizon"] <= 40.0).all()
    assert not log["corrupted"].any()
    first = log[(log["issue_time"] == 10.0) & (log["horizon"] == 3)]
    for _, row in first.iterrows():
        node = scenario.spec.parse_label(row["node"])
        assert row["realized"] == db.count(node, 12.0, 13.0)


def test_correction_restores_clean_forecasts(simulated):
    scenario, db = simulated
    schedule = CoopSchedule(upload_period=5.0, refresh_period=10.0, horizons=(1, 3), start=10.0, end=40.0)
    node = scenario.spec.nodes[0]
    injection = ErrorInjection((12.0, 18.0), [EditOperation("add", events=(Event(15.0, node, (0.5,), {node.drug}),))])
    kwargs = dict(fit_options=FitOptions(max_iterations=10), seed=5, tracks=scenario.tracks)
    clean = run_online(db, ModelVariant.SEPP, schedule, **kwargs)
    dirty = run_online(db, ModelVariant.SEPP, schedule, injection=injection, **kwargs)
    assert list(dirty.loc[dirty["corrupted"], "issue_time"].unique()) == [15.0]
    after = clean["issue_time"] >= 20.0
    assert clean.loc[after, "predicted"].tolist() == dirty.loc[after, "predicted"].tolist()
    before = clean["issue_time"] < 12.0
    assert clean.loc[before, "predicted"].tolist() == dirty.loc[before, "predicted"].tolist()
    window = dirty["issue_time"] == 15.0
    assert clean.loc[window, "predicted"].tolist() != dirty.loc[window, "predicted"].tolist()


def test_const_variant_mspe_matches_poisson_variance(single_spec):
    rng = np.random.default_rng(8)
    rate, end = 2.0, 400.0
    times = np.sort(rng.uniform(0, end, size=rng.poisson(rate * end)))
    db = EventDatabase(single_spec, 0, [Event(float(t), NodeId(0, 0)) for t in times])
    schedule = CoopSchedule(upload_period=5.0, refresh_period=100.0, horizons=(1,), start=100.0, end=end)
    log = run_online(db, ModelVariant.CONST, schedule, FitOptions(relative_tolerance=1e-9), seed=1)
    table = mspe(log, ())
    n = len(log)
    sigma = math.sqrt((rate + 2 * rate**2) / n)
    assert abs(table["mspe"].iloc[0] - rate) <= 3 * sigma


@pytest.mark.slow
def test_stemmed_beats_constant_baselines_under_drift():
    variants = [ModelVariant.STEMMED, ModelVariant.SEPP, ModelVariant.MEPP]
    schedule = CoopSchedule(upload_period=3.0, refresh_period=12.0, horizons=(6, 12), start=24.0, end=96.0)
    wins = 0
    for seed in range(10):
        scenario = build_scenario(4, T=96.0, seed=seed, covariate_period=1.0, covariates="drift")
        for node in scenario.spec.nodes:
            scenario.params[node] = scenario.params[node].replace(gamma=0.4, beta=[1.5])
        log = compare_variants(scenario, variants, schedule, fit_options=FitOptions(max_iterations=500), seed=seed)
        table = mspe(log, ()).set_index(["variant", "horizon"])["mspe"]
        wins += all(
            table[("stemmed", h)] < min(table[("sepp", h)], table[("mepp", h)]) for h in schedule.horizons
        )
    assert wins >= 8


class TestRobustness:
    def test_identical_databases(self, single_spec, self_event_db):
        params = {NodeId(0, 0): NodeParams(0.5, alpha=1.0, delta_k=2.0)}
        curve = robustness_decay(
            NodeId(0, 0), params, single_spec, None, self_event_db, self_event_db, [1.5, 2.0, 4.0], window=(0.0, 1.0)
        )
        np.testing.assert_array_equal(curve.gaps, 0.0)

    def test_single_extra_event(self, single_spec):
        u = NodeId(0, 0)
        params = {u: NodeParams(0.5, alpha=1.2, omega=[0.4], delta_k=2.0)}
        base = EventDatabase(single_spec, 1, [Event(1.0, u, (0.3,)), Event(2.0, u, (0.9,))])
        perturbed = base.copy()
        perturbed.add(Event(3.0, u, (0.5,)))
        probes = 3.0 + np.linspace(0.1, 5.0, 25)
        curve = robustness_decay(u, params, single_spec, None, base, perturbed, probes, window=(3.0, 3.0))
        exact = 1.2 * math.exp(0.4 * 0.5) * np.exp(-2.0 * (probes - 3.0))
        np.testing.assert_allclose(curve.gaps, exact, rtol=1e-9)
        assert curve.anchor == probes[0]
        np.testing.assert_allclose(curve.envelope, exact, rtol=1e-9)
        assert curve.covered()
        late = robustness_decay(u, params, single_spec, None, base, perturbed, [3.0 + 20 / 2.0], window=(3.0, 3.0))
        assert late.gaps[0] < 1e-6

    def test_envelope_covers_network_perturbation(self, make_instance):
        spec, tracks, db, params, _ = make_instance(4, n_events=25)
        rng = np.random.default_rng(1)
        perturbed = db.copy()
        for t in (8.0, 9.0, 10.0):
            node = spec.node_at(int(rng.integers(spec.n_nodes)))
            perturbed.add(Event(t, node, (0.5,), {node.drug}))
        probes = np.linspace(10.0, 20.0, 31)
        for u in spec.nodes:
            curve = robustness_decay(u, params, spec, tracks, db, perturbed, probes, window=(8.0, 10.0))
            assert curve.anchor == probes[1]
            assert np.isnan(curve.envelope[0])
            later = probes > curve.anchor
            assert curve.covered()
            # no records after the window, so the gap follows the envelope exactly
            np.testing.assert_allclose(curve.gaps[later], curve.envelope[later], rtol=1e-9, atol=1e-12)

    def test_covered_checks_times_after_anchor(self):
        probes = np.array([1.0, 2.0, 3.0])
        envelope = np.array([1.0, 0.5, 0.25])
        tight = DecayCurve("temporal", probes, np.array([1.0, 0.5, 0.2]), envelope, 1.0, anchor=1.0)
        assert tight.covered()
        loose = DecayCurve("temporal", probes, np.array([1.0, 0.5, 0.3]), envelope, 1.0, anchor=1.0)
        assert not loose.covered()

    def test_spatial_gap_shrinks_with_distance(self, grid_spec):
        u, v = NodeId(0, 0), NodeId(1, 0)
        params = {node: NodeParams(0.5, alpha=1.0, delta_g=2.0, delta_k=1.0) for node in grid_spec.nodes}
        base = EventDatabase(grid_spec, 0, [Event(1.0, u), Event(2.0, v)])
        perturbed = base.copy()
        perturbed.add(Event(3.0, v))
        distances = [0.1, 0.5, 1.0, 2.0]
        curve = robustness_decay(
            u, params, grid_spec, None, base, perturbed, [4.0, 6.0], mode="spatial", node=v, distances=distances
        )
        assert curve.gaps.shape == (4, 2)
        assert np.all(np.diff(curve.gaps, axis=0) < 0)
        ratio = curve.gaps[1:] / curve.gaps[:-1]
        expected = np.exp(-2.0 * np.diff(distances))[:, None]
        np.testing.assert_allclose(ratio, np.broadcast_to(expected, ratio.shape), rtol=1e-10)

    def test_spatial_rejects_bad_perturbations(self, grid_spec):
        u = NodeId(0, 0)
        params = {node: NodeParams(0.5, alpha=1.0, delta_k=1.0) for node in grid_spec.nodes}
        base = EventDatabase(grid_spec, 0, [Event(1.0, u)])
        perturbed = base.copy()
        perturbed.add(Event(3.0, NodeId(1, 1)))
        with pytest.raises(InvalidInputError):
            robustness_decay(u, params, grid_spec, None, base, perturbed, [4.0], mode="spatial", node=NodeId(0, 1), distances=[1.0])
        with pytest.raises(InvalidInputError):
            robustness_decay(u, params, grid_spec, None, base, perturbed, [4.0], mode="spatial", node=NodeId(1, 0), distances=[1.0])
        with pytest.raises(InvalidInputError):
            robustness_decay(u, params, grid_spec, None, base, perturbed, [4.0], window=(0.0, 2.0))
