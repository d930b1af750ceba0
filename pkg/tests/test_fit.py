import math

import numpy as np
import pytest

from stemmed.models.database import EventDatabase
from stemmed.models.fit import (DEFAULT_GRID, FitOptions, fit_network,
                                fit_node, grid_init, sample_init)
from stemmed.models.likelihood import LOG_FLOOR, node_loglik
from stemmed.models.model import Event, ModelVariant, NodeId, NodeParams
from stemmed.simulate import MarkModel, Scenario, simulate_scenario
from stemmed.utils.errors import InvalidInitError, InvalidInputError


@pytest.fixture
def poisson_history(single_spec):
    rng = np.random.default_rng(3)
    times = np.sort(rng.uniform(0, 50.0, size=40))
    return EventDatabase(single_spec, 0, [Event(float(t), NodeId(0, 0)) for t in times])


def test_poisson_mle(single_spec, poisson_history, poisson_params):
    result = fit_node(
        NodeId(0, 0), poisson_history, single_spec, None, 50.0, poisson_params(0.2),
        FitOptions(relative_tolerance=1e-10), ModelVariant.CONST,
    )
    assert result.ok
    assert result.params.gamma == pytest.approx(40 / 50.0, rel=1e-4)
    assert result.params.alpha == 0.0
    assert result.loglik >= result.init_loglik


def test_ascent_never_decreases(make_instance):
    spec, tracks, db, params, horizon = make_instance(4, n_events=30)
    u = spec.nodes[0]
    result = fit_node(u, db, spec, tracks, horizon, params[u], FitOptions(max_iterations=40))
    values = [value for _, value in result.trace]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert result.loglik == pytest.approx(node_loglik(u, result.params, spec, tracks, db, horizon), rel=1e-10)


def test_variant_restrictions_hold_after_fit(make_instance):
    spec, tracks, db, params, horizon = make_instance(6, n_events=30)
    u = spec.nodes[0]
    sepp = fit_node(u, db, spec, tracks, horizon, params[u], FitOptions(max_iterations=20), ModelVariant.SEPP)
    assert np.all(sepp.params.beta == 0) and np.all(sepp.params.omega == 0)
    mepp = fit_node(u, db, spec, tracks, horizon, params[u], FitOptions(max_iterations=20), ModelVariant.MEPP)
    assert mepp.params.arcs is not None and len(mepp.params.arcs) == spec.n_nodes


def test_sample_init_ranges_and_determinism():
    first = sample_init(17, p=2, q=3)
    assert first.to_dict() == sample_init(17, p=2, q=3).to_dict()
    assert 0 < first.gamma < 1
    assert 1 <= first.alpha <= 2
    assert 6 <= first.delta_g <= 18
    assert 10 <= first.delta_k <= 30
    assert first.p == 2 and first.q == 3
    assert np.all((first.beta >= 0) & (first.beta <= 1))


def test_grid_init(make_instance):
    assert (30.0, 5.0, 5.0) in DEFAULT_GRID
    spec, tracks, db, _, horizon = make_instance(1)
    u = spec.nodes[0]
    chosen = grid_init(u, db, spec, tracks, horizon, grid=[(2.0, 3.0, 4.0)], seed=5)
    assert (chosen.alpha, chosen.delta_k, chosen.delta_g) == (2.0, 3.0, 4.0)
    best = grid_init(u, db, spec, tracks, horizon, seed=5)
    assert node_loglik(u, best, spec, tracks, db, horizon) >= node_loglik(u, chosen, spec, tracks, db, horizon)
    with pytest.raises(InvalidInputError):
        grid_init(u, db, spec, tracks, horizon, grid=[])


def test_invalid_init_is_reported(single_spec):
    db = EventDatabase(single_spec, 1, [Event(1.0, NodeId(0, 0), (1.0,)), Event(2.0, NodeId(0, 0), (1.0,))])
    bad = NodeParams(1.0, alpha=1.0, omega=[800.0])
    with pytest.raises(InvalidInitError):
        fit_node(NodeId(0, 0), db, single_spec, None, 3.0, bad)
    results = fit_network(db, single_spec, None, 3.0, {NodeId(0, 0): bad})
    assert not results[NodeId(0, 0)].ok
    assert results[NodeId(0, 0)].params is bad


def test_node_without_events(grid_spec, poisson_params):
    db = EventDatabase(grid_spec, 0, [Event(1.0, NodeId(0, 0))])
    inits = {node: poisson_params(0.5) for node in grid_spec.nodes}
    results = fit_network(db, grid_spec, None, 2.0, inits, FitOptions(max_iterations=5), ModelVariant.CONST)
    assert results[NodeId(0, 0)].ok
    assert not results[NodeId(1, 1)].ok


def test_missing_inits(grid_spec):
    with pytest.raises(InvalidInputError):
        fit_network(EventDatabase(grid_spec), grid_spec, None, 1.0, {})


def test_parallel_matches_sequential(make_instance):
    spec, tracks, db, params, horizon = make_instance(12, n_events=30)
    opts = FitOptions(max_iterations=15, n_starts=2, seed=9)
    sequential = fit_network(db, spec, tracks, horizon, params, opts, workers=1)
    parallel = fit_network(db, spec, tracks, horizon, params, opts, workers=4)
    for node in spec.nodes:
        assert sequential[node].loglik == parallel[node].loglik
        assert sequential[node].params.to_dict() == parallel[node].params.to_dict()


def test_options_validation():
    with pytest.raises(InvalidInputError):
        FitOptions(backtracking=1.5)
    with pytest.raises(InvalidInputError):
        FitOptions(max_iterations=0)
    with pytest.raises(InvalidInputError):
        FitOptions(max_decay=1.0)


@pytest.fixture
def exciting_history(single_spec):
    truth = NodeParams(0.5, alpha=1.5, delta_k=3.0)
    scenario = Scenario(single_spec, {}, {NodeId(0, 0): truth}, MarkModel(n_features=0), 200.0, seed=1)
    return simulate_scenario(scenario, seed=21)


def test_alpha_released_from_floor(single_spec, exciting_history):
    stuck = NodeParams(0.5, alpha=1e-12, delta_k=900.0)
    result = fit_node(NodeId(0, 0), exciting_history, single_spec, None, 200.0, stuck, variant=ModelVariant.SEPP)
    assert result.params.alpha > 0.1
    assert "alpha" not in result.boundary
    assert result.params.delta_k < 900.0
    values = [value for _, value in result.trace]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_floored_alpha_is_not_converged(single_spec, poisson_history):
    start = NodeParams(0.5, alpha=1e-12, delta_k=900.0)
    opts = FitOptions(max_decay=50.0)
    result = fit_node(NodeId(0, 0), poisson_history, single_spec, None, 50.0, start, opts, ModelVariant.SEPP)
    assert result.params.delta_k <= 50.0 * (1 + 1e-12)
    if result.params.alpha <= math.exp(LOG_FLOOR) * (1 + 1e-9):
        assert "alpha" in result.boundary
    if result.boundary:
        assert not result.converged


def test_delta_g_kept_without_distant_sources(single_spec, exciting_history):
    start = NodeParams(0.5, alpha=1.0, delta_g=7.5, delta_k=5.0)
    result = fit_node(
        NodeId(0, 0), exciting_history, single_spec, None, 200.0, start, FitOptions(n_starts=3, seed=4)
    )
    assert result.params.delta_g == pytest.approx(7.5, rel=1e-12)
    assert result.params.alpha > 0.1


def test_grid_start_never_worse(make_instance):
    spec, tracks, db, params, horizon = make_instance(7, n_events=30)
    u = spec.nodes[0]
    plain = fit_node(u, db, spec, tracks, horizon, params[u], FitOptions(max_iterations=30))
    gridded = fit_node(u, db, spec, tracks, horizon, params[u], FitOptions(max_iterations=30, grid_start=True))
    assert gridded.loglik >= plain.loglik


def test_grid_init_ties_pick_fastest_spatial_decay(single_spec, exciting_history):
    chosen = grid_init(NodeId(0, 0), exciting_history, single_spec, None, 200.0, p=0, q=0)
    assert chosen.delta_g == max(delta_g for _, _, delta_g in DEFAULT_GRID)
