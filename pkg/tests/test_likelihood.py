import math

import numpy as np
import pytest
from scipy import integrate

from stemmed.models.database import EventDatabase
from stemmed.models.likelihood import (NodeLikelihoodContext, NodeObjective,
                                       compensator, compensator_parts,
                                       last_event_horizons, node_loglik,
                                       node_loglik_grad, pack_params,
                                       param_layout, rescaled_times,
                                       total_loglik, unpack_params)
from stemmed.models.model import (Event, ModelVariant, NodeId, NodeParams,
                                  intensity)
from stemmed.utils.errors import InvalidInputError, OverflowGuardError


def quad_compensator(u, T, params, spec, tracks, db):
    """Numerical integral of the intensity, split at every discontinuity."""
    cuts = {0.0, T}
    cuts.update(e.time for e in db if 0 < e.time < T)
    cuts.update(b for b in tracks[u].breakpoints if 0 < b < T)
    cuts = sorted(cuts)
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        value, _ = integrate.quad(
            lambda t: intensity(u, t, params, spec, tracks, db), a, b, epsabs=1e-13, epsrel=1e-12
        )
        total += value
    return total


@pytest.mark.parametrize("seed", range(4))
def test_compensator_matches_quadrature(make_instance, seed):
    spec, tracks, db, params, horizon = make_instance(seed, n_events=15)
    for u in spec.nodes:
        closed = compensator(u, horizon, params, spec, tracks, db)
        assert closed == pytest.approx(quad_compensator(u, horizon, params, spec, tracks, db), rel=1e-8)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(100, 200))
def test_compensator_matches_quadrature_on_many_instances(make_instance, seed):
    spec, tracks, db, params, horizon = make_instance(seed, n_events=15)
    u = spec.node_at(seed % spec.n_nodes)
    closed = compensator(u, horizon, params, spec, tracks, db)
    assert closed == pytest.approx(quad_compensator(u, horizon, params, spec, tracks, db), rel=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_loglik_matches_pointwise_evaluation(make_instance, seed):
    spec, tracks, db, params, horizon = make_instance(seed, n_events=15)
    for u in spec.nodes:
        log_terms = sum(
            math.log(intensity(u, e.time, params, spec, tracks, db)) for e in db if e.node == u
        )
        expected = log_terms - compensator(u, horizon, params, spec, tracks, db)
        assert node_loglik(u, params[u], spec, tracks, db, horizon) == pytest.approx(expected, rel=1e-10)


def assert_gradient_matches(spec, tracks, db, params, horizon, u, variant):
    block = params[u].replace(arcs=np.linspace(0.2, 0.8, spec.n_nodes))
    ctx = NodeLikelihoodContext(u, spec, tracks, db, horizon, block.p, variant)
    objective = NodeObjective(ctx, block.p, block.q)
    z = pack_params(block, variant, spec.n_nodes)
    _, grad = objective.value_and_grad(z)
    h = 1e-6
    for i in range(len(z)):
        step = np.zeros_like(z)
        step[i] = h
        numeric = (objective.value(z + step) - objective.value(z - step)) / (2 * h)
        assert grad[i] == pytest.approx(numeric, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_gradient_matches_finite_differences(make_instance, variant):
    spec, tracks, db, params, horizon = make_instance(5, n_events=20)
    u = spec.nodes[1]
    assert_gradient_matches(spec, tracks, db, params, horizon, u, variant)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(200, 250))
def test_gradient_matches_finite_differences_on_many_instances(make_instance, seed):
    spec, tracks, db, params, horizon = make_instance(seed, n_events=20)
    variant = list(ModelVariant)[seed % len(ModelVariant)]
    assert_gradient_matches(spec, tracks, db, params, horizon, spec.node_at(seed % spec.n_nodes), variant)


def test_pack_unpack(gt_params):
    for variant in (ModelVariant.STEMMED, ModelVariant.MEPP):
        layout = param_layout(gt_params.p, gt_params.q, variant, 3)
        z = pack_params(gt_params, variant, 3)
        assert len(z) == layout.size
        again = unpack_params(z, layout, variant)
        assert again.gamma == pytest.approx(gt_params.gamma)
        assert again.delta_k == pytest.approx(gt_params.delta_k)
        np.testing.assert_allclose(again.omega, gt_params.omega)


def test_decomposes_over_nodes(make_instance):
    spec, tracks, db, params, horizon = make_instance(2)
    parts = [node_loglik(u, params[u], spec, tracks, db, horizon) for u in spec.nodes]
    assert total_loglik(params, spec, tracks, db, horizon) == pytest.approx(sum(parts), rel=1e-12)


def poisson_db(single_spec, times):
    return EventDatabase(single_spec, 0, [Event(t, NodeId(0, 0)) for t in times])


def test_poisson_closed_form(single_spec, poisson_params):
    db = poisson_db(single_spec, [0.5, 1.5, 2.0, 4.0])
    params_u = poisson_params(0.8)
    T = 5.0
    value = node_loglik(NodeId(0, 0), params_u, single_spec, None, db, T)
    assert value == pytest.approx(4 * math.log(0.8) - 0.8 * T, rel=1e-12)
    grad = node_loglik_grad(NodeId(0, 0), params_u, single_spec, None, db, T)
    assert grad[0] == pytest.approx(4 - 0.8 * T, rel=1e-12)


def test_events_after_horizon_are_ignored(single_spec, poisson_params):
    db = poisson_db(single_spec, [0.5, 1.5, 7.0])
    value = node_loglik(NodeId(0, 0), poisson_params(1.0), single_spec, None, db, 5.0)
    assert value == pytest.approx(-5.0)


def test_single_event_closed_form(single_spec, self_event_db):
    gamma, alpha, delta_k, T = 0.5, 1.2, 2.0, 3.0
    params_u = NodeParams(gamma, alpha=alpha, delta_g=4.0, delta_k=delta_k)
    expected = math.log(gamma) - gamma * T - alpha * (1 - math.exp(-delta_k * (T - 1.0))) / delta_k
    assert node_loglik(NodeId(0, 0), params_u, single_spec, None, self_event_db, T) == pytest.approx(expected, rel=1e-12)


def test_compensator_parts_are_increments(make_instance):
    spec, tracks, db, params, horizon = make_instance(8)
    u = spec.nodes[0]
    base, trig = compensator_parts(u, 3.0, 7.0, params, spec, tracks, db)
    full = compensator(u, 7.0, params, spec, tracks, db)
    head = compensator(u, 3.0, params, spec, tracks, db)
    assert base >= 0 and trig >= 0
    assert base + trig == pytest.approx(full - head, rel=1e-10)
    with pytest.raises(InvalidInputError):
        compensator_parts(u, 7.0, 3.0, params, spec, tracks, db)


def test_compensator_nondecreasing(make_instance):
    spec, tracks, db, params, horizon = make_instance(9)
    u = spec.nodes[2]
    values = [compensator(u, T, params, spec, tracks, db) for T in np.linspace(0.5, horizon, 12)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_rescaled_times_of_poisson(single_spec, poisson_params):
    times = [0.5, 1.5, 2.0, 4.0]
    db = poisson_db(single_spec, times)
    params = {NodeId(0, 0): poisson_params(0.3)}
    np.testing.assert_allclose(rescaled_times(NodeId(0, 0), 5.0, params, single_spec, None, db), 0.3 * np.array(times))


def test_last_event_horizons(grid_spec):
    db = EventDatabase(grid_spec, 0, [Event(2.0, NodeId(0, 0)), Event(4.0, NodeId(0, 0))])
    with pytest.raises(InvalidInputError):
        last_event_horizons(db, grid_spec)
    horizons = last_event_horizons(db, grid_spec, fallback=10.0)
    assert horizons[NodeId(0, 0)] == 4.0
    assert horizons[NodeId(1, 1)] == 10.0


def test_overflow_guard(single_spec, self_event_db):
    params_u = NodeParams(1.0, alpha=1.0, delta_k=1.0)
    ok = node_loglik(NodeId(0, 0), params_u, single_spec, None, self_event_db, 2.0)
    assert math.isfinite(ok)
    spec_db = EventDatabase(single_spec, 1, [Event(1.0, NodeId(0, 0), (1.0,))])
    with pytest.raises(OverflowGuardError):
        node_loglik(NodeId(0, 0), params_u.replace(omega=[800.0]), single_spec, None, spec_db, 2.0)


def test_rejects_bad_horizon(single_spec, self_event_db):
    with pytest.raises(InvalidInputError):
        node_loglik(NodeId(0, 0), NodeParams(1.0), single_spec, None, self_event_db, 0.0)
