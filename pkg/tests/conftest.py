import numpy as np
import pytest

from stemmed.models.database import EventDatabase
from stemmed.models.model import (CovariateTrack, Event, NetworkSpec, NodeId,
                                  NodeParams)
from stemmed.simulate import RECOVERY_GT


@pytest.fixture
def single_spec():
    return NetworkSpec(("A",), ("opioid",), np.zeros((1, 1)))


@pytest.fixture
def grid_spec():
    """2 communities x 2 drugs, communities 0.5 apart."""
    return NetworkSpec(("A", "B"), ("opioid", "stimulant"), np.array([[0.0, 0.5], [0.5, 0.0]]))


@pytest.fixture
def gt_params():
    return RECOVERY_GT


@pytest.fixture
def poisson_params():
    """Parameter block of a homogeneous Poisson node."""

    def build(gamma: float, p: int = 0, q: int = 0) -> NodeParams:
        return NodeParams(gamma=gamma, beta=np.zeros(p), alpha=0.0, omega=np.zeros(q), delta_k=1.0)

    return build


@pytest.fixture
def make_instance():
    """
    Factory of random small networks: (spec, tracks, db, params, horizon).
    Up to 3 covariate breakpoints per node, p = q = 1.
    """

    def build(seed: int, n_events: int = 20, n_communities: int = 2, n_drugs: int = 2, horizon: float = 10.0):
        rng = np.random.default_rng(seed)
        positions = rng.uniform(size=(n_communities, 2))
        distances = np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)
        spec = NetworkSpec(
            tuple(f"C{i}" for i in range(n_communities)),
            tuple(f"D{s}" for s in range(n_drugs)),
            distances,
        )
        tracks = {}
        for node in spec.nodes:
            inner = np.sort(rng.uniform(0.5, horizon - 0.5, size=rng.integers(0, 3)))
            breakpoints = np.concatenate([[0.0], inner])
            tracks[node] = CovariateTrack(breakpoints, rng.uniform(-1, 1, size=(len(breakpoints), 1)))
        events = []
        for t in np.sort(rng.uniform(0, horizon, size=n_events)):
            node = spec.node_at(int(rng.integers(spec.n_nodes)))
            others = {int(s) for s in np.flatnonzero(rng.uniform(size=n_drugs) < 0.4)}
            events.append(Event(float(t), node, (float(rng.uniform()),), others | {node.drug}))
        db = EventDatabase(spec, 1, events)
        params = {
            node: NodeParams(
                gamma=rng.uniform(0.2, 1.0),
                beta=[rng.uniform(-1, 1)],
                alpha=rng.uniform(0.2, 1.5),
                delta_g=rng.uniform(0.5, 3.0),
                omega=[rng.uniform(-1, 1)],
                delta_k=rng.uniform(0.5, 3.0),
            )
            for node in spec.nodes
        }
        return spec, tracks, db, params, horizon

    return build


@pytest.fixture
def self_event_db(single_spec):
    """One event at t=1 on the only node, zero-length features."""
    return EventDatabase(single_spec, 0, [Event(1.0, NodeId(0, 0))])
