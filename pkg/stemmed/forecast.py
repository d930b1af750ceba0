import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from stemmed.models.database import EventDatabase
from stemmed.models.model import (Event, IntensityState, ModelVariant,
                                  NetworkSpec, NodeId, NodeParams, Tracks,
                                  freeze_tracks, guarded_exp)
from stemmed.simulate import Scenario, thinning_simulate
from stemmed.utils.errors import InvalidInputError
from stemmed.utils.utils import parallel_map, spawn_seeds

logger = logging.getLogger(__name__)

Mark = Tuple[Tuple[float, ...], frozenset]


@dataclass
class ForecastConfig:
    """
    Args:
        bin_width: width A of a forecast bin, in model time units.
        horizon: end time of the last bin.
        n_sample_paths: 0 for the deterministic expected-count mode, otherwise the number of sampled paths.
        seed: master seed; path seeds are spawned from it.
        start: forecast origin; defaults to the last event time of the history.
        freeze_theta: hold the social connectivity at its start value instead of
            updating it with synthetic events.
        workers: thread count for sample paths (None = all cores).
        show_progress: display a progress bar over sample paths.
    """

    bin_width: float = 1.0
    horizon: float = 1.0
    n_sample_paths: int = 0
    seed: int = 0
    start: Optional[float] = None
    freeze_theta: bool = False
    workers: Optional[int] = 1
    show_progress: bool = True

    def __post_init__(self):
        if not self.bin_width > 0:
            raise InvalidInputError(f"bin_width must be positive, got {self.bin_width}")
        if self.n_sample_paths < 0:
            raise InvalidInputError("n_sample_paths must be >= 0")
        if self.start is not None and not self.horizon > self.start:
            raise InvalidInputError(f"horizon {self.horizon} must lie after start {self.start}")

    def replace(self, **changes) -> "ForecastConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ForecastResult:
    nodes: Tuple[NodeId, ...]
    bin_edges: np.ndarray
    expected: np.ndarray
    sampled: Optional[np.ndarray] = None
    synthetic_events: List[Tuple[Event, ...]] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return len(self.bin_edges) - 1

    def point_forecast(self) -> np.ndarray:
        """Per node and bin: mean sampled count in sampling mode, expected count otherwise."""
        if self.sampled is not None and len(self.sampled):
            return self.sampled.mean(axis=0)
        return self.expected

    def to_frame(self, spec: NetworkSpec) -> pd.DataFrame:
        rows = []
        for k, node in enumerate(self.nodes):
            for b in range(self.n_bins):
                row = {
                    "node": spec.label(node),
                    "bin_start": float(self.bin_edges[b]),
                    "bin_end": float(self.bin_edges[b + 1]),
                    "expected": float(self.expected[k, b]),
                }
                if self.sampled is not None:
                    for path in range(self.sampled.shape[0]):
                        row[f"path_{path}"] = int(self.sampled[path, k, b])
                rows.append(row)
        return pd.DataFrame(rows)


def bin_edges(start: float, end: float, width: float) -> np.ndarray:
    """Edges start, start + A, ...; the last bin is cut at ``end``."""
    if not end > start:
        raise InvalidInputError(f"forecast end {end} must lie after its start {start}")
    n_bins = max(int(math.ceil((end - start) / width - 1e-9)), 1)
    edges = start + width * np.arange(n_bins + 1)
    edges[-1] = end
    return edges


class EmpiricalMarkModel:
    """
    Resamples historical marks: the node's own pool, else its community's, else every event.
    The receiving node's drug is always part of a resampled involved-drug set.
    """

    def __init__(self, db, allow_empty: bool = False):
        snapshot = db.snapshot()
        self.spec = snapshot.spec
        self.n_features = snapshot.n_features
        if len(snapshot) == 0 and not (allow_empty and self.n_features == 0):
            raise InvalidInputError("no historical marks to resample from")
        self._features = snapshot.features
        self._drugs = [e.drugs_involved for e in snapshot]
        node_index = snapshot.node_index
        communities = snapshot.communities
        self._node_pool = {
            k: np.flatnonzero(node_index == k) for k in np.unique(node_index)
        }
        self._community_pool = {
            c: np.flatnonzero(communities == c) for c in np.unique(communities)
        }
        self._global_pool = np.arange(len(snapshot))

    def pool(self, node: NodeId) -> np.ndarray:
        k = self.spec.index(node)
        if k in self._node_pool:
            return self._node_pool[k]
        if node.community in self._community_pool:
            return self._community_pool[node.community]
        return self._global_pool

    def _mark(self, row: int, node: NodeId) -> Mark:
        return tuple(self._features[row]), frozenset(self._drugs[row] | {node.drug})

    def sample(self, rng: np.random.Generator, node: NodeId, spec: NetworkSpec) -> Mark:
        pool = self.pool(node)
        if len(pool) == 0:
            return (), frozenset({node.drug})
        return self._mark(int(pool[rng.integers(len(pool))]), node)

    def sample_many(self, rng: np.random.Generator, node: NodeId, count: int) -> List[Mark]:
        pool = self.pool(node)
        if len(pool) == 0:
            return [((), frozenset({node.drug}))] * count
        return [self._mark(int(row), node) for row in pool[rng.integers(len(pool), size=count)]]

    def mean_gains(self, node: NodeId, omega: np.ndarray) -> np.ndarray:
        """E[eta_u(m)] for every receiver u (rows of ``omega``) over the source node's mark pool."""
        pool = self.pool(node)
        if len(pool) == 0:
            return np.ones(omega.shape[0])
        gains = guarded_exp(self._features[pool] @ omega.T, "mark gain")
        return gains.mean(axis=0)

    def mean_co_involvement(self, node: NodeId) -> np.ndarray:
        n_drugs = self.spec.n_drugs
        pool = self.pool(node)
        out = np.zeros((n_drugs, n_drugs))
        if len(pool) == 0:
            out[node.drug, node.drug] = 1.0
            return out
        for row in pool:
            mask = np.zeros(n_drugs)
            mask[list(self._drugs[row] | {node.drug})] = 1.0
            out += np.outer(mask, mask)
        return out / len(pool)


def sample_marks(u: NodeId, db, count: int, seed: int = 0) -> List[Mark]:
    """``count`` marks for node ``u`` drawn with replacement from the history."""
    if count < 0:
        raise InvalidInputError(f"count must be >= 0, got {count}")
    model = EmpiricalMarkModel(db)
    model.spec.check(u)
    return model.sample_many(np.random.default_rng(seed), u, count)


def bin_counts(events: Iterable[Event], spec: NetworkSpec, edges: np.ndarray) -> np.ndarray:
    """
    Per node and bin counts with half-open bins [a, b), the convention of realized counts.
    An event exactly at the last edge goes to the last bin.
    """
    counts = np.zeros((spec.n_nodes, len(edges) - 1), dtype=int)
    for event in events:
        b = int(np.searchsorted(edges, event.time, side="right")) - 1
        if b < 0:
            raise InvalidInputError(f"event at {event.time} precedes the first bin {edges[0]}")
        counts[spec.index(event.node), min(b, len(edges) - 2)] += 1
    return counts


def _require_params(params, spec: NetworkSpec) -> int:
    missing = [spec.label(node) for node in spec.nodes if node not in params]
    if missing:
        raise InvalidInputError(f"no fitted parameters for {missing}")
    return params[spec.nodes[0]].p


def _initial_state(db, params, spec, tracks, start, variant, freeze_theta) -> IntensityState:
    p = _require_params(params, spec)
    return IntensityState(
        params,
        spec,
        freeze_tracks(tracks, spec, start, p),
        variant,
        history=db.snapshot(start, inclusive=True),
        start=start,
        freeze_connectivity=freeze_theta,
    )


def bin_integral(
    u: NodeId,
    t: float,
    width: float,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> float:
    """Expected count of u on (t, t + width] with covariates and theta frozen at time t."""
    if not width > 0:
        raise InvalidInputError(f"bin width must be positive, got {width}")
    spec.check(u)
    state = _initial_state(db, params, spec, tracks, t, variant, freeze_theta=False)
    return float(state.integrated(width)[spec.index(u)])


def _expected_path(state: IntensityState, edges: np.ndarray, marks: EmpiricalMarkModel) -> np.ndarray:
    nodes = state.nodes
    gains = [marks.mean_gains(node, state.omega) for node in nodes]
    co = [marks.mean_co_involvement(node) for node in nodes]
    expected = np.zeros((len(nodes), len(edges) - 1))
    for b in range(len(edges) - 1):
        expected[:, b] = state.integrated(edges[b + 1] - edges[b])
        state.advance(edges[b + 1])
        for k, node in enumerate(nodes):
            if expected[k, b] > 0:
                state.add_mass(node, expected[k, b], gains[k], co[k])
    return expected


def _sampled_path(state: IntensityState, edges: np.ndarray, marks: EmpiricalMarkModel, seed: int):
    rng = np.random.default_rng(seed)
    spec = state.spec
    integrals = np.zeros((len(state.nodes), len(edges) - 1))
    counts = np.zeros_like(integrals, dtype=int)
    synthetic = []
    for b in range(len(edges) - 1):
        integrals[:, b] = state.integrated(edges[b + 1] - edges[b])
        counts[:, b] = rng.poisson(integrals[:, b])
        state.advance(edges[b + 1])
        for k, node in enumerate(state.nodes):
            for features, drugs in marks.sample_many(rng, node, int(counts[k, b])):
                event = Event(edges[b + 1], node, features, drugs)
                state.add_event(event)
                synthetic.append(event)
    logger.debug(f"path {seed}: {len(synthetic)} synthetic events on {spec.n_nodes} nodes")
    return integrals, counts, tuple(synthetic)


def multi_period_predict(
    db,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    config: ForecastConfig,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> ForecastResult:
    """
    Discretized forecast on bins of width A from ``config.start`` to ``config.horizon``.

    Sampling mode draws Poisson counts per node and bin from the integrated intensity and
    appends that many synthetic events, with resampled marks, at the bin's end time so they
    excite later bins. Expected mode propagates the expected counts as fractional event mass
    with mean mark gains, which is an approximation of the mean over sample paths.
    """
    variant = ModelVariant(variant)
    start = db.end_time if config.start is None else config.start
    if not config.horizon > start:
        raise InvalidInputError(
            f"forecast horizon {config.horizon} must lie after the history end {start}"
        )
    edges = bin_edges(start, config.horizon, config.bin_width)
    state = _initial_state(db, params, spec, tracks, start, variant, config.freeze_theta)
    marks = EmpiricalMarkModel(db.snapshot(start, inclusive=True), allow_empty=True)
    metadata = {
        "variant": variant.value,
        "start": float(start),
        "bin_width": config.bin_width,
        "freeze_theta": config.freeze_theta,
        "seed": config.seed,
    }
    if config.n_sample_paths == 0:
        expected = _expected_path(state, edges, marks)
        metadata.update(mode="expected", approximation=True)
        return ForecastResult(spec.nodes, edges, expected, metadata=metadata)

    seeds = spawn_seeds(config.seed, config.n_sample_paths)
    progress = tqdm(total=len(seeds), desc="forecast paths", disable=not config.show_progress)

    def run_path(seed):
        out = _sampled_path(state.copy(), edges, marks, seed)
        progress.update(1)
        return out

    paths = parallel_map(run_path, seeds, config.workers)
    progress.close()
    expected = np.mean([integrals for integrals, _, _ in paths], axis=0)
    sampled = np.stack([counts for _, counts, _ in paths])
    synthetic = [events for _, _, events in paths]
    metadata.update(mode="sampled", approximation=False, n_sample_paths=len(seeds))
    return ForecastResult(spec.nodes, edges, expected, sampled, synthetic, metadata)


def continuous_predict(
    db: EventDatabase,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    config: ForecastConfig,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> ForecastResult:
    """Continuous-time forecast: thinning from the forecast start with frozen covariates, binned per node."""
    variant = ModelVariant(variant)
    start = db.end_time if config.start is None else config.start
    if not config.horizon > start:
        raise InvalidInputError(
            f"forecast horizon {config.horizon} must lie after the history end {start}"
        )
    n_paths = max(config.n_sample_paths, 1)
    edges = bin_edges(start, config.horizon, config.bin_width)
    history = db.filter(lambda e: e.time <= start)
    p = _require_params(params, spec)
    scenario = Scenario(
        spec=spec,
        tracks=freeze_tracks(tracks, spec, start, p),
        params=dict(params),
        mark_model=EmpiricalMarkModel(history, allow_empty=True),
        horizon=config.horizon,
        seed=config.seed,
        variant=variant,
    )
    n_history = len(history)

    def run_path(seed):
        out = thinning_simulate(scenario, start, config.horizon, db=history, seed=seed)
        new_events = out.events[n_history:]
        return bin_counts(new_events, spec, edges), tuple(new_events)

    paths = parallel_map(run_path, spawn_seeds(config.seed, n_paths), config.workers)
    sampled = np.stack([counts for counts, _ in paths])
    metadata = {
        "variant": variant.value,
        "start": float(start),
        "bin_width": config.bin_width,
        "seed": config.seed,
        "mode": "continuous",
        "approximation": False,
        "n_sample_paths": n_paths,
    }
    return ForecastResult(
        spec.nodes,
        edges,
        sampled.mean(axis=0),
        sampled,
        [events for _, events in paths],
        metadata,
    )
