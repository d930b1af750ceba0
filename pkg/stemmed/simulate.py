import logging
import math
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from stemmed.models.database import EventDatabase
from stemmed.models.fit import FitOptions, fit_node, grid_init, sample_init
from stemmed.models.model import (CovariateTrack, Event, IntensityState,
                                  ModelVariant, NetworkSpec, NodeId,
                                  NodeParams)
from stemmed.utils.errors import InvalidInputError, StemmedError
from stemmed.utils.metrics import param_items, recovery_summary
from stemmed.utils.utils import derive_seed, parallel_map, spawn_seeds

logger = logging.getLogger(__name__)

# ground truth of the node of interest in the recovery study
RECOVERY_GT = NodeParams(
    gamma=0.77, beta=[0.8], alpha=1.45, delta_g=8.82, omega=[0.85], delta_k=14.66
)
COVARIATE_KINDS = ("iid", "drift")


class MarkSampler(Protocol):
    def sample(self, rng: np.random.Generator, node: NodeId, spec: NetworkSpec) -> Tuple[Tuple[float, ...], frozenset]:
        ...


@dataclass
class MarkModel:
    """Features ~ U(low, high)^q; each other drug joins the involved set with ``co_involvement``."""

    n_features: int = 1
    co_involvement: float = 0.2
    feature_low: float = 0.0
    feature_high: float = 1.0

    def __post_init__(self):
        if self.n_features < 0 or not 0 <= self.co_involvement <= 1:
            raise InvalidInputError("invalid mark model settings")

    def sample(self, rng: np.random.Generator, node: NodeId, spec: NetworkSpec):
        features = tuple(rng.uniform(self.feature_low, self.feature_high, size=self.n_features))
        joins = rng.uniform(size=spec.n_drugs) < self.co_involvement
        joins[node.drug] = True
        return features, frozenset(np.flatnonzero(joins).tolist())

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "co_involvement": self.co_involvement,
            "feature_low": self.feature_low,
            "feature_high": self.feature_high,
        }


@dataclass
class Scenario:
    spec: NetworkSpec
    tracks: Dict[NodeId, CovariateTrack]
    params: Dict[NodeId, NodeParams]
    mark_model: MarkSampler
    horizon: float
    seed: int = 0
    variant: ModelVariant = ModelVariant.STEMMED

    def __post_init__(self):
        blocks = [self.params.get(node) for node in self.spec.nodes]
        if any(b is None for b in blocks):
            raise InvalidInputError("scenario needs parameters for every node")
        p, q = blocks[0].p, blocks[0].q
        if any(b.p != p or b.q != q for b in blocks):
            raise InvalidInputError("all nodes must share covariate and mark dimensions")
        for node in self.spec.nodes:
            track = self.tracks.get(node)
            if track is None and p:
                raise InvalidInputError(f"no covariate track for {self.spec.label(node)}")
            if track is not None and track.dim != p:
                raise InvalidInputError(f"covariate track of {self.spec.label(node)} has dimension {track.dim}, expected {p}")
        n_features = getattr(self.mark_model, "n_features", q)
        if n_features != q:
            raise InvalidInputError(f"mark model draws {n_features} features, omega has {q}")

    @property
    def p(self) -> int:
        return self.params[self.spec.nodes[0]].p

    @property
    def q(self) -> int:
        return self.params[self.spec.nodes[0]].q


def grid_shape(n_nodes: int) -> Tuple[int, int]:
    """(communities, drugs) factorization of ``n_nodes`` closest to square, communities >= drugs."""
    if n_nodes < 1:
        raise InvalidInputError(f"n_nodes must be >= 1, got {n_nodes}")
    drugs = max(d for d in range(1, math.isqrt(n_nodes) + 1) if n_nodes % d == 0)
    return n_nodes // drugs, drugs


def build_scenario(
    n_nodes: int,
    T: float = 101.0,
    seed: int = 0,
    p: int = 1,
    q: int = 1,
    covariate_period: float = 10.0,
    co_involvement: float = 0.2,
    covariates: str = "iid",
) -> Scenario:
    """
    Synthetic network: communities uniform in the unit square with Euclidean distances and
    parameters from ``sample_init``. Covariates change every ``covariate_period``:
    ``"iid"`` redraws them from U(0, 1), ``"drift"`` climbs a staircase from U(0, 0.5)
    by a node-specific total rise drawn from U(1, 2) between the first and last breakpoint.
    """
    if covariates not in COVARIATE_KINDS:
        raise InvalidInputError(f"covariates must be one of {COVARIATE_KINDS}, got {covariates!r}")
    n_communities, n_drugs = grid_shape(n_nodes)
    rng = np.random.default_rng(seed)
    positions = rng.uniform(size=(n_communities, 2))
    distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    spec = NetworkSpec(
        communities=tuple(f"C{i}" for i in range(n_communities)),
        drugs=tuple(f"D{s}" for s in range(n_drugs)),
        distances=distances,
    )
    breakpoints = np.arange(0.0, max(T, covariate_period), covariate_period)
    if covariates == "drift":
        ramp = breakpoints[:, None] / max(breakpoints[-1], covariate_period)
        tracks = {
            node: CovariateTrack(breakpoints, rng.uniform(0.0, 0.5, size=p) + ramp * rng.uniform(1.0, 2.0, size=p))
            for node in spec.nodes
        }
    else:
        tracks = {
            node: CovariateTrack(breakpoints, rng.uniform(size=(len(breakpoints), p)))
            for node in spec.nodes
        }
    seeds = spawn_seeds(seed, spec.n_nodes)
    params = {node: sample_init(s, p, q) for node, s in zip(spec.nodes, seeds)}
    return Scenario(
        spec=spec,
        tracks=tracks,
        params=params,
        mark_model=MarkModel(n_features=q, co_involvement=co_involvement),
        horizon=float(T),
        seed=seed,
    )


def thinning_simulate(
    scenario: Scenario,
    t_start: float,
    t_end: float,
    db: Optional[EventDatabase] = None,
    seed: Optional[int] = None,
) -> EventDatabase:
    """
    Thinning on (t_start, t_end]: propose from the total intensity just after the current
    time, accept with the ratio of the total intensity at the proposal, then attribute
    the event to a node proportionally to the node intensities. Proposals are cut at
    covariate breakpoints, the only places where the intensity can jump up.
    Events of ``db`` up to ``t_start`` are the history; a new database is returned.
    """
    if not t_start < t_end:
        raise InvalidInputError(f"need t_start < t_end, got ({t_start}, {t_end})")
    spec = scenario.spec
    out = db.copy() if db is not None else EventDatabase(spec, scenario.q)
    rng = np.random.default_rng(derive_seed(scenario.seed, 1) if seed is None else seed)
    state = IntensityState(
        scenario.params,
        spec,
        scenario.tracks,
        scenario.variant,
        history=out.snapshot(t_start, inclusive=True),
        start=t_start,
    )
    t = t_start
    while t < t_end:
        cut = min(state.next_breakpoint(t), t_end)
        bound = float(np.sum(state.intensities()))
        if not bound > 0:
            if cut >= t_end:
                break
            state.advance(cut)
            t = cut
            continue
        proposal = t + rng.exponential(1.0 / bound)
        if proposal >= cut:
            state.advance(cut)
            t = cut
            continue
        state.advance(proposal)
        t = proposal
        rates = state.intensities()
        total = float(np.sum(rates))
        if rng.uniform() * bound <= total:
            k = int(rng.choice(spec.n_nodes, p=rates / total))
            node = spec.node_at(k)
            features, drugs = scenario.mark_model.sample(rng, node, spec)
            event = Event(t, node, features, drugs)
            out.add(event)
            state.add_event(event)
    return out


def simulate_scenario(scenario: Scenario, seed: Optional[int] = None) -> EventDatabase:
    return thinning_simulate(scenario, 0.0, scenario.horizon, seed=seed)


@dataclass
class RecoveryReport:
    estimates: pd.DataFrame
    summary: pd.DataFrame
    failures: List[str] = field(default_factory=list)


def recovery_experiment(
    n_nodes: int,
    cutoffs: Sequence[float] = (50.0, 100.0),
    replications: int = 100,
    gt: NodeParams = RECOVERY_GT,
    seed: int = 0,
    horizon: float = 101.0,
    fit_options: Optional[FitOptions] = None,
    workers: Optional[int] = 1,
    node_index: int = 0,
    n_starts: int = 3,
) -> RecoveryReport:
    """
    Parameter-recovery study: per replication build a scenario, pin the node of interest to
    ``gt``, simulate to ``horizon`` and fit that node at every cutoff. The primary start is
    the best grid point; ``n_starts - 1`` random starts join it and the best fit is kept.
    """
    if replications < 1:
        raise InvalidInputError("replications must be >= 1")
    if any(not 0 < c <= horizon for c in cutoffs):
        raise InvalidInputError(f"cutoffs must lie in (0, {horizon}]")
    fit_options = fit_options or FitOptions()
    seeds = spawn_seeds(seed, replications)
    progress = tqdm(total=replications, desc=f"recovery N={n_nodes}")

    def replicate(item):
        r, rep_seed = item
        rows, failures = [], []
        try:
            scenario = build_scenario(n_nodes, horizon, rep_seed, p=gt.p, q=gt.q)
            node = scenario.spec.node_at(node_index)
            scenario.params[node] = gt
            db = simulate_scenario(scenario)
        except StemmedError as exc:
            failures.append(f"replication {r}: {exc}")
            progress.update(1)
            return rows, failures
        for c, cutoff in enumerate(cutoffs):
            options = dataclasses.replace(
                fit_options, n_starts=max(fit_options.n_starts, n_starts), seed=derive_seed(rep_seed, c, 1)
            )
            try:
                init = grid_init(
                    node, db, scenario.spec, scenario.tracks, cutoff, seed=derive_seed(rep_seed, c), p=gt.p, q=gt.q
                )
            except StemmedError as exc:
                logger.debug(f"grid start failed in replication {r}, drawing at random: {exc}")
                init = sample_init(derive_seed(rep_seed, c), gt.p, gt.q)
            try:
                result = fit_node(node, db, scenario.spec, scenario.tracks, cutoff, init, options)
            except StemmedError as exc:
                failures.append(f"replication {r} cutoff {cutoff}: {exc}")
                continue
            for name, value in param_items(result.params):
                rows.append(
                    {
                        "replication": r,
                        "n_nodes": n_nodes,
                        "cutoff": cutoff,
                        "parameter": name,
                        "value": value,
                        "converged": result.converged,
                        "n_events": len(db),
                    }
                )
        progress.update(1)
        return rows, failures

    outcomes = parallel_map(replicate, list(enumerate(seeds)), workers)
    progress.close()
    rows = [row for rep_rows, _ in outcomes for row in rep_rows]
    failures = [msg for _, rep_failures in outcomes for msg in rep_failures]
    for msg in failures:
        logger.warning(msg)
    estimates = pd.DataFrame(
        rows, columns=["replication", "n_nodes", "cutoff", "parameter", "value", "converged", "n_events"]
    )
    return RecoveryReport(estimates, recovery_summary(estimates, gt), failures)
