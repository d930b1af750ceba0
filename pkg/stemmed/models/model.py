import enum
import math
from dataclasses import dataclass, field
from typing import (TYPE_CHECKING, Dict, FrozenSet, Iterable, Mapping,
                    Optional, Sequence, Tuple)

import numpy as np

from stemmed.utils.errors import InvalidInputError, OverflowGuardError

if TYPE_CHECKING:
    from stemmed.models.database import EventDatabase, EventSnapshot

EXP_GUARD = 700.0


class ModelVariant(str, enum.Enum):
    """
    Restricted configurations of the same engine.

    STEMMED: full dynamic network. SEPP: constant baseline, self arc only.
    MEPP: constant baseline, constant learned arc per source node.
    CONST: homogeneous Poisson per node.
    """

    STEMMED = "stemmed"
    SEPP = "sepp"
    MEPP = "mepp"
    CONST = "const"


def guarded_exp(x, what="exponent"):
    arr = np.asarray(x, dtype=float)
    if arr.size and (not np.all(np.isfinite(arr)) or np.max(np.abs(arr)) > EXP_GUARD):
        raise OverflowGuardError(
            f"{what} argument outside [-{EXP_GUARD:g}, {EXP_GUARD:g}]: {arr}"
        )
    return np.exp(arr)


@dataclass(frozen=True, order=True)
class NodeId:
    community: int
    drug: int


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """
    Static geometry of the node grid.

    Args:
        communities: community labels, indexed by ``NodeId.community``.
        drugs: drug-class labels, indexed by ``NodeId.drug``.
        distances: symmetric nonnegative community distance matrix, in user units.
    """

    communities: Tuple[str, ...]
    drugs: Tuple[str, ...]
    distances: np.ndarray

    def __post_init__(self):
        communities = tuple(str(c) for c in self.communities)
        drugs = tuple(str(d) for d in self.drugs)
        distances = np.array(self.distances, dtype=float, copy=True)
        if not communities or not drugs:
            raise InvalidInputError("need at least one community and one drug")
        if len(set(communities)) != len(communities) or len(set(drugs)) != len(drugs):
            raise InvalidInputError("community and drug labels must be unique")
        n = len(communities)
        if distances.shape != (n, n):
            raise InvalidInputError(
                f"distances must be {n}x{n}, got {distances.shape}"
            )
        if not np.all(np.isfinite(distances)) or np.any(distances < 0):
            raise InvalidInputError("distances must be finite and nonnegative")
        if np.any(np.diag(distances) != 0):
            raise InvalidInputError("distances[i][i] must be 0")
        if not np.array_equal(distances, distances.T):
            raise InvalidInputError("distances must be symmetric")
        distances.setflags(write=False)
        object.__setattr__(self, "communities", communities)
        object.__setattr__(self, "drugs", drugs)
        object.__setattr__(self, "distances", distances)

    @property
    def n_communities(self) -> int:
        return len(self.communities)

    @property
    def n_drugs(self) -> int:
        return len(self.drugs)

    @property
    def n_nodes(self) -> int:
        return self.n_communities * self.n_drugs

    @property
    def nodes(self) -> Tuple[NodeId, ...]:
        return tuple(
            NodeId(i, s) for i in range(self.n_communities) for s in range(self.n_drugs)
        )

    def check(self, node: NodeId) -> NodeId:
        if not (
            0 <= node.community < self.n_communities and 0 <= node.drug < self.n_drugs
        ):
            raise InvalidInputError(f"{node} outside a {self.n_communities}x{self.n_drugs} grid")
        return node

    def index(self, node: NodeId) -> int:
        self.check(node)
        return node.community * self.n_drugs + node.drug

    def node_at(self, index: int) -> NodeId:
        if not 0 <= index < self.n_nodes:
            raise InvalidInputError(f"node index {index} out of range")
        return NodeId(*divmod(index, self.n_drugs))

    def label(self, node: NodeId) -> str:
        self.check(node)
        return f"{self.communities[node.community]}|{self.drugs[node.drug]}"

    def parse_label(self, label: str) -> NodeId:
        community, sep, drug = label.rpartition("|")
        if not sep:
            raise InvalidInputError(f"node label {label!r} is not 'community|drug'")
        return self.node(community, drug)

    def node(self, community: str, drug: str) -> NodeId:
        try:
            return NodeId(self.communities.index(community), self.drugs.index(drug))
        except ValueError:
            raise InvalidInputError(f"unknown node ({community!r}, {drug!r})") from None

    def distance(self, u: NodeId, v: NodeId) -> float:
        return float(self.distances[u.community, v.community])

    def node_communities(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_communities), self.n_drugs)

    def node_drugs(self) -> np.ndarray:
        return np.tile(np.arange(self.n_drugs), self.n_communities)

    def node_distances(self) -> np.ndarray:
        """|V|x|V| matrix of community distances between the nodes' communities."""
        c = self.node_communities()
        return self.distances[np.ix_(c, c)]

    def with_distance(self, i: int, j: int, dist: float) -> "NetworkSpec":
        distances = np.array(self.distances)
        distances[i, j] = distances[j, i] = dist
        return NetworkSpec(self.communities, self.drugs, distances)


@dataclass(frozen=True)
class Event:
    time: float
    node: NodeId
    features: Tuple[float, ...] = ()
    drugs_involved: FrozenSet[int] = frozenset()

    def __post_init__(self):
        time = float(self.time)
        if not math.isfinite(time) or time < 0:
            raise InvalidInputError(f"event time must be finite and >= 0, got {self.time}")
        drugs = frozenset(int(d) for d in self.drugs_involved) or frozenset({self.node.drug})
        if self.node.drug not in drugs:
            raise InvalidInputError(
                f"event at {self.node} must involve its own drug {self.node.drug}"
            )
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "features", tuple(float(f) for f in self.features))
        object.__setattr__(self, "drugs_involved", drugs)


@dataclass(frozen=True, eq=False)
class CovariateTrack:
    """
    Step function of nodal covariates. The value at ``t`` is the vector at the last
    breakpoint at or before ``t``; before the first breakpoint the first vector is used.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breakpoints = np.array(self.breakpoints, dtype=float, ndmin=1)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(breakpoints), -1)
        if len(breakpoints) == 0:
            raise InvalidInputError("a covariate track needs at least one breakpoint")
        if values.ndim != 2 or values.shape[0] != len(breakpoints):
            raise InvalidInputError("one covariate vector per breakpoint is required")
        if np.any(np.diff(breakpoints) <= 0):
            raise InvalidInputError("breakpoints must be strictly increasing")
        if not (np.all(np.isfinite(breakpoints)) and np.all(np.isfinite(values))):
            raise InvalidInputError("covariate tracks must be finite")
        breakpoints.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: Sequence[float], start: float = 0.0) -> "CovariateTrack":
        return cls(np.array([start]), np.array([value], dtype=float).reshape(1, -1))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        k = max(int(np.searchsorted(self.breakpoints, t, side="right")) - 1, 0)
        return self.values[k]

    def values_at(self, times) -> np.ndarray:
        k = np.searchsorted(self.breakpoints, np.asarray(times, dtype=float), side="right") - 1
        return self.values[np.clip(k, 0, None)]

    def breakpoints_between(self, start: float, end: float) -> np.ndarray:
        """Breakpoints strictly inside (start, end)."""
        b = self.breakpoints
        return b[(b > start) & (b < end)]

    def frozen_at(self, t: float) -> "CovariateTrack":
        return CovariateTrack.constant(self.value_at(t), start=0.0)


Tracks = Mapping[NodeId, CovariateTrack]


def constant_tracks(spec: NetworkSpec, p: int = 0, value: float = 0.0) -> Dict[NodeId, CovariateTrack]:
    return {node: CovariateTrack.constant([value] * p) for node in spec.nodes}


def track_for(tracks: Optional[Tracks], node: NodeId, p: int) -> CovariateTrack:
    track = tracks.get(node) if tracks else None
    if track is None:
        if p == 0:
            return CovariateTrack.constant([])
        raise InvalidInputError(f"no covariate track for {node}")
    if track.dim != p:
        raise InvalidInputError(
            f"covariate dimension {track.dim} at {node} does not match beta ({p})"
        )
    return track


def freeze_tracks(tracks: Optional[Tracks], spec: NetworkSpec, t: float, p: int) -> Dict[NodeId, CovariateTrack]:
    return {node: track_for(tracks, node, p).frozen_at(t) for node in spec.nodes}


@dataclass(frozen=True, eq=False)
class NodeParams:
    """
    Parameter block of one node.

    Args:
        gamma: baseline magnitude (> 0).
        beta: covariate coefficients, length p.
        alpha: arc magnitude (>= 0).
        delta_g: spatial decay (>= 0).
        omega: mark coefficients, length q.
        delta_k: temporal decay (> 0).
        arcs: constant per-source arc weights, only used by the MEPP variant.
    """

    gamma: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: float = 0.0
    delta_g: float = 0.0
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    delta_k: float = 1.0
    arcs: Optional[np.ndarray] = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float, ndmin=1).reshape(-1)
        omega = np.array(self.omega, dtype=float, ndmin=1).reshape(-1)
        for name in ("gamma", "alpha", "delta_g", "delta_k"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if self.gamma <= 0 or self.delta_k <= 0:
            raise InvalidInputError("gamma and delta_k must be positive")
        if self.alpha < 0 or self.delta_g < 0:
            raise InvalidInputError("alpha and delta_g must be nonnegative")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(omega))):
            raise InvalidInputError("beta and omega must be finite")
        beta.setflags(write=False)
        omega.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "omega", omega)
        if self.arcs is not None:
            arcs = np.array(self.arcs, dtype=float).reshape(-1)
            if not np.all(np.isfinite(arcs)) or np.any(arcs < 0):
                raise InvalidInputError("arcs must be finite and nonnegative")
            arcs.setflags(write=False)
            object.__setattr__(self, "arcs", arcs)

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def q(self) -> int:
        return len(self.omega)

    def replace(self, **changes) -> "NodeParams":
        values = dict(
            gamma=self.gamma,
            beta=self.beta,
            alpha=self.alpha,
            delta_g=self.delta_g,
            omega=self.omega,
            delta_k=self.delta_k,
            arcs=self.arcs,
        )
        values.update(changes)
        return NodeParams(**values)

    def to_dict(self) -> dict:
        out = {
            "gamma": self.gamma,
            "beta": self.beta.tolist(),
            "alpha": self.alpha,
            "delta_g": self.delta_g,
            "omega": self.omega.tolist(),
            "delta_k": self.delta_k,
        }
        if self.arcs is not None:
            out["arcs"] = self.arcs.tolist()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "NodeParams":
        return cls(
            gamma=data["gamma"],
            beta=data.get("beta", []),
            alpha=data.get("alpha", 0.0),
            delta_g=data.get("delta_g", 0.0),
            omega=data.get("omega", []),
            delta_k=data.get("delta_k", 1.0),
            arcs=data.get("arcs"),
        )


def restrict_params(params: NodeParams, variant: ModelVariant, n_nodes: int) -> NodeParams:
    """Project a parameter block onto the subspace a variant can express."""
    variant = ModelVariant(variant)
    if variant is ModelVariant.STEMMED:
        return params.replace(arcs=None)
    zeros_beta, zeros_omega = np.zeros(params.p), np.zeros(params.q)
    if variant is ModelVariant.SEPP:
        return params.replace(beta=zeros_beta, omega=zeros_omega, delta_g=0.0, arcs=None)
    if variant is ModelVariant.MEPP:
        arcs = params.arcs if params.arcs is not None else np.full(n_nodes, params.alpha)
        return params.replace(beta=zeros_beta, omega=zeros_omega, delta_g=0.0, arcs=arcs)
    return params.replace(beta=zeros_beta, omega=zeros_omega, alpha=0.0, delta_g=0.0, arcs=None)


def baseline_rate(params: NodeParams, track: CovariateTrack, t: float) -> float:
    """mu_u(t) = gamma * exp(beta^T y_t)."""
    if t < 0:
        raise InvalidInputError(f"t must be >= 0, got {t}")
    y = track.value_at(t)
    if len(y) != params.p:
        raise InvalidInputError(f"covariate dimension {len(y)} != len(beta) {params.p}")
    return float(params.gamma * guarded_exp(params.beta @ y, "baseline"))


def temporal_kernel(delta_k: float, dt: float) -> float:
    if dt < 0:
        raise InvalidInputError(f"kernel lag must be >= 0, got {dt}")
    return math.exp(-delta_k * dt)


def mark_gain(omega: Sequence[float], features: Sequence[float]) -> float:
    omega = np.asarray(omega, dtype=float)
    features = np.asarray(features, dtype=float)
    if omega.shape != features.shape:
        raise InvalidInputError(
            f"mark dimension {features.shape} does not match omega {omega.shape}"
        )
    return float(guarded_exp(omega @ features, "mark gain"))


def spatial_gain(delta_g: float, dist: float) -> float:
    if dist < 0:
        raise InvalidInputError(f"distance must be >= 0, got {dist}")
    return math.exp(-delta_g * dist)


def _snapshot(db, t: float) -> "EventSnapshot":
    return db.snapshot(t)


def social_connectivity(u: NodeId, v: NodeId, t: float, db) -> float:
    """Smoothed share of past events in u's and v's communities involving both drugs."""
    snapshot = _snapshot(db, t)
    snapshot.spec.check(u)
    snapshot.spec.check(v)
    return snapshot.connectivity().theta(u, v)


def arc_weight(
    params_u: NodeParams,
    u: NodeId,
    v: NodeId,
    t: float,
    spec: NetworkSpec,
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> float:
    spec.check(u)
    spec.check(v)
    variant = ModelVariant(variant)
    if variant is ModelVariant.CONST:
        return 0.0
    if variant is ModelVariant.SEPP:
        return params_u.alpha if u == v else 0.0
    if variant is ModelVariant.MEPP:
        if params_u.arcs is None or len(params_u.arcs) != spec.n_nodes:
            raise InvalidInputError("MEPP parameters need one arc weight per node")
        return float(params_u.arcs[spec.index(v)])
    if params_u.alpha == 0.0:
        return 0.0
    return (
        params_u.alpha
        * spatial_gain(params_u.delta_g, spec.distance(u, v))
        * social_connectivity(u, v, t, db)
    )


def _check_params(params: Mapping[NodeId, NodeParams], spec: NetworkSpec) -> None:
    missing = [spec.label(node) for node in spec.nodes if node not in params]
    if missing:
        raise InvalidInputError(f"missing parameters for nodes {missing}")


def arc_row(
    params_u: NodeParams,
    u: NodeId,
    spec: NetworkSpec,
    connectivity,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> np.ndarray:
    """Arc weights A_u^v for all source nodes v, given the connectivity counters."""
    variant = ModelVariant(variant)
    n = spec.n_nodes
    if variant is ModelVariant.CONST:
        return np.zeros(n)
    if variant is ModelVariant.SEPP:
        row = np.zeros(n)
        row[spec.index(u)] = params_u.alpha
        return row
    if variant is ModelVariant.MEPP:
        if params_u.arcs is None or len(params_u.arcs) != n:
            raise InvalidInputError("MEPP parameters need one arc weight per node")
        return np.array(params_u.arcs, dtype=float)
    dist = spec.node_distances()[spec.index(u)]
    return params_u.alpha * np.exp(-params_u.delta_g * dist) * connectivity.theta_row(u)


def arc_matrix(
    t: float,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> np.ndarray:
    """Full incidence matrix at ``t``: entry [u, v] is A_u^v(t)."""
    _check_params(params, spec)
    connectivity = _snapshot(db, t).connectivity()
    return np.stack(
        [arc_row(params[u], u, spec, connectivity, variant) for u in spec.nodes]
    )


def intensity(
    u: NodeId,
    t: float,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> float:
    """
    Conditional intensity lambda_u(t). Only events strictly before ``t`` contribute.

    Args:
        u: receiving node.
        t: evaluation time.
        params: parameter block of every node.
        spec: network geometry.
        tracks: covariate track per node (may be None when p == 0).
        db: an EventDatabase or EventSnapshot; it is restricted to events before ``t``.
        variant: model restriction to evaluate.
    """
    spec.check(u)
    _check_params(params, spec)
    params_u = params[u]
    mu = baseline_rate(params_u, track_for(tracks, u, params_u.p), t)
    snapshot = _snapshot(db, t)
    if len(snapshot) == 0:
        return mu
    if snapshot.features.shape[1] != params_u.q:
        raise InvalidInputError(
            f"event features have dimension {snapshot.features.shape[1]}, omega has {params_u.q}"
        )
    weights = arc_row(params_u, u, spec, snapshot.connectivity(), variant)
    eta = guarded_exp(snapshot.features @ params_u.omega, "mark gain")
    kernel = np.exp(-params_u.delta_k * (t - snapshot.times))
    return float(mu + np.sum(weights[snapshot.node_index] * eta * kernel))


class IntensityState:
    """
    Recursive evaluation of every node's intensity.

    ``excitation[u, v]`` holds sum over past events x at v of eta_ux * kappa_u(now - t_x),
    so advancing the clock is a row-wise decay and adding an event is a column update.
    Events added at the current clock time count for every later time.
    """

    def __init__(
        self,
        params: Mapping[NodeId, NodeParams],
        spec: NetworkSpec,
        tracks: Optional[Tracks],
        variant: ModelVariant = ModelVariant.STEMMED,
        history: Iterable[Event] = (),
        start: float = 0.0,
        freeze_connectivity: bool = False,
    ):
        from stemmed.models.database import ConnectivityCounts

        _check_params(params, spec)
        self.spec = spec
        self.variant = ModelVariant(variant)
        self.nodes = spec.nodes
        blocks = [params[node] for node in self.nodes]
        self.p, self.q = blocks[0].p, blocks[0].q
        if any(b.p != self.p or b.q != self.q for b in blocks):
            raise InvalidInputError("all nodes must share the covariate and mark dimensions")
        self.tracks = [track_for(tracks, node, self.p) for node in self.nodes]
        self.gamma = np.array([b.gamma for b in blocks])
        self.beta = np.array([b.beta for b in blocks]).reshape(len(blocks), self.p)
        self.omega = np.array([b.omega for b in blocks]).reshape(len(blocks), self.q)
        self.delta_k = np.array([b.delta_k for b in blocks])
        alpha = np.array([b.alpha for b in blocks])
        if self.variant is ModelVariant.STEMMED:
            delta_g = np.array([b.delta_g for b in blocks])
            self.static_arcs = alpha[:, None] * np.exp(-delta_g[:, None] * spec.node_distances())
        else:
            self.static_arcs = np.stack(
                [arc_row(b, node, spec, None, self.variant) for b, node in zip(blocks, self.nodes)]
            )
        self.freeze_connectivity = freeze_connectivity
        self.connectivity = ConnectivityCounts(spec)
        self.excitation = np.zeros((spec.n_nodes, spec.n_nodes))
        self.time = 0.0
        for event in sorted(history, key=lambda e: e.time):
            if event.time > start:
                break
            self.advance(event.time)
            self.add_event(event)
        self.advance(max(start, self.time))

    def copy(self) -> "IntensityState":
        other = object.__new__(IntensityState)
        other.__dict__.update(self.__dict__)
        other.connectivity = self.connectivity.copy()
        other.excitation = self.excitation.copy()
        return other

    def advance(self, t: float) -> None:
        if t < self.time:
            raise InvalidInputError(f"cannot move the clock back from {self.time} to {t}")
        self.excitation *= np.exp(-self.delta_k * (t - self.time))[:, None]
        self.time = t

    def gains(self, features: Sequence[float]) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.shape != (self.q,):
            raise InvalidInputError(f"expected {self.q} features, got {features.shape}")
        return guarded_exp(self.omega @ features, "mark gain")

    def add_event(self, event: Event, update_connectivity: bool = True) -> None:
        """Register an event at the current clock time."""
        index = self.spec.index(event.node)
        self.excitation[:, index] += self.gains(event.features)
        if update_connectivity and not self.freeze_connectivity:
            self.connectivity.add_event(event)

    def add_mass(
        self,
        node: NodeId,
        weight: float,
        mean_gains: np.ndarray,
        mean_co_involvement: np.ndarray,
    ) -> None:
        """Fractional event mass, used by the expected-count forecast."""
        index = self.spec.index(node)
        self.excitation[:, index] += weight * mean_gains
        if not self.freeze_connectivity:
            self.connectivity.add(node.community, mean_co_involvement, weight)

    def baselines(self, at: Optional[float] = None) -> np.ndarray:
        t = self.time if at is None else at
        y = np.stack([track.value_at(t) for track in self.tracks]).reshape(len(self.nodes), self.p)
        return self.gamma * guarded_exp(np.sum(self.beta * y, axis=1), "baseline")

    def arc_weights(self) -> np.ndarray:
        if self.variant is not ModelVariant.STEMMED:
            return self.static_arcs
        return self.static_arcs * self.connectivity.theta_matrix()

    def triggering(self) -> np.ndarray:
        return np.sum(self.arc_weights() * self.excitation, axis=1)

    def intensities(self, at: Optional[float] = None) -> np.ndarray:
        return self.baselines(at) + self.triggering()

    def integrated(self, width: float, at: Optional[float] = None) -> np.ndarray:
        """
        Expected counts on (now, now + width] with covariates and connectivity held at
        their current values and no new events.
        """
        decay = -np.expm1(-self.delta_k * width) / self.delta_k
        return self.baselines(at) * width + self.triggering() * decay

    def next_breakpoint(self, after: float) -> float:
        upcoming = [
            track.breakpoints[track.breakpoints > after] for track in self.tracks
        ]
        upcoming = [b[0] for b in upcoming if len(b)]
        return min(upcoming) if upcoming else math.inf
