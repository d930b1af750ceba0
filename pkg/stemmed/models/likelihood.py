"""
Per-node log-likelihood of the network process.

The compensator is evaluated in closed form on a segment grid made of every event time
in the network, the node's covariate breakpoints and the horizon. On each segment (a, b]
the baseline, the connectivity and the set of triggering events are constant, so the
integral of every exponential kernel term is analytic.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from stemmed.models.model import (EXP_GUARD, ModelVariant, NetworkSpec,
                                  NodeId, NodeParams, Tracks, track_for)
from stemmed.utils.errors import (InvalidInputError, NumericDegenerateError,
                                  OverflowGuardError)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
# alpha, delta_g and arcs are optimized on the log scale and floored here
LOG_FLOOR = -20.0
DEFAULT_CHUNK = 512


@dataclass(frozen=True)
class ParamLayout:
    """Position of every parameter block inside the reparameterized vector."""

    p: int
    q: int
    n_arcs: int

    @property
    def size(self) -> int:
        return self.p + self.q + self.n_arcs + 3

    @property
    def gamma(self) -> slice:
        return slice(0, 1)

    @property
    def beta(self) -> slice:
        return slice(1, 1 + self.p)

    @property
    def alpha(self) -> slice:
        start = 1 + self.p
        return slice(start, start + self.n_arcs)

    @property
    def delta_g(self) -> slice:
        start = 1 + self.p + self.n_arcs
        return slice(start, start + 1)

    @property
    def omega(self) -> slice:
        start = 2 + self.p + self.n_arcs
        return slice(start, start + self.q)

    @property
    def delta_k(self) -> slice:
        return slice(self.size - 1, self.size)


def param_layout(p: int, q: int, variant: ModelVariant, n_nodes: int) -> ParamLayout:
    n_arcs = n_nodes if ModelVariant(variant) is ModelVariant.MEPP else 1
    return ParamLayout(p, q, n_arcs)


def free_mask(layout: ParamLayout, variant: ModelVariant) -> np.ndarray:
    """Components the optimizer may move for a given variant."""
    variant = ModelVariant(variant)
    mask = np.zeros(layout.size, dtype=bool)
    mask[layout.gamma] = True
    if variant is ModelVariant.CONST:
        return mask
    mask[layout.alpha] = True
    mask[layout.delta_k] = True
    if variant is ModelVariant.STEMMED:
        mask[layout.beta] = True
        mask[layout.delta_g] = True
        mask[layout.omega] = True
    return mask


def _floored_log(x) -> np.ndarray:
    return np.maximum(np.log(np.maximum(np.asarray(x, dtype=float), 1e-300)), LOG_FLOOR)


def pack_params(params: NodeParams, variant: ModelVariant = ModelVariant.STEMMED, n_nodes: int = 1) -> np.ndarray:
    """(log gamma, beta, log alpha | log arcs, log delta_g, omega, log delta_k)."""
    layout = param_layout(params.p, params.q, variant, n_nodes)
    z = np.zeros(layout.size)
    z[layout.gamma] = math.log(params.gamma)
    z[layout.beta] = params.beta
    if ModelVariant(variant) is ModelVariant.MEPP:
        arcs = params.arcs if params.arcs is not None else np.full(n_nodes, params.alpha)
        z[layout.alpha] = _floored_log(arcs)
    else:
        z[layout.alpha] = _floored_log(params.alpha)
    z[layout.delta_g] = _floored_log(params.delta_g)
    z[layout.omega] = params.omega
    z[layout.delta_k] = math.log(params.delta_k)
    return z


def unpack_params(z: np.ndarray, layout: ParamLayout, variant: ModelVariant = ModelVariant.STEMMED) -> NodeParams:
    z = np.asarray(z, dtype=float)
    if ModelVariant(variant) is ModelVariant.MEPP:
        arcs = np.exp(z[layout.alpha])
        alpha = float(arcs.max()) if len(arcs) else 0.0
    else:
        arcs, alpha = None, float(np.exp(z[layout.alpha][0]))
    return NodeParams(
        gamma=float(np.exp(z[layout.gamma][0])),
        beta=z[layout.beta],
        alpha=alpha,
        delta_g=float(np.exp(z[layout.delta_g][0])),
        omega=z[layout.omega],
        delta_k=float(np.exp(z[layout.delta_k][0])),
        arcs=arcs,
    )


class NodeLikelihoodContext:
    """
    Parameter-independent data for one node's likelihood: the segment grid with the
    covariates and connectivity on every segment, the source events, and the node's own
    event times with the covariates and connectivity seen by each of them.
    """

    def __init__(
        self,
        u: NodeId,
        spec: NetworkSpec,
        tracks: Optional[Tracks],
        db,
        horizon: float,
        p: int,
        variant: ModelVariant = ModelVariant.STEMMED,
        extra_points: Iterable[float] = (),
        chunk_size: int = DEFAULT_CHUNK,
    ):
        spec.check(u)
        if not horizon > 0 or not math.isfinite(horizon):
            raise InvalidInputError(f"horizon must be positive and finite, got {horizon}")
        self.node = u
        self.spec = spec
        self.horizon = float(horizon)
        self.variant = ModelVariant(variant)
        self.chunk_size = chunk_size
        self.index = spec.index(u)
        track = track_for(tracks, u, p)
        snapshot = db.snapshot(horizon, inclusive=True)
        history = snapshot.connectivity_history()
        times = snapshot.times

        points = np.concatenate(
            [
                times[times > 0],
                track.breakpoints_between(0.0, horizon),
                np.asarray([x for x in extra_points if 0 < x < horizon], dtype=float),
                [horizon],
            ]
        )
        ends = np.unique(points)
        starts = np.concatenate([[0.0], ends[:-1]])
        self.segment_starts = starts
        self.segment_ends = ends
        self.n_events = len(times)

        own = snapshot.node_index == self.index
        self.event_times = times[own]

        self.t_seg_start = torch.as_tensor(starts, dtype=DTYPE)
        self.t_seg_len = torch.as_tensor(ends - starts, dtype=DTYPE)
        self.t_seg_y = torch.as_tensor(track.values_at(starts).reshape(len(starts), p), dtype=DTYPE)
        self.t_evt_time = torch.as_tensor(self.event_times, dtype=DTYPE)
        self.t_evt_y = torch.as_tensor(
            track.values_at(self.event_times).reshape(len(self.event_times), p), dtype=DTYPE
        )
        self.t_src_time = torch.as_tensor(times, dtype=DTYPE)
        self.t_src_node = torch.as_tensor(snapshot.node_index, dtype=torch.long)
        self.t_src_feat = torch.as_tensor(snapshot.features, dtype=DTYPE)
        self.t_dist = torch.as_tensor(spec.node_distances()[self.index], dtype=DTYPE)
        # delta_g only enters through sources at a positive distance
        self.sees_distance = bool(np.any(spec.node_distances()[self.index][snapshot.node_index] > 0))
        if self.variant is ModelVariant.STEMMED:
            self.t_seg_theta = torch.as_tensor(history.theta_rows(u, starts, inclusive=True), dtype=DTYPE)
            self.t_evt_theta = torch.as_tensor(
                history.theta_rows(u, self.event_times, inclusive=False), dtype=DTYPE
            )
        else:
            self.t_seg_theta = None
            self.t_evt_theta = None
        # number of source events with time <= segment start (resp. < own event time)
        self.seg_visible = np.searchsorted(times, starts, side="right")
        self.evt_visible = np.searchsorted(times, self.event_times, side="left")
        self.evt_segment = np.searchsorted(ends, self.event_times, side="left")

    def _node_weights(self, tp: Dict[str, torch.Tensor]) -> Optional[torch.Tensor]:
        n = self.spec.n_nodes
        if self.variant is ModelVariant.CONST:
            return None
        if self.variant is ModelVariant.SEPP:
            onehot = torch.zeros(n, dtype=DTYPE)
            onehot[self.index] = 1.0
            return tp["alpha"] * onehot
        if self.variant is ModelVariant.MEPP:
            if tp["alpha"].shape[0] != n:
                raise InvalidInputError("MEPP parameters need one arc weight per node")
            return tp["alpha"]
        return tp["alpha"] * torch.exp(-tp["delta_g"] * self.t_dist)

    def _kernel_sums(
        self,
        at: torch.Tensor,
        visible: np.ndarray,
        theta: Optional[torch.Tensor],
        weights: torch.Tensor,
        eta: torch.Tensor,
        delta_k: torch.Tensor,
    ) -> torch.Tensor:
        """sum over visible sources x of A_u^{v(x)} * eta_x * exp(-delta_k (at - t_x)), per row."""
        out = []
        for lo in range(0, len(at), self.chunk_size):
            hi = min(lo + self.chunk_size, len(at))
            cols = int(visible[hi - 1]) if hi > lo else 0
            if cols == 0:
                out.append(torch.zeros(hi - lo, dtype=DTYPE))
                continue
            lag = at[lo:hi, None] - self.t_src_time[None, :cols]
            mask = torch.as_tensor(np.arange(cols)[None, :] < visible[lo:hi, None])
            decay = torch.where(mask, torch.exp(-delta_k * lag.clamp(min=0.0)), torch.zeros((), dtype=DTYPE))
            src = self.t_src_node[:cols]
            if theta is None:
                w = weights[src][None, :]
            else:
                w = weights[src][None, :] * theta[lo:hi][:, src]
            out.append(torch.sum(w * eta[None, :cols] * decay, dim=1))
        if not out:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat(out)

    def evaluate(self, tp: Dict[str, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Returns (sum of log-intensities at own events, baseline mass per segment,
        triggering mass per segment).
        """
        gamma, beta, delta_k = tp["gamma"], tp["beta"], tp["delta_k"]
        seg_lin = self.t_seg_y @ beta
        evt_lin = self.t_evt_y @ beta
        _check_guard(seg_lin, "baseline")
        _check_guard(evt_lin, "baseline")
        seg_base = gamma * torch.exp(seg_lin) * self.t_seg_len
        evt_rate = gamma * torch.exp(evt_lin)

        weights = self._node_weights(tp)
        if weights is None or self.n_events == 0:
            seg_trig = torch.zeros_like(seg_base)
        else:
            mark_lin = self.t_src_feat @ tp["omega"]
            _check_guard(mark_lin, "mark gain")
            eta = torch.exp(mark_lin)
            excitation = self._kernel_sums(
                self.t_seg_start, self.seg_visible, self.t_seg_theta, weights, eta, delta_k
            )
            seg_trig = excitation * -torch.expm1(-delta_k * self.t_seg_len) / delta_k
            evt_rate = evt_rate + self._kernel_sums(
                self.t_evt_time, self.evt_visible, self.t_evt_theta, weights, eta, delta_k
            )
        if len(self.event_times) and not bool(torch.all(evt_rate > 0)):
            raise NumericDegenerateError(f"intensity vanished at an event of {self.node}")
        return torch.sum(torch.log(evt_rate)), seg_base, seg_trig

    def loglik(self, tp: Dict[str, torch.Tensor]) -> torch.Tensor:
        log_terms, seg_base, seg_trig = self.evaluate(tp)
        return log_terms - torch.sum(seg_base) - torch.sum(seg_trig)


def _check_guard(lin: torch.Tensor, what: str) -> None:
    if lin.numel() == 0:
        return
    worst = float(torch.max(torch.abs(lin.detach())))
    if not math.isfinite(worst) or worst > EXP_GUARD:
        raise OverflowGuardError(f"{what} exponent {worst:g} outside [-{EXP_GUARD:g}, {EXP_GUARD:g}]")


def _torch_params(params: NodeParams, variant: ModelVariant, n_nodes: int, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
    if ModelVariant(variant) is ModelVariant.MEPP:
        arcs = params.arcs if params.arcs is not None else np.full(n_nodes, params.alpha)
        alpha = torch.as_tensor(np.array(arcs, dtype=float), dtype=DTYPE)
    else:
        alpha = torch.tensor(params.alpha, dtype=DTYPE)
    tp = {
        "gamma": torch.tensor(params.gamma, dtype=DTYPE),
        "beta": torch.as_tensor(np.array(params.beta), dtype=DTYPE),
        "alpha": alpha,
        "delta_g": torch.tensor(params.delta_g, dtype=DTYPE),
        "omega": torch.as_tensor(np.array(params.omega), dtype=DTYPE),
        "delta_k": torch.tensor(params.delta_k, dtype=DTYPE),
    }
    if requires_grad:
        for value in tp.values():
            value.requires_grad_(True)
    return tp


class NodeObjective:
    """Log-likelihood of one node as a function of the reparameterized vector."""

    def __init__(self, context: NodeLikelihoodContext, p: int, q: int):
        self.context = context
        self.variant = context.variant
        self.layout = param_layout(p, q, self.variant, context.spec.n_nodes)

    def params(self, z: np.ndarray) -> NodeParams:
        return unpack_params(z, self.layout, self.variant)

    def value(self, z: np.ndarray) -> float:
        return self.value_at(self.params(z))

    def value_at(self, params: NodeParams) -> float:
        tp = _torch_params(params, self.variant, self.context.spec.n_nodes)
        with torch.no_grad():
            return float(self.context.loglik(tp))

    def value_and_grad(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.value_and_grad_at(self.params(z))

    def value_and_grad_at(self, params: NodeParams) -> Tuple[float, np.ndarray]:
        """
        Gradient with respect to the reparameterized vector. Derivatives are taken in the
        natural parameters and chained through the exponentials, so a block sitting at
        exactly zero has a zero log-scale derivative.
        """
        tp = _torch_params(params, self.variant, self.context.spec.n_nodes, requires_grad=True)
        value = self.context.loglik(tp)
        value.backward()
        layout = self.layout
        grad = np.zeros(layout.size)

        def natural(name):
            g = tp[name].grad
            return np.zeros(tp[name].shape) if g is None else g.detach().numpy()

        grad[layout.gamma] = params.gamma * natural("gamma")
        grad[layout.beta] = natural("beta")
        grad[layout.alpha] = tp["alpha"].detach().numpy() * natural("alpha")
        grad[layout.delta_g] = params.delta_g * natural("delta_g")
        grad[layout.omega] = natural("omega")
        grad[layout.delta_k] = params.delta_k * natural("delta_k")
        return float(value.detach()), grad


def _context(u, params_u, spec, tracks, db, horizon, variant, extra_points=()) -> NodeLikelihoodContext:
    return NodeLikelihoodContext(
        u, spec, tracks, db, horizon, params_u.p, variant, extra_points=extra_points
    )


def compensator(
    u: NodeId,
    T: float,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> float:
    """Integral of lambda_u over (0, T]."""
    baseline, triggering = compensator_parts(u, 0.0, T, params, spec, tracks, db, variant)
    return baseline + triggering


def compensator_parts(
    u: NodeId,
    start: float,
    end: float,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> Tuple[float, float]:
    """Expected event count of u on (start, end], split into baseline and triggering mass."""
    if not 0 <= start < end:
        raise InvalidInputError(f"need 0 <= start < end, got ({start}, {end})")
    params_u = params[u]
    ctx = _context(u, params_u, spec, tracks, db, end, variant, extra_points=[start])
    tp = _torch_params(params_u, variant, spec.n_nodes)
    with torch.no_grad():
        _, seg_base, seg_trig = ctx.evaluate(tp)
    keep = torch.as_tensor(ctx.segment_starts >= start)
    return float(seg_base[keep].sum()), float(seg_trig[keep].sum())


def rescaled_times(
    u: NodeId,
    T: float,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> np.ndarray:
    """Compensator evaluated at each event time of u up to T; unit-rate under a correct model."""
    params_u = params[u]
    ctx = _context(u, params_u, spec, tracks, db, T, variant)
    tp = _torch_params(params_u, variant, spec.n_nodes)
    with torch.no_grad():
        _, seg_base, seg_trig = ctx.evaluate(tp)
    cumulative = torch.cumsum(seg_base + seg_trig, dim=0).numpy()
    at = ctx.evt_segment
    return np.where(ctx.event_times > 0, cumulative[np.minimum(at, len(cumulative) - 1)], 0.0)


def node_loglik(
    u: NodeId,
    params_u: NodeParams,
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    T_u: float,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> float:
    """
    Sum of log lambda_u over u's events up to T_u minus the compensator on (0, T_u].
    Events after T_u are outside the observation window and ignored.
    """
    ctx = _context(u, params_u, spec, tracks, db, T_u, variant)
    return NodeObjective(ctx, params_u.p, params_u.q).value_at(params_u)


def node_loglik_grad(
    u: NodeId,
    params_u: NodeParams,
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    T_u: float,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> np.ndarray:
    """Gradient of ``node_loglik`` in (log gamma, beta, log alpha, log delta_g, omega, log delta_k)."""
    ctx = _context(u, params_u, spec, tracks, db, T_u, variant)
    _, grad = NodeObjective(ctx, params_u.p, params_u.q).value_and_grad_at(params_u)
    return grad


Horizons = Union[float, Mapping[NodeId, float]]


def horizon_for(horizons: Horizons, node: NodeId) -> float:
    if isinstance(horizons, Mapping):
        if node not in horizons:
            raise InvalidInputError(f"no horizon for {node}")
        return float(horizons[node])
    return float(horizons)


def last_event_horizons(db, spec: NetworkSpec, fallback: Optional[float] = None) -> Dict[NodeId, float]:
    """Per-node horizons T_u = last observed event time at u (``fallback`` for empty nodes)."""
    snapshot = db.snapshot()
    out = {}
    for node in spec.nodes:
        times = snapshot.node_times(node)
        if len(times) and times[-1] > 0:
            out[node] = float(times[-1])
        elif fallback is not None:
            out[node] = float(fallback)
        else:
            raise InvalidInputError(f"{spec.label(node)} has no events to define its horizon")
    return out


def total_loglik(
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db,
    horizons: Horizons,
    variant: ModelVariant = ModelVariant.STEMMED,
    nodes: Optional[Sequence[NodeId]] = None,
) -> float:
    """Sum of the node terms, accumulated in ``nodes`` order (network order by default)."""
    total = 0.0
    for node in nodes if nodes is not None else spec.nodes:
        total += node_loglik(node, params[node], spec, tracks, db, horizon_for(horizons, node), variant)
    return total
