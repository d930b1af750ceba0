import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from stemmed.models.likelihood import (LOG_FLOOR, Horizons, NodeLikelihoodContext,
                                       NodeObjective, ParamLayout, free_mask,
                                       horizon_for, pack_params)
from stemmed.models.model import (ModelVariant, NetworkSpec, NodeId,
                                  NodeParams, Tracks, restrict_params)
from stemmed.utils.errors import (InvalidInitError, InvalidInputError,
                                  StemmedError)
from stemmed.utils.utils import derive_seed, parallel_map

logger = logging.getLogger(__name__)

# (alpha, delta_k, delta_g) candidates; (30, 5, 5) is the usual starting point for real data
DEFAULT_GRID: Tuple[Tuple[float, float, float], ...] = tuple(
    itertools.product((1.0, 5.0, 30.0), (1.0, 5.0, 15.0), (1.0, 5.0, 10.0))
)
# (alpha, delta_k) restart points tried when alpha sits on its floor
RELEASE_GRID: Tuple[Tuple[float, float], ...] = tuple(itertools.product((0.5, 1.5), (1.0, 5.0, 15.0)))
MAX_RELEASES = 3


@dataclass
class FitOptions:
    """
    Gradient-ascent settings.

    Args:
        max_iterations: cap on accepted steps.
        relative_tolerance: stop once |change in log-likelihood| / |log-likelihood| drops below this.
        initial_step: first trial step length along the gradient.
        backtracking: factor applied to the step after a rejected trial.
        seed: master seed for multi-start initial values.
        n_starts: number of starting points; the best final objective wins.
        grid_start: add the best ``DEFAULT_GRID`` point as a starting point.
        max_halvings: rejected trials allowed in one line search before the fit stalls.
        armijo: sufficient-increase constant.
        max_step: upper bound for the step length once it grows back after successes.
        max_decay: upper bound for delta_k and delta_g.
        record_trace: keep (iteration, log-likelihood) pairs.
    """

    max_iterations: int = 5000
    relative_tolerance: float = 1e-6
    initial_step: float = 0.1
    backtracking: float = 0.5
    seed: int = 0
    n_starts: int = 1
    grid_start: bool = False
    max_halvings: int = 60
    armijo: float = 1e-4
    max_step: float = 10.0
    max_decay: float = 1e3
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iterations < 1 or self.n_starts < 1 or self.max_halvings < 1:
            raise InvalidInputError("iteration counts must be positive")
        if not 0 < self.relative_tolerance < 1:
            raise InvalidInputError("relative_tolerance must lie in (0, 1)")
        if not 0 < self.backtracking < 1:
            raise InvalidInputError("backtracking must lie in (0, 1)")
        if self.initial_step <= 0 or self.max_step <= 0 or self.armijo <= 0:
            raise InvalidInputError("step settings must be positive")
        if not self.max_decay > 1:
            raise InvalidInputError("max_decay must exceed 1")


@dataclass
class FitResult:
    """
    ``converged`` is False when the iteration budget ran out, the line search stalled, or
    the fit ended on a bound (alpha on its floor, a decay rate on ``max_decay``); the bound
    hit is named in ``boundary``.
    """

    node: NodeId
    params: NodeParams
    loglik: float
    iterations: int
    converged: bool
    trace: List[Tuple[int, float]] = field(default_factory=list)
    init_loglik: float = float("nan")
    error: Optional[str] = None
    boundary: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.error is None


def sample_init(seed: int, p: int = 1, q: int = 1) -> NodeParams:
    """Initial values drawn from the simulation-study ranges."""
    rng = np.random.default_rng(seed)
    tiny = np.nextafter(0.0, 1.0)
    return NodeParams(
        gamma=rng.uniform(tiny, 1.0),
        beta=rng.uniform(0.0, 1.0, size=p),
        alpha=rng.uniform(1.0, 2.0),
        delta_g=rng.uniform(6.0, 18.0),
        omega=rng.uniform(0.0, 1.0, size=q),
        delta_k=rng.uniform(10.0, 30.0),
    )


def grid_init(
    u: NodeId,
    db,
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    T_u: float,
    grid: Sequence[Tuple[float, float, float]] = DEFAULT_GRID,
    seed: int = 0,
    p: int = 1,
    q: int = 1,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> NodeParams:
    """
    Best (alpha, delta_k, delta_g) grid point by log-likelihood; gamma, beta and omega
    are drawn from U(0, 1).
    """
    grid = list(grid)
    if not grid:
        raise InvalidInputError("grid_init needs at least one candidate")
    rng = np.random.default_rng(seed)
    base = NodeParams(
        gamma=rng.uniform(np.nextafter(0.0, 1.0), 1.0),
        beta=rng.uniform(0.0, 1.0, size=p),
        omega=rng.uniform(0.0, 1.0, size=q),
    )
    ctx = NodeLikelihoodContext(u, spec, tracks, db, T_u, p, variant)
    objective = NodeObjective(ctx, p, q)
    best, best_value = None, -math.inf
    for alpha, delta_k, delta_g in grid:
        candidate = restrict_params(
            base.replace(alpha=alpha, delta_k=delta_k, delta_g=delta_g), variant, spec.n_nodes
        )
        try:
            value = objective.value_at(candidate)
        except StemmedError as exc:
            logger.debug(f"grid point {(alpha, delta_k, delta_g)} rejected: {exc}")
            continue
        # ties keep the later candidate: the fastest spatial decay when delta_g has no effect
        if value >= best_value:
            best, best_value = candidate, value
    if best is None:
        raise InvalidInputError("every grid point produced a non-finite log-likelihood")
    return best


def _bounds(layout: ParamLayout, opts: FitOptions) -> Tuple[np.ndarray, np.ndarray]:
    lower = np.full(layout.size, -np.inf)
    upper = np.full(layout.size, np.inf)
    lower[layout.alpha] = LOG_FLOOR
    lower[layout.delta_g] = LOG_FLOOR
    upper[layout.delta_g] = math.log(opts.max_decay)
    upper[layout.delta_k] = math.log(opts.max_decay)
    return lower, upper


def _evaluate(objective: NodeObjective, z: np.ndarray) -> float:
    try:
        value = objective.value(z)
    except StemmedError:
        return -math.inf
    return value if math.isfinite(value) else -math.inf


def _climb(objective, z, value, grad, mask, opts, lower, upper, budget, trace, offset):
    """Projected gradient ascent; returns (z, value, grad, iterations, converged)."""
    step = opts.initial_step
    iterations = 0
    for iterations in range(1, budget + 1):
        direction = np.where(mask, grad, 0.0)
        if not np.any(np.clip(z + direction, lower, upper) - z):
            return z, value, grad, iterations - 1, True
        accepted = False
        for _ in range(opts.max_halvings):
            trial = np.clip(z + step * direction, lower, upper)
            trial_value = _evaluate(objective, trial)
            gain = float(direction @ (trial - z))
            if trial_value >= value + opts.armijo * gain and trial_value > -math.inf:
                accepted = True
                break
            step *= opts.backtracking
        if not accepted:
            logger.warning(
                f"line search stalled at iteration {offset + iterations} for {objective.context.node}"
            )
            return z, value, grad, iterations - 1, False
        change = abs(trial_value - value) / max(abs(value), 1e-12)
        z = trial
        value, grad = objective.value_and_grad(z)
        if opts.record_trace:
            trace.append((offset + iterations, value))
        step = min(step / opts.backtracking, opts.max_step)
        if change < opts.relative_tolerance:
            return z, value, grad, iterations, True
    return z, value, grad, iterations, False


def _alpha_floored(layout: ParamLayout, z: np.ndarray, mask: np.ndarray) -> bool:
    alpha = z[layout.alpha]
    return layout.n_arcs == 1 and bool(mask[layout.alpha].all()) and bool(np.all(alpha <= LOG_FLOOR + 1e-9))


def _boundary(layout: ParamLayout, z: np.ndarray, mask: np.ndarray, upper: np.ndarray) -> Tuple[str, ...]:
    hit = []
    if _alpha_floored(layout, z, mask):
        hit.append("alpha")
    for name in ("delta_g", "delta_k"):
        block = getattr(layout, name)
        if mask[block].all() and np.all(z[block] >= upper[block] - 1e-9):
            hit.append(name)
    return tuple(hit)


def _ascend(objective: NodeObjective, z: np.ndarray, mask: np.ndarray, opts: FitOptions):
    """
    Gradient ascent with backtracking inside the parameter bounds.

    When alpha collapses onto its floor the excitation block is restarted from the
    ``RELEASE_GRID`` point with the best log-likelihood and the climb continues; the
    restart is kept only if it ends higher.

    Returns (z, loglik, iterations, converged, trace, init, boundary).
    """
    layout = objective.layout
    lower, upper = _bounds(layout, opts)
    z = np.clip(z, lower, upper)
    try:
        value, grad = objective.value_and_grad(z)
    except StemmedError as exc:
        raise InvalidInitError(f"objective undefined at the initial values: {exc}") from exc
    if not math.isfinite(value) or not np.all(np.isfinite(grad)):
        raise InvalidInitError("objective is not finite at the initial values")

    init_value = value
    trace = [(0, value)] if opts.record_trace else []
    z, value, grad, iterations, converged = _climb(
        objective, z, value, grad, mask, opts, lower, upper, opts.max_iterations, trace, 0
    )
    for _ in range(MAX_RELEASES):
        budget = opts.max_iterations - iterations
        if budget < 1 or not _alpha_floored(layout, z, mask):
            break
        released = _release(objective, z, mask)
        if released is None:
            break
        released = np.clip(released, lower, upper)
        start_value, start_grad = objective.value_and_grad(released)
        r_z, r_value, r_grad, used, r_converged = _climb(
            objective, released, start_value, start_grad, mask, opts, lower, upper, budget, [], iterations
        )
        iterations += used
        if r_value <= value:
            logger.debug(f"release of alpha for {objective.context.node} did not improve {value:.4f}")
            break
        z, value, grad, converged = r_z, r_value, r_grad, r_converged
        if opts.record_trace:
            trace.append((iterations, value))
    boundary = _boundary(layout, z, mask, upper)
    return z, value, iterations, converged and not boundary, trace, init_value, boundary


def _release(objective: NodeObjective, z: np.ndarray, mask: np.ndarray) -> Optional[np.ndarray]:
    layout = objective.layout
    best, best_value = None, -math.inf
    for alpha, delta_k in RELEASE_GRID:
        candidate = z.copy()
        candidate[layout.alpha] = math.log(alpha)
        if mask[layout.delta_k].all():
            candidate[layout.delta_k] = math.log(delta_k)
        value = _evaluate(objective, candidate)
        if value > best_value:
            best, best_value = candidate, value
    return best


def fit_node(
    u: NodeId,
    db,
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    T_u: float,
    init: NodeParams,
    opts: Optional[FitOptions] = None,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> FitResult:
    """
    Maximum-likelihood fit of one node's parameter block.

    ``init`` is the primary start; ``opts.n_starts - 1`` draws from ``sample_init`` and,
    with ``opts.grid_start``, the best grid point are added. When no source of ``u``
    sits at a positive distance, delta_g has no effect on the likelihood and stays at the
    primary start's value.
    """
    opts = opts or FitOptions()
    variant = ModelVariant(variant)
    spec.check(u)
    ctx = NodeLikelihoodContext(u, spec, tracks, db, T_u, init.p, variant)
    if len(ctx.event_times) == 0:
        raise InvalidInputError(f"{spec.label(u)} has no events before {T_u}; gamma is not identifiable")
    objective = NodeObjective(ctx, init.p, init.q)
    layout = objective.layout
    mask = free_mask(layout, variant)
    if variant is ModelVariant.STEMMED and not ctx.sees_distance:
        mask[layout.delta_g] = False

    primary = restrict_params(init, variant, spec.n_nodes)
    starts = [primary]
    for k in range(1, opts.n_starts):
        seed = derive_seed(opts.seed, spec.index(u), k)
        starts.append(restrict_params(sample_init(seed, init.p, init.q), variant, spec.n_nodes))
    if opts.grid_start and variant is not ModelVariant.CONST:
        try:
            starts.append(
                grid_init(u, db, spec, tracks, T_u, seed=derive_seed(opts.seed, spec.index(u), 0),
                          p=init.p, q=init.q, variant=variant)
            )
        except InvalidInputError as exc:
            logger.debug(f"grid start for {spec.label(u)} skipped: {exc}")

    best = None
    for k, start in enumerate(starts):
        z0 = pack_params(start, variant, spec.n_nodes)
        z0[layout.delta_g] = pack_params(primary, variant, spec.n_nodes)[layout.delta_g]
        try:
            outcome = _ascend(objective, z0, mask, opts)
        except InvalidInitError as exc:
            if k == 0:
                raise
            logger.debug(f"start {k} for {spec.label(u)} skipped: {exc}")
            continue
        if best is None or outcome[1] > best[1]:
            best = outcome
    z, value, iterations, converged, trace, init_value, boundary = best
    result = FitResult(
        node=u,
        params=restrict_params(objective.params(z), variant, spec.n_nodes),
        loglik=value,
        iterations=iterations,
        converged=converged,
        trace=trace,
        init_loglik=init_value,
        boundary=boundary,
    )
    if boundary:
        logger.warning(f"fit of {spec.label(u)} [{variant.value}] ended on a bound: {', '.join(boundary)}")
    logger.info(
        f"fitted {spec.label(u)} [{variant.value}]: loglik {init_value:.4f} -> {value:.4f} "
        f"in {iterations} iterations (converged={converged})"
    )
    return result


def fit_network(
    db,
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    horizons: Horizons,
    inits: Mapping[NodeId, NodeParams],
    opts: Optional[FitOptions] = None,
    variant: ModelVariant = ModelVariant.STEMMED,
    workers: Optional[int] = 1,
    nodes: Optional[Sequence[NodeId]] = None,
) -> Dict[NodeId, FitResult]:
    """
    Fit every node independently. Failures are recorded on the node's result
    (``error`` set, ``params`` left at the initial values) instead of aborting the run.
    """
    opts = opts or FitOptions()
    nodes = list(nodes) if nodes is not None else list(spec.nodes)
    missing = [spec.label(n) for n in nodes if n not in inits]
    if missing:
        raise InvalidInputError(f"missing initial values for {missing}")

    def fit_one(node: NodeId) -> FitResult:
        try:
            return fit_node(
                node, db, spec, tracks, horizon_for(horizons, node), inits[node], opts, variant
            )
        except StemmedError as exc:
            logger.warning(f"fit failed for {spec.label(node)}: {exc}")
            return FitResult(
                node=node,
                params=inits[node],
                loglik=float("nan"),
                iterations=0,
                converged=False,
                error=str(exc),
            )

    return dict(zip(nodes, parallel_map(fit_one, nodes, workers)))
