import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from stemmed.forecast import (EmpiricalMarkModel, ForecastConfig,
                              multi_period_predict)
from stemmed.models.database import EventDatabase
from stemmed.models.fit import FitOptions, fit_network, sample_init
from stemmed.models.model import (Event, ModelVariant, NetworkSpec, NodeId,
                                  NodeParams, Tracks, intensity,
                                  restrict_params)
from stemmed.simulate import Scenario, simulate_scenario
from stemmed.utils.errors import InvalidInputError
from stemmed.utils.metrics import mspe_table
from stemmed.utils.utils import derive_seed, parallel_map

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "variant",
    "node",
    "community",
    "drug",
    "issue_time",
    "horizon",
    "predicted",
    "realized",
    "data_cutoff",
    "refit_time",
    "corrupted",
    "refit_failed",
]


@dataclass
class CoopSchedule:
    """
    Cadence of the cooperative loop.

    Args:
        upload_period: n, time between data uploads (forecast issue times).
        refresh_period: M, time between model refits.
        horizons: forecast horizons, in bins.
        start: end of the initial training span and time of the first refit.
        end: last time with realized data.
        bin_width: width of one forecast bin.
    """

    upload_period: float
    refresh_period: float
    horizons: Tuple[int, ...] = (1, 3, 6, 9, 12)
    start: float = 0.0
    end: float = 1.0
    bin_width: float = 1.0

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        if not 0 < self.upload_period <= self.refresh_period:
            raise InvalidInputError("need 0 < upload_period <= refresh_period")
        if not self.horizons or min(self.horizons) < 1:
            raise InvalidInputError("horizons must be positive bin counts")
        if not self.bin_width > 0:
            raise InvalidInputError("bin_width must be positive")
        if not 0 <= self.start < self.end:
            raise InvalidInputError(f"need 0 <= start < end, got ({self.start}, {self.end})")

    def refit_times(self) -> List[float]:
        n = int(math.ceil((self.end - self.start) / self.refresh_period - 1e-9))
        return [self.start + k * self.refresh_period for k in range(max(n, 1))]

    def issue_times(self, refit_time: float) -> List[float]:
        """Upload times from ``refit_time`` up to (not including) the next refit."""
        stop = min(refit_time + self.refresh_period, self.end)
        n = int(math.ceil((stop - refit_time) / self.upload_period - 1e-9))
        return [refit_time + k * self.upload_period for k in range(max(n, 1))]


@dataclass
class EditOperation:
    """
    One kind of record error.

    ``add`` inserts the given ``events`` (or ``magnitude`` random events per target node),
    ``remove`` drops a ``magnitude`` fraction of the target nodes' records, ``modify``
    jitters their times by up to ``magnitude``, staying inside the window.
    An empty ``target_nodes`` means every node.
    """

    kind: str
    target_nodes: Tuple[NodeId, ...] = ()
    magnitude: float = 1.0
    events: Tuple[Event, ...] = ()

    def __post_init__(self):
        if self.kind not in ("add", "remove", "modify"):
            raise InvalidInputError(f"unknown edit operation {self.kind!r}")
        if not math.isfinite(self.magnitude) or self.magnitude < 0:
            raise InvalidInputError("magnitude must be finite and nonnegative")
        if self.kind == "remove" and self.magnitude > 1:
            raise InvalidInputError("remove magnitude is a fraction in [0, 1]")
        self.target_nodes = tuple(self.target_nodes)
        self.events = tuple(self.events)


@dataclass
class ErrorInjection:
    window: Tuple[float, float]
    operations: List[EditOperation] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        t1, t2 = self.window
        if not 0 <= t1 < t2 or not math.isfinite(t2):
            raise InvalidInputError(f"invalid injection window {self.window}")
        self.window = (float(t1), float(t2))

    def contains(self, t: float) -> bool:
        return self.window[0] <= t <= self.window[1]


def _targets(op: EditOperation, spec: NetworkSpec) -> Tuple[NodeId, ...]:
    return tuple(spec.check(n) for n in op.target_nodes) if op.target_nodes else spec.nodes


def inject_errors(db: EventDatabase, injection: ErrorInjection) -> EventDatabase:
    """Corrupted copy of ``db``; records outside the window are never touched."""
    rng = np.random.default_rng(injection.seed)
    t1, t2 = injection.window
    events = list(db.events)
    for op in injection.operations:
        targets = set(_targets(op, db.spec))
        if op.kind == "add":
            added = list(op.events)
            outside = [e for e in added if not injection.contains(e.time)]
            if outside:
                raise InvalidInputError(f"{len(outside)} added events fall outside the window {injection.window}")
            if not added and op.magnitude:
                marks = EmpiricalMarkModel(EventDatabase(db.spec, db.n_features, events), allow_empty=True)
                for node in sorted(targets):
                    for t in np.sort(rng.uniform(t1, t2, size=int(op.magnitude))):
                        features, drugs = marks.sample(rng, node, db.spec)
                        added.append(Event(float(t), node, features, drugs))
            events.extend(added)
        elif op.kind == "remove":
            hit = [e for e in events if e.node in targets and injection.contains(e.time)]
            drop = {id(e) for e in hit if rng.uniform() < op.magnitude}
            events = [e for e in events if id(e) not in drop]
        else:
            jittered = []
            for e in events:
                if e.node in targets and injection.contains(e.time):
                    t = float(np.clip(e.time + rng.uniform(-op.magnitude, op.magnitude), t1, t2))
                    e = Event(t, e.node, e.features, e.drugs_involved)
                jittered.append(e)
            events = jittered
    logger.info(f"injected errors in {injection.window}: {len(db)} -> {len(events)} records")
    return EventDatabase(db.spec, db.n_features, events)


def _initial_params(spec: NetworkSpec, p: int, q: int, variant: ModelVariant, seed: int) -> Dict[NodeId, NodeParams]:
    return {
        node: restrict_params(sample_init(derive_seed(seed, spec.index(node)), p, q), variant, spec.n_nodes)
        for node in spec.nodes
    }


def _covariate_dim(tracks: Optional[Tracks]) -> int:
    if not tracks:
        return 0
    return next(iter(tracks.values())).dim


def run_online(
    truth: Union[EventDatabase, Scenario],
    variant: ModelVariant,
    schedule: CoopSchedule,
    fit_options: Optional[FitOptions] = None,
    seed: int = 0,
    tracks: Optional[Tracks] = None,
    forecast: Optional[ForecastConfig] = None,
    injection: Optional[ErrorInjection] = None,
    inits: Optional[Mapping[NodeId, NodeParams]] = None,
    workers: Optional[int] = 1,
) -> pd.DataFrame:
    """
    Online cooperative forecasting loop.

    Every ``refresh_period`` all nodes are refit on the clean store up to the refit time,
    warm-started from the previous fit; a failed node keeps its previous parameters and is
    flagged. At every upload time a forecast is issued from the records uploaded so far and
    scored against the realized counts of each horizon bin. With ``injection`` the corrupted
    copy serves forecasts issued from the start of the window up to the first refit after it
    ends; refits always read the clean store.
    """
    variant = ModelVariant(variant)
    if isinstance(truth, Scenario):
        tracks = truth.tracks if tracks is None else tracks
        clean = simulate_scenario(truth, seed=derive_seed(seed, 0))
    else:
        clean = truth
    spec = clean.spec
    fit_options = fit_options or FitOptions()
    forecast = forecast or ForecastConfig()
    width = schedule.bin_width
    refits = schedule.refit_times()

    corrupted, corrupt_until = None, -math.inf
    if injection is not None:
        t1, t2 = injection.window
        if t1 < schedule.start or t2 > schedule.end:
            raise InvalidInputError(f"injection window {injection.window} outside the schedule span")
        corrupted = inject_errors(clean, injection)
        corrupt_until = next((r for r in refits if r >= t2), math.inf)

    p, q = _covariate_dim(tracks), clean.n_features
    params = dict(inits) if inits is not None else _initial_params(spec, p, q, variant, seed)
    rows = []
    issue_index = 0
    for refit_time in tqdm(refits, desc=f"online {variant.value}"):
        results = fit_network(clean, spec, tracks, refit_time, params, fit_options, variant, workers)
        failed = {node for node, result in results.items() if not result.ok}
        params = {node: result.params for node, result in results.items()}
        if failed:
            logger.warning(
                f"refit at {refit_time}: {len(failed)} node(s) keep their previous parameters"
            )
        for issue_time in schedule.issue_times(refit_time):
            in_window = corrupted is not None and injection.window[0] <= issue_time < corrupt_until
            source = corrupted if in_window else clean
            last = max(schedule.horizons)
            config = forecast.replace(
                start=issue_time,
                horizon=issue_time + last * width,
                bin_width=width,
                seed=derive_seed(seed, issue_index),
                show_progress=False,
            )
            predicted = multi_period_predict(source, params, spec, tracks, config, variant).point_forecast()
            for h in schedule.horizons:
                lo, hi = issue_time + (h - 1) * width, issue_time + h * width
                if hi > schedule.end:
                    continue
                for k, node in enumerate(spec.nodes):
                    rows.append(
                        {
                            "variant": variant.value,
                            "node": spec.label(node),
                            "community": spec.communities[node.community],
                            "drug": spec.drugs[node.drug],
                            "issue_time": issue_time,
                            "horizon": h,
                            "predicted": float(predicted[k, h - 1]),
                            "realized": clean.count(node, lo, hi),
                            "data_cutoff": issue_time,
                            "refit_time": refit_time,
                            "corrupted": in_window,
                            "refit_failed": node in failed,
                        }
                    )
            issue_index += 1
    return pd.DataFrame(rows, columns=LOG_COLUMNS)


def compare_variants(
    truth: Union[EventDatabase, Scenario],
    variants: Sequence[ModelVariant],
    schedule: CoopSchedule,
    variant_workers: Optional[int] = 1,
    **kwargs,
) -> pd.DataFrame:
    """Concatenated evaluation logs of several variants run on the same data and seeds."""
    logs = parallel_map(
        lambda variant: run_online(truth, variant, schedule, **kwargs), list(variants), variant_workers
    )
    return pd.concat(logs, ignore_index=True)


def mspe(log: pd.DataFrame, keys: Sequence[str] = ("drug",)) -> pd.DataFrame:
    return mspe_table(log, keys)


@dataclass
class DecayCurve:
    """
    Intensity gap between two databases at probe times. In spatial mode ``gaps`` has one
    row per swept distance.
    """

    mode: str
    probe_times: np.ndarray
    gaps: np.ndarray
    envelope: Optional[np.ndarray] = None
    constant: float = float("nan")
    distances: Optional[np.ndarray] = None
    anchor: float = float("nan")

    def covered(self, rtol: float = 1e-9, atol: float = 1e-12) -> bool:
        """Whether every probe after the anchor stays under the envelope."""
        if self.envelope is None or math.isnan(self.anchor):
            return True
        later = self.probe_times > self.anchor
        return bool(np.all(self.gaps[later] <= self.envelope[later] * (1 + rtol) + atol))

    def to_frame(self) -> pd.DataFrame:
        if self.mode == "temporal":
            return pd.DataFrame(
                {"probe_time": self.probe_times, "gap": self.gaps, "envelope": self.envelope}
            )
        rows = [
            {"distance": d, "probe_time": t, "gap": self.gaps[i, j]}
            for i, d in enumerate(self.distances)
            for j, t in enumerate(self.probe_times)
        ]
        return pd.DataFrame(rows)


def _difference(db1: EventDatabase, db2: EventDatabase) -> List[Event]:
    a, b = Counter(db1.events), Counter(db2.events)
    return list(((a - b) + (b - a)).elements())


def robustness_decay(
    u: NodeId,
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    tracks: Optional[Tracks],
    db1: EventDatabase,
    db2: EventDatabase,
    probe_times: Sequence[float],
    mode: str = "temporal",
    window: Optional[Tuple[float, float]] = None,
    node: Optional[NodeId] = None,
    distances: Optional[Sequence[float]] = None,
    variant: ModelVariant = ModelVariant.STEMMED,
) -> DecayCurve:
    """
    |lambda_u under db1 - lambda_u under db2| at the probe times.

    temporal: the databases may differ only inside ``window`` = (t1, T0); the returned
    envelope is C * exp(-delta_k (tau - T0)) for tau > T0, with C fitted on the first probe
    after T0 (``anchor``); ``DecayCurve.covered`` checks the later probes against it.
    spatial: the databases may differ only at ``node``; the distance between the
    communities of ``u`` and ``node`` is swept over ``distances``.
    """
    probes = np.asarray(probe_times, dtype=float)
    diff = _difference(db1, db2)

    def gaps_for(network: NetworkSpec) -> np.ndarray:
        return np.array(
            [
                abs(
                    intensity(u, t, params, network, tracks, db1, variant)
                    - intensity(u, t, params, network, tracks, db2, variant)
                )
                for t in probes
            ]
        )

    if mode == "temporal":
        if window is None:
            raise InvalidInputError("temporal mode needs the perturbation window")
        t1, t0 = window
        outside = [e for e in diff if not t1 <= e.time <= t0]
        if outside:
            raise InvalidInputError(f"{len(outside)} differing records lie outside {window}")
        gaps = gaps_for(spec)
        delta_k = params[u].delta_k
        after = probes > t0
        if not np.any(after):
            return DecayCurve("temporal", probes, gaps, np.full(len(probes), np.nan))
        first = int(np.flatnonzero(after)[np.argmin(probes[after])])
        anchor = float(probes[first])
        constant = float(gaps[first] * np.exp(delta_k * (anchor - t0)))
        envelope = np.where(after, constant * np.exp(-delta_k * (probes - t0)), np.nan)
        return DecayCurve("temporal", probes, gaps, envelope, constant, anchor=anchor)

    if mode == "spatial":
        if node is None or distances is None:
            raise InvalidInputError("spatial mode needs the perturbed node and a distance sweep")
        spec.check(node)
        if node.community == u.community:
            raise InvalidInputError("spatial mode needs the perturbed node in another community")
        foreign = [e for e in diff if e.node != node]
        if foreign:
            raise InvalidInputError(f"{len(foreign)} differing records are not at {spec.label(node)}")
        sweep = np.asarray(distances, dtype=float)
        gaps = np.stack(
            [gaps_for(spec.with_distance(u.community, node.community, d)) for d in sweep]
        )
        return DecayCurve("spatial", probes, gaps, distances=sweep)

    raise InvalidInputError(f"unknown robustness mode {mode!r}")
