import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from stemmed.coop import CoopSchedule, EditOperation, ErrorInjection
from stemmed.forecast import ForecastConfig
from stemmed.models.fit import FitOptions
from stemmed.models.model import Event, ModelVariant, NetworkSpec
from stemmed.utils.errors import InvalidInputError

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit", "forecast", "recover", "coop", "inspect")


@dataclass
class DataConfig:
    """
    Input files.

    Args:
        events: events CSV.
        covariates: covariates CSV; may be omitted when the covariate dimension is 0.
        distances: community distance matrix CSV.
        drugs: drug-class labels in index order; collected from the events file when omitted.
        params: fitted parameters JSON.
        scenario: scenario JSON written by ``simulate``.
    """

    events: Optional[str] = None
    covariates: Optional[str] = None
    distances: Optional[str] = None
    drugs: Optional[List[str]] = None
    params: Optional[str] = None
    scenario: Optional[str] = None


@dataclass
class SimulateConfig:
    """
    Args:
        n_nodes: network size; communities x drugs is the factorization closest to square.
        horizon: simulated span [0, horizon].
        covariate_dim: p.
        mark_dim: q.
        covariate_period: spacing of covariate breakpoints.
        co_involvement: probability that another drug joins an event's involved set.
        covariates: ``iid`` (redrawn every period) or ``drift`` (rising staircase).
        gt: parameter block pinned on node ``node_index`` (e.g. the recovery ground truth).
        node_index: node receiving ``gt``.
    """

    n_nodes: int = 1
    horizon: float = 101.0
    covariate_dim: int = 1
    mark_dim: int = 1
    covariate_period: float = 10.0
    co_involvement: float = 0.2
    covariates: str = "iid"
    gt: Optional[Dict[str, Any]] = None
    node_index: int = 0


@dataclass
class FitConfig:
    """
    Args:
        init: ``random`` (simulation-study ranges) or ``grid`` (grid search over alpha, delta_k, delta_g).
        horizon: common observation end; per-node last event time when omitted.
        covariate_dim: p used for initial values.
        nodes: node labels to fit; all when omitted.
        options: FitOptions fields.
    """

    init: str = "random"
    horizon: Optional[float] = None
    covariate_dim: Optional[int] = None
    nodes: Optional[List[str]] = None
    options: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ForecastSection:
    bin_width: float = 1.0
    horizon: Optional[float] = None
    n_sample_paths: int = 0
    start: Optional[float] = None
    freeze_theta: bool = False
    continuous: bool = False


@dataclass
class RecoverConfig:
    n_nodes: List[int] = field(default_factory=lambda: [1])
    cutoffs: List[float] = field(default_factory=lambda: [50.0, 100.0])
    replications: int = 100
    horizon: float = 101.0
    gt: Optional[Dict[str, Any]] = None
    node_index: int = 0
    n_starts: int = 3


@dataclass
class CoopConfig:
    """
    Args:
        upload_period: n.
        refresh_period: M.
        horizons: forecast horizons in bins.
        start: end of the initial training span.
        end: last time with realized data; the history end when omitted.
        bin_width: forecast bin width.
        variants: variants evaluated on the same data.
        n_sample_paths: 0 for expected-count forecasts.
        injection: ``{"window": [t1, t2], "seed": s, "operations": [{"kind": ..., ...}]}``.
    """

    upload_period: float = 3.0
    refresh_period: float = 3.0
    horizons: List[int] = field(default_factory=lambda: [1, 3, 6, 9, 12])
    start: float = 24.0
    end: Optional[float] = None
    bin_width: float = 1.0
    variants: List[str] = field(default_factory=lambda: ["stemmed", "sepp", "mepp"])
    n_sample_paths: int = 0
    injection: Optional[Dict[str, Any]] = None


@dataclass
class InspectConfig:
    times: List[float] = field(default_factory=list)
    windows: List[List[float]] = field(default_factory=list)


SECTIONS = {
    "data": DataConfig,
    "simulate": SimulateConfig,
    "fit": FitConfig,
    "forecast": ForecastSection,
    "recover": RecoverConfig,
    "coop": CoopConfig,
    "inspect": InspectConfig,
}


@dataclass
class RunConfig:
    """
    Resolved settings of one command-line run.

    Args:
        command: subcommand name.
        seed: master seed of every stochastic step.
        workers: thread count (None = all cores).
        out_dir: directory receiving every output and ``resolved_config.json``.
        variant: model variant for fit, forecast and inspect.
    """

    command: str
    seed: int = 0
    workers: Optional[int] = None
    out_dir: str = "outputs"
    variant: str = "stemmed"
    data: DataConfig = field(default_factory=DataConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    forecast: ForecastSection = field(default_factory=ForecastSection)
    recover: RecoverConfig = field(default_factory=RecoverConfig)
    coop: CoopConfig = field(default_factory=CoopConfig)
    inspect: InspectConfig = field(default_factory=InspectConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InvalidInputError(f"unknown config keys {sorted(unknown)}")
        for name, section in SECTIONS.items():
            data[name] = _section(section, data.get(name) or {}, name)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def model_variant(self) -> ModelVariant:
        return _variant(self.variant)

    def fit_options(self) -> FitOptions:
        options = {"seed": self.seed, **self.fit.options}
        try:
            return FitOptions(**options)
        except TypeError as exc:
            raise InvalidInputError(f"invalid fit options: {exc}") from exc

    def forecast_config(self, horizon: float) -> ForecastConfig:
        section = self.forecast
        return ForecastConfig(
            bin_width=section.bin_width,
            horizon=horizon,
            n_sample_paths=section.n_sample_paths,
            seed=self.seed,
            start=section.start,
            freeze_theta=section.freeze_theta,
            workers=self.workers,
        )

    def coop_schedule(self, end: float) -> CoopSchedule:
        section = self.coop
        return CoopSchedule(
            upload_period=section.upload_period,
            refresh_period=section.refresh_period,
            horizons=tuple(section.horizons),
            start=section.start,
            end=section.end if section.end is not None else end,
            bin_width=section.bin_width,
        )

    def error_injection(self, spec: NetworkSpec) -> Optional[ErrorInjection]:
        raw = self.coop.injection
        if not raw:
            return None
        try:
            operations = [_operation(op, spec) for op in raw.get("operations", [])]
            return ErrorInjection(tuple(raw["window"]), operations, int(raw.get("seed", self.seed)))
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"invalid injection settings: {exc}") from exc

    def validate(self) -> "RunConfig":
        """Checks every setting the command will use before anything runs."""
        if self.command not in COMMANDS:
            raise InvalidInputError(f"unknown command {self.command!r}")
        if self.workers is not None and self.workers < 1:
            raise InvalidInputError("workers must be >= 1")
        self.model_variant()
        self.fit_options()
        data = self.data
        if self.command == "fit":
            _require_files(data, ["events", "distances"])
            if self.fit.init not in ("random", "grid"):
                raise InvalidInputError(f"unknown init strategy {self.fit.init!r}")
        elif self.command == "forecast":
            _require_files(data, ["events", "distances", "params"])
            if self.forecast.horizon is None:
                raise InvalidInputError("forecast.horizon is required")
            self.forecast_config(self.forecast.horizon)
        elif self.command == "coop":
            if not data.scenario:
                _require_files(data, ["events", "distances"])
            else:
                _require_files(data, ["scenario"])
            for variant in self.coop.variants:
                _variant(variant)
            if self.coop.end is not None:
                self.coop_schedule(self.coop.end)
        elif self.command == "inspect":
            _require_files(data, ["events", "distances", "params"])
            if not self.inspect.times and not self.inspect.windows:
                raise InvalidInputError("inspect needs times or windows")
            if any(len(w) != 2 or not 0 <= w[0] < w[1] for w in self.inspect.windows):
                raise InvalidInputError("inspect windows are [start, end] pairs with start < end")
        elif self.command == "recover":
            if self.recover.replications < 1:
                raise InvalidInputError("replications must be >= 1")
        elif self.command == "simulate":
            if self.simulate.n_nodes < 1 or self.simulate.horizon < 0:
                raise InvalidInputError("simulate needs n_nodes >= 1 and horizon >= 0")
        return self

    def write_resolved(self, out_dir=None) -> Path:
        path = Path(out_dir or self.out_dir) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info(f"resolved config written to {path.as_posix()}")
        return path


def _section(cls, values: Dict[str, Any], name: str):
    unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise InvalidInputError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**values)


def _variant(name: str) -> ModelVariant:
    try:
        return ModelVariant(str(name).lower())
    except ValueError:
        raise InvalidInputError(f"unknown model variant {name!r}") from None


def _operation(raw: Dict[str, Any], spec: NetworkSpec) -> EditOperation:
    targets = tuple(spec.parse_label(label) for label in raw.get("target_nodes", []))
    events = tuple(
        Event(
            e["time"],
            spec.parse_label(e["node"]),
            tuple(e.get("features", ())),
            frozenset(spec.drugs.index(d) for d in e.get("drugs_involved", ())),
        )
        for e in raw.get("events", [])
    )
    return EditOperation(raw["kind"], targets, float(raw.get("magnitude", 1.0)), events)


def _require_files(data: DataConfig, keys: Sequence[str]) -> None:
    for key in keys:
        value = getattr(data, key)
        if not value:
            raise InvalidInputError(f"data.{key} is required")
        if not Path(value).exists():
            raise InvalidInputError(f"data.{key}: {value} does not exist")
    if data.covariates and not Path(data.covariates).exists():
        raise InvalidInputError(f"data.covariates: {data.covariates} does not exist")


def parse_override(item: str):
    """``a.b=value`` -> (["a", "b"], value); the value is read as JSON when possible."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise InvalidInputError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        keys, value = parse_override(item)
        target = data
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise InvalidInputError(f"override {item!r} descends into a non-section")
        target[keys[-1]] = value
    return data


def load_config(
    command: str,
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    **flags,
) -> RunConfig:
    """Config file, then ``--set`` overrides, then explicit flags (ignored when None)."""
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise InvalidInputError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise InvalidInputError(f"{path} must hold a JSON object")
    data = apply_overrides(data, overrides)
    data["command"] = command
    for key, value in flags.items():
        if value is not None:
            data[key] = value
    try:
        config = RunConfig.from_dict(data)
    except TypeError as exc:
        raise InvalidInputError(f"invalid config: {exc}") from exc
    return config.validate()
