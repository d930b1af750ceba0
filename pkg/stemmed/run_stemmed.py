import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from stemmed.coop import compare_variants, mspe
from stemmed.forecast import (ForecastConfig, continuous_predict,
                              multi_period_predict)
from stemmed.models.database import EventDatabase
from stemmed.models.fit import fit_network, grid_init, sample_init
from stemmed.models.likelihood import compensator_parts, last_event_horizons
from stemmed.models.model import (ModelVariant, NodeId, NodeParams,
                                  arc_matrix, restrict_params)
from stemmed.simulate import (build_scenario, recovery_experiment,
                              simulate_scenario)
from stemmed.utils import data_io
from stemmed.utils.config_and_args import RunConfig, load_config
from stemmed.utils.errors import InvalidInputError, StemmedError
from stemmed.utils.utils import (derive_seed, log_level, set_logger, set_seed,
                                 str2bool)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


def _out(config: RunConfig, name: str) -> Path:
    return Path(config.out_dir) / name


def _load_history(config: RunConfig):
    data = config.data
    spec = data_io.network_from_files(data.distances, data.drugs, data.events)
    db = data_io.read_events(data.events, spec)
    tracks = data_io.read_covariates(data.covariates, spec) if data.covariates else None
    return spec, db, tracks


def _covariate_dim(tracks, configured: Optional[int]) -> int:
    if tracks:
        dims = {track.dim for track in tracks.values()}
        if len(dims) != 1:
            raise InvalidInputError("covariate tracks disagree on their dimension")
        return dims.pop()
    if configured:
        raise InvalidInputError(f"covariate dimension {configured} configured but no covariates file given")
    return 0


def _gt(raw: Optional[dict]) -> Optional[NodeParams]:
    return NodeParams.from_dict(raw) if raw else None


def cmd_simulate(config: RunConfig) -> int:
    settings = config.simulate
    if config.data.scenario:
        scenario = data_io.read_scenario(config.data.scenario, config.data.covariates)
    else:
        scenario = build_scenario(
            settings.n_nodes,
            settings.horizon,
            config.seed,
            p=settings.covariate_dim,
            q=settings.mark_dim,
            covariate_period=settings.covariate_period,
            co_involvement=settings.co_involvement,
            covariates=settings.covariates,
        )
        gt = _gt(settings.gt)
        if gt is not None:
            if (gt.p, gt.q) != (scenario.p, scenario.q):
                raise InvalidInputError(
                    f"gt has dimensions {(gt.p, gt.q)}, the scenario {(scenario.p, scenario.q)}"
                )
            scenario.params[scenario.spec.node_at(settings.node_index)] = gt
    if scenario.horizon > 0:
        db = simulate_scenario(scenario, seed=derive_seed(config.seed, 1))
    else:
        db = EventDatabase(scenario.spec, scenario.q)
    logger.info(f"simulated {len(db)} events on {scenario.spec.n_nodes} nodes up to {scenario.horizon}")
    data_io.write_events(db, _out(config, "events.csv"))
    data_io.write_scenario(scenario, _out(config, "scenario.json"))
    data_io.write_distances(scenario.spec, _out(config, "distances.csv"))
    if scenario.p:
        data_io.write_covariates(scenario.tracks, scenario.spec, _out(config, "covariates.csv"))
    return EXIT_OK


def cmd_fit(config: RunConfig) -> int:
    spec, db, tracks = _load_history(config)
    variant = config.model_variant()
    p = _covariate_dim(tracks, config.fit.covariate_dim)
    q = db.n_features
    nodes = [spec.parse_label(label) for label in config.fit.nodes] if config.fit.nodes else list(spec.nodes)
    if config.fit.horizon is not None:
        horizons = config.fit.horizon
    else:
        horizons = last_event_horizons(db, spec, fallback=db.end_time or None)

    if config.data.params:
        inits, _ = data_io.read_params(config.data.params, spec)
    else:
        inits = {}
        for node in nodes:
            seed = derive_seed(config.seed, spec.index(node))
            if config.fit.init == "grid":
                T_u = horizons if not isinstance(horizons, dict) else horizons[node]
                try:
                    inits[node] = grid_init(node, db, spec, tracks, T_u, seed=seed, p=p, q=q, variant=variant)
                    continue
                except StemmedError as exc:
                    logger.warning(f"grid init failed for {spec.label(node)}, drawing at random: {exc}")
            inits[node] = restrict_params(sample_init(seed, p, q), variant, spec.n_nodes)

    results = fit_network(
        db, spec, tracks, horizons, inits, config.fit_options(), variant, config.workers, nodes
    )
    fit_info = {
        node: {
            "loglik": r.loglik,
            "iterations": r.iterations,
            "converged": r.converged,
            "boundary": list(r.boundary),
            "error": r.error,
        }
        for node, r in results.items()
    }
    params = {node: r.params for node, r in results.items()}
    data_io.write_params(params, spec, _out(config, "params.json"), variant, fit_info)
    trace = pd.DataFrame(
        [
            {"node": spec.label(node), "iteration": it, "loglik": value}
            for node, r in results.items()
            for it, value in r.trace
        ],
        columns=["node", "iteration", "loglik"],
    )
    data_io.write_table(trace, _out(config, "trace.csv"), "trace")
    failed = [spec.label(node) for node, r in results.items() if not r.ok]
    if failed:
        logger.warning(f"{len(failed)} of {len(results)} node fits failed: {failed}")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_forecast(config: RunConfig) -> int:
    spec, db, tracks = _load_history(config)
    params, variant = data_io.read_params(config.data.params, spec)
    forecast_config: ForecastConfig = config.forecast_config(config.forecast.horizon)
    predict = continuous_predict if config.forecast.continuous else multi_period_predict
    result = predict(db, params, spec, tracks, forecast_config, variant)
    logger.info(f"forecast {result.metadata['mode']} over {result.n_bins} bins from {result.metadata['start']}")
    data_io.write_table(result.to_frame(spec), _out(config, "forecast.csv"), "forecast")
    return EXIT_OK


def cmd_recover(config: RunConfig) -> int:
    settings = config.recover
    gt = _gt(settings.gt)
    estimates, summaries, failures = [], [], []
    for n_nodes in settings.n_nodes:
        kwargs = {"gt": gt} if gt is not None else {}
        report = recovery_experiment(
            n_nodes,
            cutoffs=tuple(settings.cutoffs),
            replications=settings.replications,
            seed=derive_seed(config.seed, n_nodes),
            horizon=settings.horizon,
            fit_options=config.fit_options(),
            workers=config.workers,
            node_index=settings.node_index,
            n_starts=settings.n_starts,
            **kwargs,
        )
        estimates.append(report.estimates)
        summaries.append(report.summary)
        failures += report.failures
    data_io.write_table(pd.concat(estimates, ignore_index=True), _out(config, "recovery_estimates.csv"), "recovery-estimates")
    data_io.write_table(pd.concat(summaries, ignore_index=True), _out(config, "recovery.csv"), "recovery")
    if failures:
        logger.warning(f"{len(failures)} replication fits failed")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_coop(config: RunConfig) -> int:
    if config.data.scenario:
        truth = data_io.read_scenario(config.data.scenario, config.data.covariates)
        spec, tracks, end = truth.spec, truth.tracks, truth.horizon
    else:
        spec, truth, tracks = _load_history(config)
        end = truth.end_time
    schedule = config.coop_schedule(end)
    log = compare_variants(
        truth,
        [ModelVariant(v.lower()) for v in config.coop.variants],
        schedule,
        variant_workers=1,
        fit_options=config.fit_options(),
        seed=config.seed,
        tracks=tracks,
        forecast=ForecastConfig(n_sample_paths=config.coop.n_sample_paths, show_progress=False),
        injection=config.error_injection(spec),
        workers=config.workers,
    )
    data_io.write_table(log, _out(config, "eval_log.csv"), "eval-log")
    data_io.write_table(mspe(log, ("drug",)), _out(config, "mspe.csv"), "mspe")
    if log["refit_failed"].any():
        logger.warning("some refits failed; their nodes carried previous parameters forward")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_inspect(config: RunConfig) -> int:
    spec, db, tracks = _load_history(config)
    params, variant = data_io.read_params(config.data.params, spec)
    span = db.end_time
    rows = []
    for t in config.inspect.times:
        if not 0 <= t <= span:
            raise InvalidInputError(f"inspect time {t} outside the history span [0, {span}]")
        matrix = arc_matrix(t, params, spec, db, variant)
        for i, target in enumerate(spec.nodes):
            for j, source in enumerate(spec.nodes):
                rows.append(
                    {"time": t, "target": spec.label(target), "source": spec.label(source), "weight": matrix[i, j]}
                )
    if config.inspect.times:
        data_io.write_table(pd.DataFrame(rows), _out(config, "arcs.csv"), "arcs")

    if config.inspect.windows:
        shares = []
        for start, end in config.inspect.windows:
            parts: Dict[NodeId, tuple] = {
                node: compensator_parts(node, start, end, params, spec, tracks, db, variant)
                for node in spec.nodes
            }
            for node, (baseline, triggering) in parts.items():
                shares.append(_share_row("node", spec.label(node), start, end, baseline, triggering))
            for c, community in enumerate(spec.communities):
                baseline = sum(b for node, (b, _) in parts.items() if node.community == c)
                triggering = sum(g for node, (_, g) in parts.items() if node.community == c)
                shares.append(_share_row("community", community, start, end, baseline, triggering))
        data_io.write_table(pd.DataFrame(shares), _out(config, "triggering_share.csv"), "triggering-share")
    return EXIT_OK


def _share_row(level, name, start, end, baseline, triggering) -> dict:
    total = baseline + triggering
    return {
        "level": level,
        "name": name,
        "window_start": start,
        "window_end": end,
        "baseline": baseline,
        "triggering": triggering,
        "share": triggering / total if total > 0 else 0.0,
    }


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "recover": cmd_recover,
    "coop": cmd_coop,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.register("type", "custom_bool", str2bool)
    common.add_argument("--config", type=str, default=None, help="Path to a JSON run config")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides the config)")
    common.add_argument("--workers", type=int, default=None, help="Worker threads (default: all cores)")
    common.add_argument("--out-dir", type=str, default=None, help="Output directory")
    common.add_argument("--variant", type=str, default=None, help="stemmed, sepp, mepp or const")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted config override, e.g. fit.options.max_iterations=200",
    )
    common.add_argument("--log-level", type=log_level, default=logging.INFO, help="Logging level name or number")

    parser = argparse.ArgumentParser(prog="stemmed", description="Dynamic network point-process engine")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, parents=[common])
        sub.register("type", "custom_bool", str2bool)
        if name == "forecast":
            sub.add_argument("--freeze-theta", type="custom_bool", default=None, help="Hold theta at its start value")
            sub.add_argument("--continuous", type="custom_bool", default=None, help="Thinning-based forecast")
    return parser


def _flag_overrides(args) -> List[str]:
    overrides = list(args.overrides)
    for flag in ("freeze_theta", "continuous"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"forecast.{flag}={json.dumps(value)}")
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_logger(args.log_level)
    try:
        config = load_config(
            args.command,
            args.config,
            _flag_overrides(args),
            seed=args.seed,
            workers=args.workers,
            out_dir=args.out_dir,
            variant=args.variant,
        )
        set_seed(config.seed)
        config.write_resolved()
        return COMMANDS[args.command](config)
    except InvalidInputError as exc:
        logger.error(str(exc))
        return EXIT_INVALID
    except OSError as exc:
        logger.error(f"cannot write outputs: {exc}")
        return EXIT_INVALID
    except StemmedError as exc:
        logger.error(str(exc))
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
