"""
Text formats read and written by the command line.

Every file starts with a version line ``# stemmed-<kind> v1``; tabular files are CSV
below it, structured files are JSON with ``format`` and ``version`` keys. Event features are
comma-separated and involved drugs ``;``-separated inside one quoted CSV field.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stemmed.models.database import EventDatabase
from stemmed.models.model import (CovariateTrack, Event, ModelVariant,
                                  NetworkSpec, NodeId, NodeParams)
from stemmed.utils.errors import InvalidInputError, MalformedFileError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
EVENT_COLUMNS = ["time", "community", "drug", "features", "drugs_involved"]
# version line and column header precede the first data row
FIRST_DATA_LINE = 3


def header_line(kind: str) -> str:
    return f"# stemmed-{kind} v{FORMAT_VERSION}"


def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_table(df: pd.DataFrame, path, kind: str) -> Path:
    path = _prepare(path)
    with open(path, "w", newline="") as f:
        f.write(header_line(kind) + "\n")
        df.to_csv(f, index=False)
    logger.info(f"{kind} written to {path.as_posix()}")
    return path


def read_table(path, kind: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path} does not exist")
    with open(path) as f:
        first = f.readline().strip()
    if first != header_line(kind):
        raise MalformedFileError(path, 1, f"expected header {header_line(kind)!r}, got {first!r}")
    try:
        return pd.read_csv(path, skiprows=1, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise MalformedFileError(path, 2, str(exc)) from exc


def _require(df: pd.DataFrame, columns: Sequence[str], path) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise MalformedFileError(path, 2, f"missing columns {missing}")


def _split(cell: str, sep: str = ";") -> List[str]:
    return [part.strip() for part in str(cell).split(sep) if part.strip()]


# ---------------------------------------------------------------- network


def write_distances(spec: NetworkSpec, path) -> Path:
    df = pd.DataFrame(spec.distances, columns=list(spec.communities))
    df.insert(0, "community", list(spec.communities))
    return write_table(df, path, "distances")


def read_distances(path) -> Tuple[Tuple[str, ...], np.ndarray]:
    """Community labels (row order) and the distance matrix."""
    df = read_table(path, "distances")
    _require(df, ["community"], path)
    communities = tuple(df["community"])
    if list(df.columns[1:]) != list(communities):
        raise MalformedFileError(path, 2, "distance columns must repeat the community labels in row order")
    try:
        distances = df[list(communities)].to_numpy(dtype=float)
    except ValueError as exc:
        raise MalformedFileError(path, FIRST_DATA_LINE, f"non-numeric distance: {exc}") from exc
    return communities, distances


def network_from_files(distances_path, drugs: Optional[Sequence[str]] = None, events_path=None) -> NetworkSpec:
    """NetworkSpec from a distance file; drug labels are given or collected from the events file."""
    communities, distances = read_distances(distances_path)
    if drugs is None:
        if events_path is None:
            raise InvalidInputError("drug labels are needed when no events file is given")
        df = read_table(events_path, "events")
        _require(df, EVENT_COLUMNS, events_path)
        labels = set(df["drug"])
        for cell in df["drugs_involved"]:
            labels.update(_split(cell))
        drugs = sorted(labels)
    return NetworkSpec(communities, tuple(drugs), distances)


# ---------------------------------------------------------------- events


def events_frame(events: Iterable[Event], spec: NetworkSpec) -> pd.DataFrame:
    rows = [
        {
            "time": repr(e.time),
            "community": spec.communities[e.node.community],
            "drug": spec.drugs[e.node.drug],
            "features": ",".join(repr(f) for f in e.features),
            "drugs_involved": ";".join(spec.drugs[d] for d in sorted(e.drugs_involved)),
        }
        for e in events
    ]
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def write_events(db, path) -> Path:
    return write_table(events_frame(db, db.spec), path, "events")


def read_events(path, spec: NetworkSpec, n_features: Optional[int] = None) -> EventDatabase:
    df = read_table(path, "events")
    _require(df, EVENT_COLUMNS, path)
    events = []
    for row, record in enumerate(df.itertuples(index=False)):
        line = row + FIRST_DATA_LINE
        try:
            node = spec.node(record.community, record.drug)
            features = tuple(float(f) for f in _split(record.features, ","))
            drugs = frozenset(spec.drugs.index(d) for d in _split(record.drugs_involved))
            events.append(Event(float(record.time), node, features, drugs))
        except (ValueError, InvalidInputError) as exc:
            raise MalformedFileError(path, line, str(exc)) from exc
    dims = {len(e.features) for e in events}
    if n_features is None:
        n_features = dims.pop() if len(dims) == 1 else (0 if not dims else -1)
    if n_features < 0 or any(d != n_features for d in dims):
        raise MalformedFileError(path, FIRST_DATA_LINE, "events carry different numbers of features")
    logger.info(f"read {len(events)} events from {Path(path).as_posix()}")
    return EventDatabase(spec, n_features, events)


# ---------------------------------------------------------------- covariates


def write_covariates(tracks: Mapping[NodeId, CovariateTrack], spec: NetworkSpec, path) -> Path:
    rows = []
    for node in spec.nodes:
        track = tracks.get(node)
        if track is None:
            continue
        for t, values in zip(track.breakpoints, track.values):
            row = {
                "community": spec.communities[node.community],
                "drug": spec.drugs[node.drug],
                "time": repr(float(t)),
            }
            row.update({f"y{k}": repr(float(v)) for k, v in enumerate(values)})
            rows.append(row)
    return write_table(pd.DataFrame(rows), path, "covariates")


def read_covariates(path, spec: NetworkSpec) -> Dict[NodeId, CovariateTrack]:
    df = read_table(path, "covariates")
    _require(df, ["community", "drug", "time"], path)
    value_columns = [c for c in df.columns if c.startswith("y")]
    rows: Dict[NodeId, List[Tuple[float, List[float], int]]] = {}
    for row, record in enumerate(df.to_dict("records")):
        line = row + FIRST_DATA_LINE
        try:
            node = spec.node(record["community"], record["drug"])
            rows.setdefault(node, []).append(
                (float(record["time"]), [float(record[c]) for c in value_columns], line)
            )
        except (ValueError, InvalidInputError) as exc:
            raise MalformedFileError(path, line, str(exc)) from exc
    tracks = {}
    for node, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        try:
            tracks[node] = CovariateTrack(
                np.array([e[0] for e in entries]),
                np.array([e[1] for e in entries]).reshape(len(entries), len(value_columns)),
            )
        except InvalidInputError as exc:
            raise MalformedFileError(path, entries[0][2], f"{spec.label(node)}: {exc}") from exc
    return tracks


# ---------------------------------------------------------------- json documents


def _write_json(data: dict, path, kind: str) -> Path:
    path = _prepare(path)
    document = {"format": f"stemmed-{kind}", "version": FORMAT_VERSION, **data}
    with open(path, "w") as f:
        json.dump(document, f, indent=2)
    logger.info(f"{kind} written to {path.as_posix()}")
    return path


def _read_json(path, kind: str) -> dict:
    path = Path(path)
    try:
        with open(path) as f:
            document = json.load(f)
    except FileNotFoundError:
        raise InvalidInputError(f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise MalformedFileError(path, exc.lineno, exc.msg) from exc
    if document.get("format") != f"stemmed-{kind}" or document.get("version") != FORMAT_VERSION:
        raise MalformedFileError(path, 1, f"not a stemmed-{kind} v{FORMAT_VERSION} document")
    return document


def write_params(
    params: Mapping[NodeId, NodeParams],
    spec: NetworkSpec,
    path,
    variant: ModelVariant = ModelVariant.STEMMED,
    fit_info: Optional[Mapping[NodeId, dict]] = None,
) -> Path:
    data = {
        "variant": ModelVariant(variant).value,
        "nodes": {spec.label(node): params[node].to_dict() for node in spec.nodes if node in params},
    }
    if fit_info:
        data["fit"] = {spec.label(node): info for node, info in fit_info.items()}
    return _write_json(data, path, "params")


def read_params(path, spec: NetworkSpec) -> Tuple[Dict[NodeId, NodeParams], ModelVariant]:
    document = _read_json(path, "params")
    try:
        variant = ModelVariant(document.get("variant", "stemmed"))
        params = {
            spec.parse_label(label): NodeParams.from_dict(block)
            for label, block in document["nodes"].items()
        }
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedFileError(path, 1, f"invalid parameter document: {exc}") from exc
    return params, variant


def write_scenario(scenario, path) -> Path:
    spec = scenario.spec
    mark_model = scenario.mark_model.to_dict() if hasattr(scenario.mark_model, "to_dict") else None
    data = {
        "communities": list(spec.communities),
        "drugs": list(spec.drugs),
        "distances": spec.distances.tolist(),
        "horizon": scenario.horizon,
        "seed": scenario.seed,
        "variant": ModelVariant(scenario.variant).value,
        "mark_model": mark_model,
        "params": {spec.label(node): scenario.params[node].to_dict() for node in spec.nodes},
    }
    return _write_json(data, path, "scenario")


def read_scenario(path, covariates_path=None):
    """Scenario from its JSON document; tracks come from ``covariates_path`` when given."""
    from stemmed.simulate import MarkModel, Scenario

    document = _read_json(path, "scenario")
    try:
        spec = NetworkSpec(document["communities"], document["drugs"], document["distances"])
        params = {spec.parse_label(k): NodeParams.from_dict(v) for k, v in document["params"].items()}
        mark_model = MarkModel(**(document.get("mark_model") or {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(path, 1, f"invalid scenario document: {exc}") from exc
    tracks = read_covariates(covariates_path, spec) if covariates_path else {}
    return Scenario(
        spec=spec,
        tracks=tracks,
        params=params,
        mark_model=mark_model,
        horizon=float(document["horizon"]),
        seed=int(document.get("seed", 0)),
        variant=ModelVariant(document.get("variant", "stemmed")),
    )
