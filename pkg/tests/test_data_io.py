import json

import numpy as np
import pytest

from stemmed.models.database import EventDatabase
from stemmed.models.model import (CovariateTrack, Event, ModelVariant,
                                  NodeId, NodeParams)
from stemmed.simulate import build_scenario
from stemmed.utils import data_io
from stemmed.utils.errors import InvalidInputError, MalformedFileError


@pytest.fixture
def events_db(grid_spec):
    return EventDatabase(
        grid_spec,
        2,
        [
            Event(0.25, NodeId(0, 0), (0.1, -2.5), {0, 1}),
            Event(1.5, NodeId(1, 1), (1e-3, 4.0)),
        ],
    )


def test_events_round_trip(tmp_path, events_db, grid_spec):
    path = data_io.write_events(events_db, tmp_path / "events.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "# stemmed-events v1"
    assert lines[1] == "time,community,drug,features,drugs_involved"
    assert data_io.read_events(path, grid_spec) == events_db


def test_empty_events_file(tmp_path, grid_spec):
    path = data_io.write_events(EventDatabase(grid_spec), tmp_path / "events.csv")
    assert path.read_text().splitlines()[0] == "# stemmed-events v1"
    assert len(data_io.read_events(path, grid_spec)) == 0


def test_malformed_event_line(tmp_path, grid_spec):
    path = tmp_path / "events.csv"
    path.write_text(
        "# stemmed-events v1\n"
        "time,community,drug,features,drugs_involved\n"
        "1.0,A,opioid,0.5,opioid\n"
        "oops,A,opioid,0.5,opioid\n"
    )
    with pytest.raises(MalformedFileError) as info:
        data_io.read_events(path, grid_spec)
    assert info.value.line == 4


def test_unknown_label_and_header(tmp_path, grid_spec):
    path = tmp_path / "events.csv"
    path.write_text("# stemmed-events v1\ntime,community,drug,features,drugs_involved\n1.0,Z,opioid,,opioid\n")
    with pytest.raises(MalformedFileError):
        data_io.read_events(path, grid_spec)
    path.write_text("time,community,drug,features,drugs_involved\n")
    with pytest.raises(MalformedFileError) as info:
        data_io.read_events(path, grid_spec)
    assert info.value.line == 1
    with pytest.raises(InvalidInputError):
        data_io.read_events(tmp_path / "missing.csv", grid_spec)


def test_mixed_feature_counts(tmp_path, grid_spec):
    path = tmp_path / "events.csv"
    path.write_text(
        "# stemmed-events v1\ntime,community,drug,features,drugs_involved\n"
        '1.0,A,opioid,"0.5,0.1",opioid\n2.0,A,opioid,0.5,opioid\n'
    )
    with pytest.raises(MalformedFileError):
        data_io.read_events(path, grid_spec)


def test_distances_and_network(tmp_path, grid_spec, events_db):
    distances = data_io.write_distances(grid_spec, tmp_path / "distances.csv")
    events = data_io.write_events(events_db, tmp_path / "events.csv")
    spec = data_io.network_from_files(distances, events_path=events)
    assert spec.communities == grid_spec.communities
    assert spec.drugs == ("opioid", "stimulant")
    np.testing.assert_array_equal(spec.distances, grid_spec.distances)
    with pytest.raises(InvalidInputError):
        data_io.network_from_files(distances)


def test_covariates_round_trip(tmp_path, grid_spec):
    tracks = {
        node: CovariateTrack([0.0, 2.0 + k], [[0.1 * k, 1.0], [0.2, -1.0]])
        for k, node in enumerate(grid_spec.nodes)
    }
    path = data_io.write_covariates(tracks, grid_spec, tmp_path / "covariates.csv")
    again = data_io.read_covariates(path, grid_spec)
    for node, track in tracks.items():
        np.testing.assert_array_equal(again[node].breakpoints, track.breakpoints)
        np.testing.assert_array_equal(again[node].values, track.values)


def test_params_round_trip(tmp_path, grid_spec, gt_params):
    params = {node: gt_params.replace(gamma=0.1 + k) for k, node in enumerate(grid_spec.nodes)}
    info = {grid_spec.nodes[0]: {"loglik": -3.5, "converged": True}}
    path = data_io.write_params(params, grid_spec, tmp_path / "params.json", ModelVariant.SEPP, info)
    document = json.loads(path.read_text())
    assert document["format"] == "stemmed-params" and document["version"] == 1
    assert document["fit"]["A|opioid"]["loglik"] == -3.5
    again, variant = data_io.read_params(path, grid_spec)
    assert variant is ModelVariant.SEPP
    assert {n: p.to_dict() for n, p in again.items()} == {n: p.to_dict() for n, p in params.items()}


def test_params_document_checks(tmp_path, grid_spec):
    path = tmp_path / "params.json"
    path.write_text(json.dumps({"format": "stemmed-scenario", "version": 1}))
    with pytest.raises(MalformedFileError):
        data_io.read_params(path, grid_spec)
    path.write_text("{not json")
    with pytest.raises(MalformedFileError):
        data_io.read_params(path, grid_spec)
    path.write_text(json.dumps({"format": "stemmed-params", "version": 1, "nodes": {"A|opioid": {"gamma": -1}}}))
    with pytest.raises(InvalidInputError):
        data_io.read_params(path, grid_spec)


def test_scenario_round_trip(tmp_path):
    scenario = build_scenario(4, T=20.0, seed=3)
    scenario_path = data_io.write_scenario(scenario, tmp_path / "scenario.json")
    covariates_path = data_io.write_covariates(scenario.tracks, scenario.spec, tmp_path / "covariates.csv")
    again = data_io.read_scenario(scenario_path, covariates_path)
    assert again.horizon == 20.0 and again.seed == 3
    assert again.spec.communities == scenario.spec.communities
    np.testing.assert_allclose(again.spec.distances, scenario.spec.distances)
    for node in scenario.spec.nodes:
        assert again.params[node].to_dict() == scenario.params[node].to_dict()
        np.testing.assert_array_equal(again.tracks[node].values, scenario.tracks[node].values)
    assert again.mark_model.to_dict() == scenario.mark_model.to_dict()


def test_param_defaults(grid_spec, tmp_path):
    path = tmp_path / "params.json"
    path.write_text(json.dumps({"format": "stemmed-params", "version": 1, "nodes": {"B|stimulant": {"gamma": 0.3}}}))
    params, variant = data_io.read_params(path, grid_spec)
    assert variant is ModelVariant.STEMMED
    assert params[NodeId(1, 1)].to_dict() == NodeParams(0.3).to_dict()
