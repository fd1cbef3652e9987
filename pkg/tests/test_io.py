import json

import numpy as np
import pytest

from galtraj.exceptions import ScenarioParseError, SchemaError
from galtraj.io import load_dataset, read_header, save_dataset, scenario_to_record
from galtraj.world import DatasetConfig, Horizons, synthesize_dataset


def _same(a, b):
    assert a.scenario_id == b.scenario_id
    assert a.horizons == b.horizons
    assert a.map.lane_width == b.map.lane_width
    assert a.map.connectivity == b.map.connectivity
    np.testing.assert_array_equal(a.map.drivable_area, b.map.drivable_area)
    for la, lb in zip(a.map.lanes, b.map.lanes, strict=True):
        np.testing.assert_array_equal(la, lb)
    for x, y in zip(a.agents, b.agents, strict=True):
        assert x.agent_id == y.agent_id and x.maneuver_label == y.maneuver_label
        assert x.positions.tobytes() == y.positions.tobytes()
        np.testing.assert_array_equal(x.valid_mask, y.valid_mask)


class TestRoundTrip:
    def test_ten_scenarios_bit_exact(self, tmp_path):
        scns = synthesize_dataset(DatasetConfig(count=10), seed=2)
        path = save_dataset(scns, tmp_path / "d.jsonl", seed=2, config={"count": 10})
        back = load_dataset(path)
        assert len(back) == 10
        for a, b in zip(scns, back):
            _same(a, b)

    def test_header(self, tmp_path):
        scns = synthesize_dataset(DatasetConfig(count=3), seed=2)
        path = save_dataset(scns, tmp_path / "d.jsonl", seed=2, config={"count": 3})
        header = read_header(path)
        assert header["seed"] == 2 and header["count"] == 3 and len(header["config_hash"]) == 16

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_dataset(path) == []

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(synthesize_dataset(DatasetConfig(count=4), seed=8), tmp_path / f"{name}.jsonl", seed=8)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestErrors:
    def test_truncated_last_line(self, tmp_path):
        path = save_dataset(synthesize_dataset(DatasetConfig(count=3), seed=1), tmp_path / "d.jsonl")
        text = path.read_text()
        path.write_text(text[: len(text) - 40])
        with pytest.raises(ScenarioParseError) as err:
            load_dataset(path)
        assert err.value.line == 4
        assert "line 4" in str(err.value)

    def test_horizon_mismatch(self, tmp_path):
        a = synthesize_dataset(DatasetConfig(count=1), seed=1)
        b = synthesize_dataset(DatasetConfig(count=1, horizons=Horizons(t_h=5, t_f=20)), seed=1)
        b[0].scenario_id = 1
        path = save_dataset(a, tmp_path / "d.jsonl")
        with path.open("a") as fh:
            fh.write(json.dumps(scenario_to_record(b[0])) + "\n")
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_duplicate_ids(self, tmp_path):
        a = synthesize_dataset(DatasetConfig(count=1), seed=1)
        path = save_dataset(a + a, tmp_path / "d.jsonl")
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"scenario_id": 0}\n')
        with pytest.raises(ScenarioParseError) as err:
            load_dataset(path)
        assert err.value.line == 1
