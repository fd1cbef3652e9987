"""Line-delimited scenario files.

Line 1 is ``{"header": {...}}`` (config hash, seed, horizons); every further
line is one scenario record. Floats are written with ``repr`` so a
save/load round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import ScenarioParseError, SchemaError
from .world import MANEUVERS, AgentTrack, Horizons, MapGraph, Scenario


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _pts(arr) -> list:
    return [[float(x), float(y)] for x, y in np.asarray(arr, dtype=float)]


def map_to_record(m: MapGraph) -> dict:
    return {
        "lanes": [_pts(lane) for lane in m.lanes],
        "lane_width": float(m.lane_width),
        "drivable_area": _pts(m.drivable_area),
        "connectivity": [list(map(int, c)) for c in m.connectivity],
        "topology": m.topology,
    }


def map_from_record(rec: dict) -> MapGraph:
    return MapGraph(
        lanes=[np.array(lane, dtype=float) for lane in rec["lanes"]],
        lane_width=float(rec["lane_width"]),
        drivable_area=np.array(rec["drivable_area"], dtype=float),
        connectivity=[tuple(c) for c in rec["connectivity"]],
        topology=rec.get("topology", "unknown"),
    )


def scenario_to_record(scn: Scenario) -> dict:
    return {
        "scenario_id": int(scn.scenario_id),
        "horizons": scn.horizons.as_dict(),
        "map": map_to_record(scn.map),
        "agents": [
            {
                "agent_id": int(a.agent_id),
                "positions": _pts(a.positions),
                "valid_mask": [bool(v) for v in a.valid_mask],
                "maneuver_label": a.maneuver_label,
            }
            for a in scn.agents
        ],
    }


def scenario_from_record(rec: dict) -> Scenario:
    hz = Horizons(**rec["horizons"])
    agents = []
    for a in rec["agents"]:
        if a["maneuver_label"] not in MANEUVERS:
            raise ValueError(f"unknown maneuver label {a['maneuver_label']!r}")
        pos = np.array(a["positions"], dtype=float).reshape(-1, 2)
        mask = np.array(a["valid_mask"], dtype=bool)
        if len(pos) != hz.n_steps or len(mask) != hz.n_steps:
            raise ValueError(f"agent {a['agent_id']}: track length does not match horizons")
        agents.append(AgentTrack(int(a["agent_id"]), pos, mask, a["maneuver_label"]))
    return Scenario(int(rec["scenario_id"]), map_from_record(rec["map"]), agents, hz)


def save_dataset(scenarios, path, *, seed=None, config=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scenarios = list(scenarios)
    header = {
        "config_hash": config_hash(config) if config is not None else None,
        "seed": seed,
        "count": len(scenarios),
        "horizons": scenarios[0].horizons.as_dict() if scenarios else None,
    }
    with path.open("w") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for scn in scenarios:
            fh.write(json.dumps(scenario_to_record(scn), separators=(",", ":")) + "\n")
    return path


def read_header(path) -> dict | None:
    with Path(path).open() as fh:
        first = fh.readline()
    if not first.strip():
        return None
    try:
        rec = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(str(exc), path, 1) from exc
    return rec.get("header")


def load_dataset(path) -> list:
    path = Path(path)
    out: list = []
    horizons = None
    ids = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScenarioParseError(f"malformed record ({exc.msg})", path, lineno) from exc
            if "header" in rec:
                continue
            try:
                scn = scenario_from_record(rec)
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioParseError(f"bad scenario record: {exc}", path, lineno) from exc
            if horizons is None:
                horizons = scn.horizons
            elif scn.horizons != horizons:
                raise SchemaError(f"{path}:line {lineno}: horizons {scn.horizons} differ from {horizons}")
            if scn.scenario_id in ids:
                raise SchemaError(f"{path}:line {lineno}: duplicate scenario_id {scn.scenario_id}")
            ids.add(scn.scenario_id)
            out.append(scn)
    return out
