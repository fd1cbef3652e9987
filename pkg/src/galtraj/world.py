"""Procedural long-tailed traffic scenarios on small lane maps.

Maps come from four topology templates. Agents follow lane routes with a
pure-pursuit controller; each agent carries a maneuver label whose speed and
lateral-offset profile shapes the rollout. Tail maneuvers start shortly before
``t = 0`` so the observed past hints at them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, GenerationError
from .geometry import (
    arc_lengths,
    as_polygon,
    is_simple_polygon,
    points_in_polygon,
    resample_polyline,
    rotation,
    wrap_angle,
)

MANEUVERS = ("keep-lane", "gentle-turn", "hard-turn", "u-turn", "sudden-stop", "overtake")
HEAD_MANEUVERS = ("keep-lane", "gentle-turn", "hard-turn")
TAIL_MANEUVERS = ("u-turn", "sudden-stop", "overtake")
TOPOLOGIES = ("straight", "curve", "T-intersection", "four-way")

LANE_WIDTH = 3.5
HALF_ROAD = LANE_WIDTH  # two lanes per road
JUNCTION = 10.0  # half-size of the junction zone
N_MAX = 8
V_MAX = 25.0
SPAWN_CLEARANCE = 2.0
MAX_RETRIES = 100


@dataclass(frozen=True)
class Horizons:
    t_h: int = 10
    t_f: int = 30
    dt: float = 0.1

    @property
    def n_steps(self) -> int:
        return self.t_h + self.t_f + 1

    def as_dict(self) -> dict:
        return {"t_h": self.t_h, "t_f": self.t_f, "dt": self.dt}


@dataclass(eq=False)
class MapGraph:
    lanes: list
    lane_width: float
    drivable_area: np.ndarray
    connectivity: list = field(default_factory=list)
    topology: str = "unknown"

    def validate(self) -> "MapGraph":
        if self.lane_width <= 0:
            raise ConfigurationError("lane_width must be positive")
        as_polygon(self.drivable_area)
        if not is_simple_polygon(self.drivable_area):
            raise ConfigurationError("drivable_area is not a simple polygon")
        for i, lane in enumerate(self.lanes):
            lane = np.asarray(lane)
            if lane.ndim != 2 or len(lane) < 2 or arc_lengths(lane)[-1] <= 0:
                raise ConfigurationError(f"lane {i} needs >= 2 points and positive length")
            if not points_in_polygon(lane, self.drivable_area).all():
                raise ConfigurationError(f"lane {i} leaves the drivable area")
        n = len(self.lanes)
        for a, b in self.connectivity:
            if not (0 <= a < n and 0 <= b < n):
                raise ConfigurationError(f"connectivity pair {(a, b)} out of range")
        return self

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        poly = np.asarray(self.drivable_area)
        return poly.min(axis=0), poly.max(axis=0)


@dataclass(eq=False)
class AgentTrack:
    agent_id: int
    positions: np.ndarray
    valid_mask: np.ndarray
    maneuver_label: str

    @property
    def is_tail(self) -> bool:
        return self.maneuver_label in TAIL_MANEUVERS


@dataclass(eq=False)
class Scenario:
    scenario_id: int
    map: MapGraph
    agents: list
    horizons: Horizons = Horizons()

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def positions(self) -> np.ndarray:
        return np.stack([a.positions for a in self.agents])

    def valid(self) -> np.ndarray:
        return np.stack([a.valid_mask for a in self.agents])

    def past(self) -> np.ndarray:
        return self.positions()[:, : self.horizons.t_h + 1]

    def future(self) -> np.ndarray:
        return self.positions()[:, self.horizons.t_h + 1 :]

    def future_valid(self) -> np.ndarray:
        return self.valid()[:, self.horizons.t_h + 1 :]


@dataclass
class DatasetConfig:
    count: int = 2000
    topology_mix: Mapping[str, float] = field(
        default_factory=lambda: {"straight": 0.2, "curve": 0.2, "T-intersection": 0.3, "four-way": 0.3}
    )
    maneuver_mix: Mapping[str, float] = field(
        default_factory=lambda: {
            "keep-lane": 0.55, "gentle-turn": 0.22, "hard-turn": 0.18,
            "u-turn": 0.02, "sudden-stop": 0.015, "overtake": 0.015,
        }
    )
    min_agents: int = 3
    max_agents: int = N_MAX
    horizons: Horizons = Horizons()

    def validate(self) -> "DatasetConfig":
        if self.count < 0:
            raise ConfigurationError("count must be >= 0")
        mix = mix_vector(self.maneuver_mix)
        tail = sum(mix[MANEUVERS.index(m)] for m in TAIL_MANEUVERS)
        if tail > 0.1 + 1e-12:
            raise ConfigurationError(f"tail-maneuver mass {tail:.3f} exceeds 0.1")
        unknown = set(self.topology_mix) - set(TOPOLOGIES)
        if unknown:
            raise ConfigurationError(f"unknown topologies {sorted(unknown)}")
        if not 2 <= self.min_agents <= self.max_agents <= N_MAX:
            raise ConfigurationError("need 2 <= min_agents <= max_agents <= N_MAX")
        return self


def mix_vector(maneuver_mix) -> np.ndarray:
    """Probability vector over MANEUVERS from a mapping or a sequence."""
    if isinstance(maneuver_mix, Mapping):
        unknown = set(maneuver_mix) - set(MANEUVERS)
        if unknown:
            raise ConfigurationError(f"unknown maneuver labels {sorted(unknown)}")
        p = np.array([float(maneuver_mix.get(m, 0.0)) for m in MANEUVERS])
    else:
        p = np.asarray(maneuver_mix, dtype=float)
        if p.shape != (len(MANEUVERS),):
            raise ConfigurationError(f"maneuver_mix needs {len(MANEUVERS)} entries")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"maneuver_mix must be non-negative and sum to 1, got {p.sum()!r}")
    return p


# ------------------------------------------------------------------ maps


def _bezier(points, n=10):
    points = np.asarray(points, dtype=float)
    t = np.linspace(0.0, 1.0, n)[:, None]
    if len(points) == 3:
        p0, p1, p2 = points
        return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    p0, p1, p2, p3 = points
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3


def _line_intersection(p, d, q, e):
    m = np.array([d, -e]).T
    if abs(np.linalg.det(m)) < 1e-9:
        return 0.5 * (p + q)
    ts = np.linalg.solve(m, q - p)
    return p + ts[0] * d


def _junction(arms: Sequence[np.ndarray], arm_len: float):
    """Entry, exit and connector lanes for a junction with the given arm directions."""
    half = LANE_WIDTH / 2
    entries, exits = [], []
    for d in arms:
        n = np.array([-d[1], d[0]])
        far = JUNCTION + arm_len
        entries.append(np.array([far * d + half * n, JUNCTION * d + half * n]))
        exits.append(np.array([JUNCTION * d - half * n, far * d - half * n]))
    lanes = entries + exits
    connectivity = []
    n_arms = len(arms)
    for a in range(n_arms):
        p0, h0 = entries[a][-1], -arms[a]
        for b in range(n_arms):
            p2, h2 = exits[b][0], arms[b]
            if a == b:
                conn = _bezier([p0, p0 + 6.0 * h0, p2 - 6.0 * h2, p2])
            else:
                conn = _bezier([p0, _line_intersection(p0, h0, p2, h2), p2])
            lanes.append(conn)
            k = len(lanes) - 1
            connectivity += [(a, k), (k, n_arms + b)]
    return lanes, connectivity


def _t_polygon(arm_len: float) -> np.ndarray:
    far = JUNCTION + arm_len + 3.0
    w, j = HALF_ROAD, JUNCTION
    return np.array([
        (far, -w), (far, w), (-far, w), (-far, -w), (-j, -w), (-w, -j),
        (-w, -far), (w, -far), (w, -j), (j, -w),
    ])


def _plus_polygon(arm_len: float) -> np.ndarray:
    far = JUNCTION + arm_len + 3.0
    w, j = HALF_ROAD, JUNCTION
    return np.array([
        (far, -w), (far, w), (j, w), (w, j), (w, far), (-w, far), (-w, j), (-j, w),
        (-far, w), (-far, -w), (-j, -w), (-w, -j), (-w, -far), (w, -far), (w, -j), (j, -w),
    ])


def build_map(seed: int, topology: str) -> MapGraph:
    """Deterministic map for ``(seed, topology)``, randomly rotated about the origin."""
    if topology not in TOPOLOGIES:
        raise ConfigurationError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    if seed < 0:
        raise ConfigurationError("seed must be >= 0")
    rng = np.random.default_rng([seed, TOPOLOGIES.index(topology)])
    theta = rng.uniform(0.0, 2 * np.pi)
    half = LANE_WIDTH / 2
    connectivity: list = []
    if topology == "straight":
        length = rng.uniform(140.0, 170.0)
        lanes = [np.array([[0.0, -half], [length, -half]]), np.array([[0.0, half], [length, half]])]
        poly = np.array([[-5.0, -HALF_ROAD], [length + 5.0, -HALF_ROAD],
                         [length + 5.0, HALF_ROAD], [-5.0, HALF_ROAD]])
    elif topology == "curve":
        radius = rng.uniform(60.0, 90.0)
        span = rng.uniform(1.6, 2.2)
        n = int(radius * span / 3.0) + 2
        phi = np.linspace(0.0, span, n)
        lanes = [np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1) for r in (radius - half, radius + half)]
        pad = 5.0 / radius
        phi_p = np.linspace(-pad, span + pad, n)
        outer = np.stack([(radius + HALF_ROAD) * np.cos(phi_p), (radius + HALF_ROAD) * np.sin(phi_p)], axis=1)
        inner = np.stack([(radius - HALF_ROAD) * np.cos(phi_p), (radius - HALF_ROAD) * np.sin(phi_p)], axis=1)
        poly = np.concatenate([outer, inner[::-1]])
    else:
        arm_len = rng.uniform(55.0, 70.0)
        if topology == "T-intersection":
            arms = [np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([0.0, -1.0])]
            poly = _t_polygon(arm_len)
        else:
            arms = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([-1.0, 0.0]), np.array([0.0, -1.0])]
            poly = _plus_polygon(arm_len)
        lanes, connectivity = _junction(arms, arm_len)
    rot = rotation(theta)
    lanes = [np.asarray(lane) @ rot.T for lane in lanes]
    poly = np.asarray(poly) @ rot.T
    return MapGraph(lanes=lanes, lane_width=LANE_WIDTH, drivable_area=poly,
                    connectivity=[tuple(map(int, c)) for c in connectivity], topology=topology).validate()


# ---------------------------------------------------------------- routes


@dataclass
class _Route:
    points: np.ndarray  # resampled at uniform spacing
    kind: str
    event_s: float  # arc length of the junction entry (0 when irrelevant)
    side: float  # +1 / -1: direction of the neighbouring lane (left normal)
    neighbour_gap: float

    @property
    def length(self) -> float:
        return (len(self.points) - 1) * self.spacing

    @property
    def spacing(self) -> float:
        return float(np.linalg.norm(self.points[1] - self.points[0]))


def _heading(seg) -> float:
    d = seg[-1] - seg[-2] if len(seg) > 1 else seg[0]
    return math.atan2(d[1], d[0])


def _turn_kind(lane: np.ndarray) -> str:
    h0 = math.atan2(*(lane[1] - lane[0])[::-1])
    h1 = math.atan2(*(lane[-1] - lane[-2])[::-1])
    dh = float(wrap_angle(h1 - h0))
    if abs(dh) > 0.75 * np.pi:
        return "uturn"
    if abs(dh) < 0.25 * np.pi:
        return "straight"
    return "left" if dh > 0 else "right"


def _routes(m: MapGraph) -> dict:
    cache = getattr(m, "_route_cache", None)
    if cache is not None:
        return cache
    routes: dict = {}
    lanes = [np.asarray(x, dtype=float) for x in m.lanes]
    succ: dict = {}
    for a, b in m.connectivity:
        succ.setdefault(a, []).append(b)
    preds = {b for _, b in m.connectivity}
    starts = [i for i in range(len(lanes)) if i not in preds]
    for i in starts:
        if i not in succ:
            # lone lane (straight / curve maps): lateral neighbour = nearest other lone lane
            pts = resample_polyline(lanes[i], 0.5)
            mid = pts[len(pts) // 2]
            tangent = pts[len(pts) // 2 + 1] - mid
            normal = np.array([-tangent[1], tangent[0]]) / np.linalg.norm(tangent)
            best, side, gap = np.inf, 1.0, LANE_WIDTH
            for j in starts:
                if j == i or j in succ:
                    continue
                other = resample_polyline(lanes[j], 0.5)
                k = np.linalg.norm(other - mid, axis=1).argmin()
                dist = np.linalg.norm(other[k] - mid)
                if dist < best:
                    best, gap = dist, dist
                    side = 1.0 if np.dot(other[k] - mid, normal) > 0 else -1.0
            routes.setdefault("lane", []).append(_Route(pts, "lane", 0.0, side, gap))
            continue
        for c in succ[i]:
            for e in succ.get(c, []):
                raw = np.concatenate([lanes[i], lanes[c][1:], lanes[e][1:]])
                kind = _turn_kind(lanes[c])
                routes.setdefault(kind, []).append(
                    _Route(resample_polyline(raw, 0.5), kind, float(arc_lengths(lanes[i])[-1]), 1.0, LANE_WIDTH))
    m._route_cache = routes
    return routes


_MANEUVER_ROUTE = {
    "junction": {"keep-lane": "straight", "gentle-turn": "right", "hard-turn": "left",
                 "u-turn": "uturn", "sudden-stop": "straight", "overtake": "straight"},
    "lane": {"keep-lane": "lane", "gentle-turn": "lane", "hard-turn": "lane",
             "sudden-stop": "lane", "overtake": "lane"},
}


def _route_kind(m: MapGraph, label: str):
    routes = _routes(m)
    table = _MANEUVER_ROUTE["lane" if "lane" in routes else "junction"]
    kind = table.get(label)
    if kind is None or kind not in routes:
        return None
    if label in ("gentle-turn", "hard-turn", "overtake") and kind == "lane" and len(routes["lane"]) < 2:
        return None
    return kind


def supports(m: MapGraph, label: str) -> bool:
    """Whether ``label`` can be realised on map ``m`` (u-turns need an opposing lane)."""
    return _route_kind(m, label) is not None


def topology_supports(topology: str, label: str) -> bool:
    if label == "u-turn":
        return topology in ("T-intersection", "four-way")
    return True


# -------------------------------------------------------------- profiles


def _smoothstep(x: float) -> float:
    x = min(max(x, 0.0), 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class _Profile:
    v0: float
    accel: float = 0.0
    brake_at: float = math.inf
    brake: float = 0.0
    v_floor: float = 0.5
    # lateral offset: ramp to ``offset`` over [t0, t0+ramp], optionally back after hold
    offset: float = 0.0
    t0: float = 0.0
    ramp: float = 1.0
    hold: float = math.inf
    arrival: float | None = None  # junction arrival time (seconds from t=0)

    def speed(self, t: float) -> float:
        v = self.v0 + self.accel * t
        if t > self.brake_at:
            return max(self.v0 + self.accel * self.brake_at - self.brake * (t - self.brake_at), 0.0)
        return max(v, self.v_floor)

    def lateral(self, t: float) -> float:
        if self.offset == 0.0:
            return 0.0
        up = _smoothstep((t - self.t0) / self.ramp)
        back = _smoothstep((t - self.t0 - self.ramp - self.hold) / self.ramp)
        return self.offset * (up - back)


def _profile(label: str, kind: str, route: _Route, rng: np.random.Generator, t_start: float) -> _Profile:
    lateral = route.side * route.neighbour_gap
    if label == "keep-lane":
        return _Profile(v0=rng.uniform(6.0, 12.0), accel=rng.uniform(-0.4, 0.4))
    if label == "sudden-stop":
        return _Profile(v0=rng.uniform(9.0, 14.0), brake_at=rng.uniform(-0.7, -0.2), brake=rng.uniform(6.0, 8.0))
    if label == "overtake":
        return _Profile(v0=rng.uniform(8.0, 11.0), accel=2.0, offset=lateral, t0=rng.uniform(-0.6, -0.2),
                        ramp=1.5, hold=1.0)
    if kind == "lane":  # lane changes on straight / curved roads
        if label == "gentle-turn":
            return _Profile(v0=rng.uniform(7.0, 12.0), offset=lateral, t0=rng.uniform(-0.5, 0.5), ramp=3.0)
        return _Profile(v0=rng.uniform(7.0, 12.0), offset=lateral, t0=rng.uniform(-0.3, 0.8), ramp=1.2)
    if label == "u-turn":
        return _Profile(v0=rng.uniform(2.5, 4.0), arrival=rng.uniform(-0.5, 1.0))
    if label == "gentle-turn":
        return _Profile(v0=rng.uniform(3.5, 6.0), arrival=rng.uniform(-0.5, 2.0))
    return _Profile(v0=rng.uniform(4.0, 7.0), arrival=rng.uniform(-0.5, 2.0))


# --------------------------------------------------------------- rollout


def _pure_pursuit(route: _Route, s0: float, prof: _Profile, hz: Horizons, substeps: int = 2) -> np.ndarray:
    pts = route.points
    xs, ys = pts[:, 0].tolist(), pts[:, 1].tolist()
    n = len(xs)
    h = route.spacing

    def frame(s):
        i = min(max(int(s / h), 0), n - 2)
        f = min(max(s / h - i, 0.0), 1.0)
        tx, ty = (xs[i + 1] - xs[i]) / h, (ys[i + 1] - ys[i]) / h
        return xs[i] + f * (xs[i + 1] - xs[i]), ys[i] + f * (ys[i + 1] - ys[i]), tx, ty

    t = -hz.t_h * hz.dt
    px, py, tx, ty = frame(s0)
    off = prof.lateral(t)
    x, y = px - ty * off, py + tx * off
    theta = math.atan2(ty, tx)
    s = s0
    out = [(x, y)]
    sub = hz.dt / substeps
    for _ in range(hz.n_steps - 1):
        for _ in range(substeps):
            v = prof.speed(t)
            # local projection of the vehicle onto the route
            i0 = int(s / h)
            best, bi = math.inf, i0
            for i in range(max(i0 - 4, 0), min(i0 + 12, n)):
                d = (xs[i] - x) ** 2 + (ys[i] - y) ** 2
                if d < best:
                    best, bi = d, i
            s = bi * h
            look = max(1.5, min(6.0, 1.0 + 0.5 * v))
            gx, gy, gtx, gty = frame(s + look)
            goff = prof.lateral(t + look / max(v, 1.0))
            gx, gy = gx - gty * goff, gy + gtx * goff
            dist = math.hypot(gx - x, gy - y)
            if v > 0.0 and dist > 1e-6:
                alpha = math.atan2(gy - y, gx - x) - theta
                kappa = 2.0 * math.sin(alpha) / dist
                theta += v * kappa * sub
                x += v * math.cos(theta) * sub
                y += v * math.sin(theta) * sub
            t += sub
        out.append((x, y))
    return np.array(out)


def _travel(prof: _Profile, hz: Horizons) -> float:
    ts = np.arange(hz.n_steps) * hz.dt - hz.t_h * hz.dt
    return float(sum(prof.speed(t) for t in ts) * hz.dt) + 2.0


def _spawn(m: MapGraph, label: str, rng: np.random.Generator, hz: Horizons):
    kind = _route_kind(m, label)
    route = _routes(m)[kind][rng.integers(len(_routes(m)[kind]))]
    t_start = -hz.t_h * hz.dt
    prof = _profile(label, kind, route, rng, t_start)
    travel = _travel(prof, hz)
    if prof.arrival is not None:
        s0 = route.event_s - prof.v0 * (prof.arrival - t_start)
    else:
        s0 = rng.uniform(0.0, max(route.length - travel - 6.0, 0.0))
    if s0 < 0 or s0 + travel > route.length - 1.0:
        return None
    return _pure_pursuit(route, s0, prof, hz)


def sample_labels(maneuver_mix, n: int, rng: np.random.Generator) -> list:
    p = mix_vector(maneuver_mix)
    return [MANEUVERS[i] for i in rng.choice(len(MANEUVERS), size=n, p=p)]


def synthesize_scenario(
    map: MapGraph,
    maneuver_mix,
    n_agents: int,
    seed: int,
    *,
    labels: Sequence[str] | None = None,
    scenario_id: int = 0,
    horizons: Horizons = Horizons(),
    v_max: float = V_MAX,
    n_max: int = N_MAX,
) -> Scenario:
    """Roll out ``n_agents`` agents on ``map`` with labels drawn from ``maneuver_mix``.

    ``labels`` overrides the draw (used by :func:`synthesize_dataset` so the map
    topology can be chosen to fit the labels).
    """
    if not 2 <= n_agents <= n_max:
        raise ConfigurationError(f"n_agents must be in [2, {n_max}], got {n_agents}")
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = sample_labels(maneuver_mix, n_agents, rng)
    else:
        mix_vector(maneuver_mix)
        if len(labels) != n_agents:
            raise ConfigurationError("len(labels) must equal n_agents")
    for lab in labels:
        if lab not in MANEUVERS:
            raise ConfigurationError(f"unknown maneuver label {lab!r}")
        if not supports(map, lab):
            raise GenerationError(f"seed {seed}: maneuver {lab!r} infeasible on {map.topology} map")

    poly = np.asarray(map.drivable_area)
    agents: list = []
    starts: list = []
    for agent_id, lab in enumerate(labels):
        for _ in range(MAX_RETRIES):
            pos = _spawn(map, lab, rng, horizons)
            if pos is None:
                continue
            if any(np.linalg.norm(pos[0] - s) < SPAWN_CLEARANCE for s in starts):
                continue
            speeds = np.linalg.norm(np.diff(pos, axis=0), axis=1) / horizons.dt
            if speeds.max() > v_max or not points_in_polygon(pos, poly).all():
                continue
            break
        else:
            raise GenerationError(f"seed {seed}: could not spawn agent {agent_id} ({lab}) "
                                  f"after {MAX_RETRIES} retries")
        starts.append(pos[0])
        agents.append(AgentTrack(agent_id, pos, np.ones(horizons.n_steps, dtype=bool), lab))
    return Scenario(scenario_id, map, agents, horizons)


def synthesize_dataset(config: DatasetConfig, seed: int) -> list:
    """``config.count`` scenarios with ids ``0 .. count-1``; a pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    topo_names = [t for t in TOPOLOGIES if config.topology_mix.get(t, 0.0) > 0]
    topo_p = np.array([config.topology_mix[t] for t in topo_names], dtype=float)
    out = []
    for idx in range(config.count):
        n_agents = int(rng.integers(config.min_agents, config.max_agents + 1))
        labels = sample_labels(config.maneuver_mix, n_agents, rng)
        ok = np.array([all(topology_supports(t, lab) for lab in labels) for t in topo_names])
        if not ok.any():
            raise GenerationError(f"scenario {idx}: no topology supports labels {labels}")
        p = np.where(ok, topo_p, 0.0)
        topology = topo_names[rng.choice(len(topo_names), p=p / p.sum())]
        map_seed, scn_seed = (int(x) for x in rng.integers(0, 2**31 - 1, size=2))
        try:
            m = build_map(map_seed, topology)
            out.append(synthesize_scenario(m, config.maneuver_mix, n_agents, scn_seed, labels=labels,
                                           scenario_id=idx, horizons=config.horizons,
                                           n_max=config.max_agents))
        except GenerationError as exc:
            raise GenerationError(f"scenario index {idx}: {exc}") from exc
    return out


def check_scenario(scn: Scenario, v_max: float = V_MAX, n_max: int = N_MAX) -> None:
    """Raise if ``scn`` violates a track or scenario invariant."""
    hz = scn.horizons
    if not 2 <= len(scn.agents) <= n_max:
        raise GenerationError(f"scenario {scn.scenario_id}: {len(scn.agents)} agents")
    ids = [a.agent_id for a in scn.agents]
    if len(set(ids)) != len(ids):
        raise GenerationError(f"scenario {scn.scenario_id}: duplicate agent ids")
    for a in scn.agents:
        if a.positions.shape != (hz.n_steps, 2) or a.valid_mask.shape != (hz.n_steps,):
            raise GenerationError(f"agent {a.agent_id}: wrong track length")
        if a.maneuver_label not in MANEUVERS:
            raise GenerationError(f"agent {a.agent_id}: bad label {a.maneuver_label!r}")
        both = a.valid_mask[1:] & a.valid_mask[:-1]
        speeds = np.linalg.norm(np.diff(a.positions, axis=0), axis=1) / hz.dt
        if (speeds[both] > v_max + 1e-9).any():
            raise GenerationError(f"agent {a.agent_id}: speed bound violated")
