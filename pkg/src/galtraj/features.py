"""Agent-centric tensors shared by the predictor and the denoiser."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import resample_polyline
from .world import N_MAX, Scenario

N_LANES = 6
LANE_POINTS = 10
LANE_STEP = 3  # metres between lane samples (lanes are resampled at 1 m)
LANE_RADIUS = 40.0
COORD_SCALE = 10.0


@dataclass
class SceneFeatures:
    origin: np.ndarray  # (N, 2) world position at t = 0
    heading: np.ndarray  # (N,)
    past: np.ndarray  # (N, T_h + 1, 2) agent frame
    past_mask: np.ndarray  # (N, T_h + 1)
    future: np.ndarray  # (N, T_f, 2) agent frame
    future_mask: np.ndarray  # (N, T_f)
    lanes: np.ndarray  # (N, N_LANES, LANE_POINTS, 2) agent frame
    lane_mask: np.ndarray  # (N, N_LANES)

    @property
    def n_agents(self) -> int:
        return len(self.origin)


def _rot(heading: np.ndarray) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # local -> world


def to_local(points: np.ndarray, origin: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """World points (N, ..., 2) into each agent's frame."""
    r = _rot(heading)
    shape = points.shape
    flat = points.reshape(shape[0], -1, 2) - origin[:, None, :]
    return np.einsum("nij,npi->npj", r, flat).reshape(shape)


def to_world(points: np.ndarray, origin: np.ndarray, heading: np.ndarray) -> np.ndarray:
    r = _rot(heading)
    shape = points.shape
    flat = points.reshape(shape[0], -1, 2)
    return (np.einsum("nij,npj->npi", r, flat) + origin[:, None, :]).reshape(shape)


def _map_lanes(m):
    cache = getattr(m, "_feature_lanes", None)
    if cache is None:
        res = [resample_polyline(lane, 1.0) for lane in m.lanes]
        pts = np.concatenate(res)
        starts = np.cumsum([0] + [len(r) for r in res[:-1]])
        cache = (pts, starts, np.array([len(r) for r in res]))
        m._feature_lanes = cache
    return cache


def _headings(pos: np.ndarray, mask: np.ndarray, t0: int, fallback: np.ndarray) -> np.ndarray:
    out = fallback.copy()
    for n in range(len(pos)):
        valid = np.flatnonzero(mask[n, : t0 + 1])
        if len(valid) == 0:
            continue
        last = valid[-1]
        for t in valid[::-1][1:]:
            d = pos[n, last] - pos[n, t]
            if np.hypot(*d) > 0.5:
                out[n] = np.arctan2(d[1], d[0])
                break
    return out


def featurize(scn: Scenario) -> SceneFeatures:
    hz = scn.horizons
    pos = scn.positions()
    mask = scn.valid()
    t0 = hz.t_h
    n = len(pos)
    origin = np.empty((n, 2))
    for i in range(n):
        valid = np.flatnonzero(mask[i, : t0 + 1])
        origin[i] = pos[i, valid[-1]] if len(valid) else pos[i, t0]

    pts, starts, lens = _map_lanes(scn.map)
    d = np.linalg.norm(pts[None, :, :] - origin[:, None, :], axis=-1)  # (N, P)
    lane_min = np.minimum.reduceat(d, starts, axis=1)  # (N, L_all)
    # fallback heading from the closest lane's tangent
    nearest_pt = d.argmin(axis=1)
    nxt = np.minimum(nearest_pt + 1, len(pts) - 1)
    prv = np.maximum(nearest_pt - 1, 0)
    tang = pts[nxt] - pts[prv]
    fallback = np.arctan2(tang[:, 1], tang[:, 0])
    heading = _headings(pos, mask, t0, fallback)

    lanes = np.zeros((n, N_LANES, LANE_POINTS, 2))
    lane_mask = np.zeros((n, N_LANES), dtype=bool)
    order = np.argsort(lane_min, axis=1, kind="stable")
    for i in range(n):
        for slot, li in enumerate(order[i, :N_LANES]):
            if lane_min[i, li] > LANE_RADIUS:
                break
            s, ln = starts[li], lens[li]
            j0 = int(d[i, s : s + ln].argmin())
            idx = np.minimum(j0 + LANE_STEP * np.arange(LANE_POINTS), ln - 1)
            lanes[i, slot] = pts[s + idx]
            lane_mask[i, slot] = True

    local = to_local(pos, origin, heading)
    lanes = to_local(lanes, origin, heading) * lane_mask[:, :, None, None]
    past_mask = mask[:, : t0 + 1]
    future_mask = mask[:, t0 + 1 :]
    return SceneFeatures(
        origin=origin,
        heading=heading,
        past=local[:, : t0 + 1] * past_mask[..., None],
        past_mask=past_mask,
        future=local[:, t0 + 1 :] * future_mask[..., None],
        future_mask=future_mask,
        lanes=lanes,
        lane_mask=lane_mask,
    )


@dataclass
class Batch:
    past: torch.Tensor  # (B, N, T_h+1, 2) scaled
    past_mask: torch.Tensor
    future: torch.Tensor  # (B, N, T_f, 2) metres, agent frame
    future_mask: torch.Tensor
    lanes: torch.Tensor  # (B, N, L, P, 2) scaled
    lane_mask: torch.Tensor
    agent_mask: torch.Tensor  # (B, N)
    rel: torch.Tensor  # (B, N, N, 4): neighbour pose in each agent's frame (scaled xy, cos, sin)
    origin: np.ndarray  # (B, N, 2)
    heading: np.ndarray  # (B, N)


def collate(feats: list, n_max: int = N_MAX, dtype=torch.float32) -> Batch:
    b = len(feats)
    t_h1 = feats[0].past.shape[1]
    t_f = feats[0].future.shape[1]
    past = np.zeros((b, n_max, t_h1, 2))
    past_mask = np.zeros((b, n_max, t_h1), dtype=bool)
    fut = np.zeros((b, n_max, t_f, 2))
    fut_mask = np.zeros((b, n_max, t_f), dtype=bool)
    lanes = np.zeros((b, n_max, N_LANES, LANE_POINTS, 2))
    lane_mask = np.zeros((b, n_max, N_LANES), dtype=bool)
    agent_mask = np.zeros((b, n_max), dtype=bool)
    origin = np.zeros((b, n_max, 2))
    heading = np.zeros((b, n_max))
    for i, f in enumerate(feats):
        n = f.n_agents
        past[i, :n], past_mask[i, :n] = f.past, f.past_mask
        fut[i, :n], fut_mask[i, :n] = f.future, f.future_mask
        lanes[i, :n], lane_mask[i, :n] = f.lanes, f.lane_mask
        agent_mask[i, :n] = True
        origin[i, :n], heading[i, :n] = f.origin, f.heading
    # relative poses: neighbour j expressed in agent i's frame
    c, s = np.cos(heading), np.sin(heading)
    dxy = origin[:, None, :, :] - origin[:, :, None, :]  # (B, i, j, 2)
    lx = c[:, :, None] * dxy[..., 0] + s[:, :, None] * dxy[..., 1]
    ly = -s[:, :, None] * dxy[..., 0] + c[:, :, None] * dxy[..., 1]
    dh = heading[:, None, :] - heading[:, :, None]
    rel = np.stack([lx / COORD_SCALE, ly / COORD_SCALE, np.cos(dh), np.sin(dh)], -1)
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return Batch(
        past=t(past / COORD_SCALE), past_mask=torch.as_tensor(past_mask),
        future=t(fut), future_mask=torch.as_tensor(fut_mask),
        lanes=t(lanes / COORD_SCALE), lane_mask=torch.as_tensor(lane_mask),
        agent_mask=torch.as_tensor(agent_mask), rel=t(rel), origin=origin, heading=heading,
    )
