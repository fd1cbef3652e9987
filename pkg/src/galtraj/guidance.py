"""Tail-aware generation: agent categories, real guidance and gradient guidance."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import TrajectoryDenoiser, forward_noise
from .exceptions import ConfigurationError, GenerationError
from .features import to_local, to_world
from .geometry import as_polygon, outside_distance, polygon_area
from .predictor import scene_features

log = logging.getLogger(__name__)

TAIL = "tail"
RELEVANT = "relevant"
HEAD = "head"
CATEGORIES = (TAIL, RELEVANT, HEAD)


class GuidanceWarning(RuntimeWarning):
    """Gradient guidance was skipped for one step."""


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_tail: float = 0.25
    lambda_rel: float = 0.6
    lambda_head: float = 1.0
    w_offroad: float = 100.0
    w_repeller: float = 10.0
    radius: float = 2.0
    step_clip: float | None = 1.0  # per-agent cap on the guidance step, in units of sqrt(Sigma^k)
    gradient: bool = True

    def __post_init__(self):
        lams = (self.lambda_tail, self.lambda_rel, self.lambda_head)
        if not all(0.0 <= v <= 1.0 for v in lams):
            raise ConfigurationError(f"lambda values must lie in [0, 1], got {lams}")
        if not self.lambda_tail <= self.lambda_rel <= self.lambda_head:
            raise ConfigurationError(f"need lambda_tail <= lambda_rel <= lambda_head, got {lams}")
        if self.w_offroad < 0 or self.w_repeller < 0:
            raise ConfigurationError("cost weights must be non-negative")
        if self.radius <= 0:
            raise ConfigurationError("repeller radius must be positive")
        if self.step_clip is not None and self.step_clip <= 0:
            raise ConfigurationError("step_clip must be positive or None")

    def lam(self, category: str) -> float:
        return {TAIL: self.lambda_tail, RELEVANT: self.lambda_rel, HEAD: self.lambda_head}[category]

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- categories


def categorize_agents(errors, tau: float, attention, neighbor_sets=None) -> list:
    """Tail if error > tau; relevant if a tail agent attends to it above ``1/|N_j|``; else head.

    ``attention[j, i]`` is tail agent ``j``'s weight on agent ``i``. ``neighbor_sets[j]``
    holds the agents ``j`` attends over (default: every agent, itself included).
    NaN errors never make an agent tail.
    """
    errors = np.asarray(errors, dtype=float)
    n = len(errors)
    attention = np.asarray(attention, dtype=float)
    if n and attention.shape != (n, n):
        raise ConfigurationError(f"attention must be ({n}, {n}), got {attention.shape}")
    if neighbor_sets is None:
        neighbor_sets = [range(n)] * n
    tail = np.zeros(n, dtype=bool)
    tail[~np.isnan(errors)] = errors[~np.isnan(errors)] > tau
    relevant = np.zeros(n, dtype=bool)
    for j in np.flatnonzero(tail):
        members = list(neighbor_sets[j])
        if not members:
            continue
        threshold = 1.0 / len(members)
        for i in members:
            if not tail[i] and attention[j, i] > threshold:
                relevant[i] = True
    return [TAIL if tail[i] else RELEVANT if relevant[i] else HEAD for i in range(n)]


# ---------------------------------------------------------------- costs


def cost_no_offroad(traj, drivable_area, w: float = 1.0):
    """``-w * sum max(0, d_out)^2`` over all points of ``traj`` (..., 2) and its gradient."""
    poly = as_polygon(drivable_area)
    if len(poly) < 3 or not polygon_area(poly) > 1e-9:
        raise ConfigurationError("degenerate drivable polygon")
    traj = np.asarray(traj, dtype=float)
    d_out, unit = outside_distance(traj, poly)
    cost = -w * math.fsum((d_out * d_out).ravel().tolist())
    grad = -2.0 * w * d_out[..., None] * unit
    return cost, grad


def cost_repeller(trajs, w: float = 1.0, radius: float = 2.0, mask=None):
    """``-w * sum_t sum_{i<j} max(0, r - |p_i - p_j|)^2`` for trajs (N, T, 2).

    ``mask`` (N, T) drops invalid points from every pair. Coincident points
    contribute to the cost but carry no gradient (direction undefined).
    """
    trajs = np.asarray(trajs, dtype=float)
    n = trajs.shape[0]
    if n < 2:
        return 0.0, np.zeros_like(trajs)
    diff = trajs[:, None] - trajs[None, :]  # (N, N, T, 2): p_i - p_j
    dist = np.sqrt((diff * diff).sum(-1))
    pair = np.triu(np.ones((n, n), dtype=bool), k=1)[..., None]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pair = pair & mask[:, None] & mask[None, :]
    gap = np.where(pair, np.maximum(0.0, radius - dist), 0.0)
    cost = -w * math.fsum((gap * gap).ravel().tolist())
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    # d/dp_i of -w (r - d)^2 = 2 w (r - d) unit_ij ; p_j receives the opposite
    g = 2.0 * w * gap[..., None] * unit
    grad = g.sum(1) - g.sum(0)
    return cost, grad


def apply_gradient_guidance(mu, sigma_k: float, cost_fn, head_mask, max_step: float | None = None):
    """``mu + sigma_k * grad C(mu)`` on head agents, ``mu`` elsewhere.

    ``mu`` has leading agent axis; ``cost_fn(mu) -> (cost, grad)``. With
    ``max_step`` each agent's step is shrunk to at most that Euclidean norm. A
    non-finite gradient skips the step with a :class:`GuidanceWarning`.
    """
    mu = np.asarray(mu, dtype=float)
    head_mask = np.asarray(head_mask, dtype=bool)
    if not head_mask.any():
        return mu.copy()
    _, grad = cost_fn(mu)
    grad = np.asarray(grad, dtype=float)
    if not np.isfinite(grad[head_mask]).all():
        warnings.warn("non-finite guidance gradient; step left unguided", GuidanceWarning, stacklevel=2)
        return mu.copy()
    step = sigma_k * grad
    if max_step is not None:
        axes = tuple(range(head_mask.ndim, mu.ndim))
        norm = np.sqrt((step * step).sum(axis=axes, keepdims=True))
        step = step * np.minimum(1.0, max_step / np.maximum(norm, 1e-300))
    m = head_mask.reshape(head_mask.shape + (1,) * (mu.ndim - head_mask.ndim))
    return np.where(m, mu + step, mu)


class SceneCost:
    """Off-road plus repeller cost of one scene as a function of the diffusion coefficients.

    Costs are evaluated on world coordinates and the gradient is pulled back
    through the per-agent rotation and the trajectory basis. ``residual`` is
    the agent-frame part of each future the basis does not represent.
    """

    def __init__(self, denoiser: TrajectoryDenoiser, scenario, origin, heading, guidance: GuidanceConfig,
                 residual=0.0):
        self.denoiser = denoiser
        self.residual = residual
        self.poly = as_polygon(scenario.map.drivable_area)
        self.origin, self.heading = origin, heading
        self.guidance = guidance

    def world(self, y):
        return to_world(self.denoiser.denormalize(y) + self.residual, self.origin, self.heading)

    def __call__(self, y):
        pts = self.world(y)
        g = self.guidance
        c_off, g_off = cost_no_offroad(pts, self.poly, g.w_offroad)
        c_rep, g_rep = cost_repeller(pts, g.w_repeller, g.radius)
        grad_local = to_local(g_off + g_rep, np.zeros_like(self.origin), self.heading)
        return c_off + c_rep, self.denoiser.pullback(grad_local)


# ---------------------------------------------------------------- sampling


def _ground_truth(denoiser, scenarios):
    """Coefficients of each scene's futures and the off-basis agent-frame residuals."""
    gts, residuals = [], []
    for s in scenarios:
        if not s.future_valid().all():
            raise GenerationError(f"scenario {s.scenario_id} lacks a full ground-truth future")
        local = scene_features(s).future
        z = denoiser.normalize(local)
        gts.append(z)
        residuals.append(local - denoiser.denormalize(z))
    return gts, residuals


def _pad(arrays, n_max, fill=0.0):
    out = np.full((len(arrays), n_max) + arrays[0].shape[1:], fill, dtype=np.asarray(arrays[0]).dtype)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return out


def relevance_attention(denoiser: TrajectoryDenoiser, scenario, k: int, seed=None) -> np.ndarray:
    """Attention rows of the unguided denoiser at step ``k`` on forward-noised ground truth."""
    k = max(int(k), 1)
    rng = np.random.default_rng(seed)
    gt = _ground_truth(denoiser, [scenario])[0][0]
    batch, cond = denoiser.condition([scenario])
    y = _pad([forward_noise(gt, k, denoiser.schedule, rng=rng)], batch.agent_mask.shape[1])
    _, _, attn = denoiser.denoise_step(batch, cond, y, k)
    n = scenario.n_agents
    return attn[0, :n, :n]


def real_guided_sample_batch(denoiser: TrajectoryDenoiser, scenarios, categories, guidance: GuidanceConfig,
                             seed=None) -> list:
    """Generated world-frame futures (N, T_f, 2) for each scenario.

    Every agent starts from its forward-noised ground truth at
    ``K* = round(lambda_category * K)``; head agents receive gradient guidance
    when ``guidance.gradient`` is set. Each agent keeps the fine detail of its
    ground truth outside the trajectory basis. Agents with ``K* = 0`` return
    their ground truth unchanged.
    """
    scenarios = list(scenarios)
    if not scenarios:
        return []
    rng = np.random.default_rng(seed)
    sch = denoiser.schedule
    gts, residuals = _ground_truth(denoiser, scenarios)
    batch, cond = denoiser.condition(scenarios)
    n_max = batch.agent_mask.shape[1]
    starts, heads = [], []
    for s, cats in zip(scenarios, categories):
        if len(cats) != s.n_agents or any(c not in CATEGORIES for c in cats):
            raise ConfigurationError(f"scenario {s.scenario_id}: need one category per agent")
        starts.append(np.array([sch.k_star(guidance.lam(c)) for c in cats]))
        heads.append(np.array([c == HEAD for c in cats]))
    start_k = _pad(starts, n_max, 0)
    head = _pad(heads, n_max, False)
    y_start = _pad([forward_noise(g, k, sch, rng=rng) for g, k in zip(gts, starts)], n_max)
    costs = [SceneCost(denoiser, s, batch.origin[b, : s.n_agents], batch.heading[b, : s.n_agents], guidance,
                       residuals[b]) for b, s in enumerate(scenarios)]

    def guide(mu, var, k, active):
        max_step = None if guidance.step_clip is None else guidance.step_clip * math.sqrt(var)
        out = mu.copy()
        for b, (s, cost) in enumerate(zip(scenarios, costs)):
            n = s.n_agents
            mask = head[b, :n] & active[b, :n]
            if mask.any():
                out[b, :n] = apply_gradient_guidance(mu[b, :n], var, cost, mask, max_step)
        return out

    y0 = denoiser.reverse(batch, cond, y_start, start_k, rng, guide if guidance.gradient else None)
    out = []
    for b, s in enumerate(scenarios):
        n = s.n_agents
        world = costs[b].world(y0[b, :n])
        out.append(np.where((start_k[b, :n] == 0)[:, None, None], s.future(), world))
    return out


def real_guided_sample(denoiser, scenario, categories, guidance: GuidanceConfig, seed=None) -> np.ndarray:
    return real_guided_sample_batch(denoiser, [scenario], [categories], guidance, seed)[0]


def unguided_sample_batch(denoiser: TrajectoryDenoiser, scenarios, seed=None) -> list:
    """Full reverse chains from standard normal noise; no categories or guidance."""
    scenarios = list(scenarios)
    if not scenarios:
        return []
    rng = np.random.default_rng(seed)
    batch, cond = denoiser.condition(scenarios)
    b, n_max = batch.agent_mask.shape
    y = rng.standard_normal((b, n_max, denoiser.n_components))
    start_k = np.where(batch.agent_mask.numpy(), denoiser.n_steps, 0)
    y0 = denoiser.reverse(batch, cond, y, start_k, rng)
    out = []
    for i, s in enumerate(scenarios):
        n = s.n_agents
        out.append(to_world(denoiser.denormalize(y0[i, :n]), batch.origin[i, :n], batch.heading[i, :n]))
    return out


def offroad_rate(futures, scenario, mask=None) -> float:
    """Fraction of agents (optionally masked) with any point outside the drivable area."""
    futures = np.asarray(futures, dtype=float)
    d_out, _ = outside_distance(futures, as_polygon(scenario.map.drivable_area))
    off = (d_out > 0).any(-1)
    if mask is not None:
        off = off[np.asarray(mask, dtype=bool)]
    return float(off.mean()) if len(off) else 0.0
