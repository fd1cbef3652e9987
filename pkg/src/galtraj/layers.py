"""Small torch building blocks shared by the predictor and the denoiser."""
from __future__ import annotations

import math

import torch
from torch import nn

from .features import LANE_POINTS


def mlp(*dims: int, final_act: bool = False) -> nn.Sequential:
    layers: list = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or final_act:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class SceneEncoder(nn.Module):
    """Per-agent embedding from its past track and nearby lane polylines."""

    def __init__(self, t_h1: int, dim: int):
        super().__init__()
        self.past = mlp(t_h1 * 2 + (t_h1 - 1) * 2 + t_h1, dim, dim, final_act=True)
        self.lane = mlp(LANE_POINTS * 2, dim, dim, final_act=True)
        self.fuse = mlp(2 * dim, dim, dim)

    def forward(self, past, past_mask, lanes, lane_mask):
        b, n = past.shape[:2]
        vel = (past[:, :, 1:] - past[:, :, :-1]) * (past_mask[:, :, 1:] & past_mask[:, :, :-1])[..., None]
        x = torch.cat([past.reshape(b, n, -1), vel.reshape(b, n, -1) * 10.0,
                       past_mask.to(past.dtype)], dim=-1)
        h_past = self.past(x)
        h_lane = self.lane(lanes.reshape(*lanes.shape[:3], -1))
        h_lane = h_lane.masked_fill(~lane_mask[..., None], -1e4).amax(dim=2)
        h_lane = torch.where(lane_mask.any(-1, keepdim=True), h_lane, torch.zeros_like(h_lane))
        return self.fuse(torch.cat([h_past, h_lane], dim=-1))


class AgentAttention(nn.Module):
    """Single-head attention across agents of one scene.

    Keys and values see each neighbour's embedding plus its pose in the
    querying agent's frame. Returns the updated embeddings and the (B, N, N)
    attention weights; rows of padded agents are zero.
    """

    def __init__(self, dim: int, rel_dim: int = 4):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim + rel_dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.ff = mlp(dim, dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, h, rel, agent_mask):
        b, n, d = h.shape
        q = self.q(h)
        kv_in = torch.cat([h[:, None, :, :].expand(b, n, n, d), rel], dim=-1)
        k, v = self.kv(kv_in).chunk(2, dim=-1)
        logits = (q[:, :, None, :] * k).sum(-1) * self.scale
        logits = logits.masked_fill(~agent_mask[:, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        attn = torch.nan_to_num(attn) * agent_mask[:, :, None]
        h = h + self.out((attn[..., None] * v).sum(2))
        h = h + self.ff(self.norm(h))
        return h, attn


def step_embedding(k: torch.Tensor, dim: int, k_max: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly per-agent) diffusion steps."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    x = (k.to(torch.float32) / k_max * 100.0)[..., None] * freqs
    return torch.cat([torch.sin(x), torch.cos(x)], dim=-1)
