"""Conditional DDPM over agents' future trajectories.

Futures are expressed in each agent's own frame and encoded as whitened
principal-component coefficients, so diffusion noise follows the data
covariance and decoded samples stay smooth. Agents are denoised jointly per
scene; every agent carries its own diffusion step so agents that start the
reverse process later sit in the attention context at their own noise level.
"""
from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .exceptions import ConfigurationError, NumericError, TrainingError
from .features import collate
from .layers import AgentAttention, SceneEncoder, mlp, step_embedding
from .predictor import scene_features
from .world import Horizons


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule over steps ``1..K`` with the convention ``alpha_bar[0] = 1``."""

    n_steps: int = 32
    beta_start: float = 1e-4
    beta_end: float = 0.05

    def __post_init__(self):
        if self.n_steps < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigurationError("need K >= 1 and 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        """``betas[k - 1]`` is the variance added by step ``k``."""
        return np.linspace(self.beta_start, self.beta_end, self.n_steps)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """Length ``K + 1``; index ``k`` is the cumulative product up to step ``k``."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def posterior_variance(self) -> np.ndarray:
        """``Sigma^k`` for k = 0..K (index 0 unused). Step 1 borrows step 2's value so it stays positive."""
        ab = self.alpha_bar
        b = self.betas
        var = np.zeros(self.n_steps + 1)
        var[1:] = b * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        var[1] = var[2] if self.n_steps > 1 else b[0]
        return var

    def k_star(self, lam: float) -> int:
        return int(round(lam * self.n_steps))


def _expand(values: np.ndarray, k: np.ndarray, ndim: int) -> np.ndarray:
    """Index ``values`` by ``k`` and append singleton axes up to ``ndim``."""
    out = values[k]
    return out.reshape(out.shape + (1,) * (ndim - out.ndim))


def forward_noise(y0, k, schedule: DiffusionSchedule, seed=None, rng=None):
    """Sample ``y_k = sqrt(ab_k) y0 + sqrt(1 - ab_k) eps``.

    ``k`` is an int or an integer array matching the leading axes of ``y0``
    (e.g. one step per agent). ``k = 0`` returns ``y0`` unchanged.
    """
    y0 = np.asarray(y0, dtype=float)
    k_arr = np.asarray(k)
    if (k_arr < 0).any() or (k_arr > schedule.n_steps).any():
        raise IndexError(f"diffusion step {k} outside [0, {schedule.n_steps}]")
    if rng is None:
        rng = np.random.default_rng(seed)
    ab = _expand(schedule.alpha_bar, k_arr, y0.ndim)
    eps = rng.standard_normal(y0.shape)
    out = np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps
    return np.where(ab == 1.0, y0, out)


class DenoiserNet(nn.Module):
    def __init__(self, t_h1: int, n_coef: int, dim: int, n_steps: int):
        super().__init__()
        self.n_steps, self.dim = n_steps, dim
        self.encoder = SceneEncoder(t_h1, dim)
        self.y_in = mlp(n_coef, dim, dim)
        self.k_in = mlp(dim, dim)
        self.fuse = mlp(3 * dim, dim, dim)
        self.interaction = AgentAttention(dim)
        self.out = mlp(2 * dim, 2 * dim, n_coef)
        # step-gated linear path from y_k straight to the noise estimate
        self.skip = nn.Linear(n_coef, n_coef, bias=False)
        self.skip_gate = mlp(dim, dim, n_coef)

    def encode(self, batch):
        return self.encoder(batch.past, batch.past_mask, batch.lanes, batch.lane_mask)

    def forward(self, cond, batch, y, k):
        emb = step_embedding(k, self.dim, self.n_steps)
        h = self.fuse(torch.cat([cond, self.y_in(y), self.k_in(emb)], dim=-1))
        h, attn = self.interaction(h, batch.rel, batch.agent_mask)
        eps = self.out(torch.cat([h, cond], dim=-1)) + self.skip(y) * self.skip_gate(emb)
        return eps, attn


class TrajectoryDenoiser(BaseEstimator):
    """Noise-prediction denoiser with an exposed agent-agent attention layer.

    ``n_components`` principal directions of the agent-frame futures span the
    diffusion space; coordinates are whitened so each has unit variance.
    """

    def __init__(self, n_steps=32, beta_start=1e-4, beta_end=0.05, n_components=12, hidden_dim=128,
                 learning_rate=1e-3, batch_size=32, n_epochs=150, validation_fraction=0.1, shared_step_prob=0.5,
                 x0_clip=8.0, lr_floor=0.05, random_state=0):
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_components = n_components
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.validation_fraction = validation_fraction
        self.shared_step_prob = shared_step_prob
        self.x0_clip = x0_clip
        self.lr_floor = lr_floor
        self.random_state = random_state

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.n_steps, self.beta_start, self.beta_end)

    # ------------------------------------------------------------ setup
    def _build(self, horizons: Horizons):
        torch.manual_seed(self.random_state)
        self.horizons_ = horizons
        self.net_ = DenoiserNet(horizons.t_h + 1, self.n_components, self.hidden_dim, self.n_steps)
        self.optimizer_ = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)

    def _initialize(self, scenarios):
        hz = scenarios[0].horizons
        if not 1 <= self.n_components <= 2 * hz.t_f:
            raise ConfigurationError(f"n_components must lie in [1, {2 * hz.t_f}]")
        self._build(hz)
        fut = []
        for s in scenarios:
            f = scene_features(s)
            full = f.future_mask.all(-1)
            fut.append(f.future[full].reshape(-1, 2 * hz.t_f))
        fut = np.concatenate(fut)
        if len(fut) <= self.n_components:
            raise ConfigurationError("too few complete futures to fit the trajectory basis")
        mean = fut.mean(0)
        evals, evecs = np.linalg.eigh(np.cov(fut - mean, rowvar=False))
        order = np.argsort(evals)[::-1][: self.n_components]
        self.traj_mean_ = mean.reshape(hz.t_f, 2)
        self.basis_ = evecs[:, order] * np.sqrt(np.maximum(evals[order], 1e-12))  # (2 T_f, D)
        self.explained_variance_ratio_ = float(evals[order].sum() / evals.sum())
        self.epoch_ = 0
        self.loss_curve_ = []

    def normalize(self, local):
        """Agent-frame futures (..., T_f, 2) -> whitened coefficients (..., D)."""
        local = np.asarray(local, dtype=float)
        flat = (local - self.traj_mean_).reshape(local.shape[:-2] + (-1,))
        # basis columns are orthogonal, so projection is a scaled dot product
        return flat @ (self.basis_ / (self.basis_ * self.basis_).sum(0))

    def denormalize(self, y):
        """Whitened coefficients (..., D) -> agent-frame futures (..., T_f, 2)."""
        y = np.asarray(y, dtype=float)
        return (y @ self.basis_.T).reshape(y.shape[:-1] + self.traj_mean_.shape) + self.traj_mean_

    def pullback(self, grad_local):
        """Gradient w.r.t. agent-frame points (..., T_f, 2) -> gradient w.r.t. coefficients."""
        grad_local = np.asarray(grad_local, dtype=float)
        return grad_local.reshape(grad_local.shape[:-2] + (-1,)) @ self.basis_

    def _split(self, scenarios):
        rng = np.random.default_rng(self.random_state)
        order = rng.permutation(len(scenarios))
        n_val = int(round(self.validation_fraction * len(scenarios)))
        if len(scenarios) - n_val < 1:
            n_val = 0
        val = [scenarios[i] for i in sorted(order[:n_val])]
        train = [scenarios[i] for i in sorted(order[n_val:])]
        return train, val

    # ------------------------------------------------------------ training
    def _batch_loss(self, scenarios, rng, k_fixed=None):
        batch = collate([scene_features(s) for s in scenarios])
        y0 = self.normalize(batch.future.double().numpy())
        b, n = y0.shape[:2]
        if k_fixed is not None:
            k = np.full((b, n), k_fixed)
        else:
            shared = rng.random(b) < self.shared_step_prob
            k = np.where(shared[:, None], rng.integers(1, self.n_steps + 1, size=(b, 1)),
                         rng.integers(0, self.n_steps + 1, size=(b, n)))
        eps = rng.standard_normal(y0.shape)
        ab = _expand(self.schedule.alpha_bar, k, y0.ndim)
        yk = np.sqrt(ab) * y0 + np.sqrt(1 - ab) * eps
        cond = self.net_.encode(batch)
        pred, _ = self.net_(cond, batch, torch.as_tensor(yk, dtype=torch.float32), torch.as_tensor(k))
        m = batch.future_mask.all(-1) & batch.agent_mask & torch.as_tensor(k >= 1)
        m = m[..., None].to(pred.dtype)
        sq = (pred - torch.as_tensor(eps, dtype=torch.float32)) ** 2 * m
        return sq.sum() / (m.sum() * self.n_components).clamp(min=1.0)

    def fit(self, scenarios, resume: bool = False):
        """Train up to ``n_epochs`` epochs; ``resume`` continues from the current state."""
        scenarios = list(scenarios)
        if not scenarios:
            raise ConfigurationError("cannot fit the denoiser on an empty dataset")
        if not (resume and hasattr(self, "net_")):
            self._initialize(scenarios)
        train, val = self._split(scenarios)
        while self.epoch_ < self.n_epochs:
            self.train_epoch(train, val)
        return self

    def current_lr(self) -> float:
        frac = min(self.epoch_ / max(self.n_epochs, 1), 1.0)
        return self.learning_rate * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))

    def train_epoch(self, train, val=()) -> dict:
        rng = np.random.default_rng([self.random_state, self.epoch_])
        torch.manual_seed(int(rng.integers(2**31)))
        for group in self.optimizer_.param_groups:
            group["lr"] = self.current_lr()
        self.net_.train()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), self.batch_size):
            loss = self._batch_loss([train[i] for i in order[start : start + self.batch_size]], rng)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite denoiser loss at epoch {self.epoch_} batch {start}")
            self.optimizer_.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.net_.parameters(), 5.0)
            self.optimizer_.step()
            losses.append(loss.item())
        self.epoch_ += 1
        row = {"epoch": self.epoch_, "train_loss": float(np.mean(losses)),
               "val_loss": self.validation_loss(val) if len(val) else float("nan")}
        self.loss_curve_.append(row)
        return row

    @torch.no_grad()
    def validation_loss(self, scenarios, k=None, seed=12345) -> float:
        """Mean noise-prediction MSE with fixed noise; ``k`` pins the step for every agent."""
        check_is_fitted(self, "net_")
        self.net_.eval()
        rng = np.random.default_rng(seed)
        total, count = 0.0, 0
        scenarios = list(scenarios)
        for start in range(0, len(scenarios), 64):
            chunk = scenarios[start : start + 64]
            total += float(self._batch_loss(chunk, rng, k_fixed=k)) * len(chunk)
            count += len(chunk)
        return total / max(count, 1)

    @torch.no_grad()
    def step_profile(self, scenarios, steps=None, seed=12345) -> dict:
        """Held-out noise MSE and the implied clean-trajectory MSE (whitened units) per step."""
        steps = range(1, self.n_steps + 1) if steps is None else steps
        ab = self.schedule.alpha_bar
        out = {}
        for k in steps:
            eps_mse = self.validation_loss(scenarios, k=k, seed=seed)
            out[int(k)] = {"eps_mse": eps_mse, "x0_mse": eps_mse * (1 - ab[k]) / ab[k]}
        return out

    # ------------------------------------------------------------ reverse process
    def condition(self, scenarios):
        """Collated batch plus cached encoder output for a list of scenarios."""
        check_is_fitted(self, "net_")
        batch = collate([scene_features(s) for s in scenarios])
        with torch.no_grad():
            self.net_.eval()
            cond = self.net_.encode(batch)
        return batch, cond

    @torch.no_grad()
    def predict_noise(self, batch, cond, y, k):
        self.net_.eval()
        eps, attn = self.net_(cond, batch, torch.as_tensor(y, dtype=torch.float32), torch.as_tensor(k))
        return eps.double().numpy(), attn.double().numpy()

    def denoise_step(self, batch, cond, y_k, k):
        """Mean and variance of ``p(y_{k-1} | y_k, x)`` plus the attention weights.

        ``y_k`` is (B, N, D); ``k`` an int or a (B, N) array of steps in ``1..K``.
        Returns ``(mu, var, attention)`` with ``var`` shaped like the broadcast ``k``.
        """
        k_arr = np.array(np.broadcast_to(np.asarray(k), np.shape(y_k)[:2]))
        if (k_arr < 1).any() or (k_arr > self.n_steps).any():
            raise IndexError(f"denoising step outside [1, {self.n_steps}]")
        eps, attn = self.predict_noise(batch, cond, y_k, k_arr)
        mu, var = self._posterior(y_k, eps, k_arr)
        if not (np.isfinite(mu).all() and np.isfinite(attn).all()):
            raise NumericError(f"non-finite denoiser output at step {k}")
        return mu, var, attn

    def _posterior(self, y_k, eps, k):
        sch = self.schedule
        nd = np.ndim(y_k)
        ab_k = _expand(sch.alpha_bar, k, nd)
        ab_prev = _expand(sch.alpha_bar, k - 1, nd)
        beta = _expand(sch.betas, k - 1, nd)
        x0 = np.clip((y_k - np.sqrt(1 - ab_k) * eps) / np.sqrt(ab_k), -self.x0_clip, self.x0_clip)
        mu = (np.sqrt(ab_prev) * beta / (1 - ab_k)) * x0 + (np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_k)) * y_k
        return mu, sch.posterior_variance[k]

    def reverse(self, batch, cond, y_start, start_k, rng, guide=None):
        """Run the reverse chain from per-agent start steps down to 0.

        Agents whose start step is below the current step keep their state and
        stay in the attention context at their own noise level. ``guide(mu, var,
        k, active)`` may perturb the mean of active agents. The last step
        returns the mean without noise.
        """
        y = np.array(y_start, dtype=float)
        start_k = np.asarray(start_k)
        var = self.schedule.posterior_variance
        for k in range(int(start_k.max(initial=0)), 0, -1):
            active = start_k >= k
            k_in = np.where(active, k, start_k)
            eps, _ = self.predict_noise(batch, cond, y, k_in)
            mu, _ = self._posterior(y, eps, np.full(k_in.shape, k))
            if not np.isfinite(mu).all():
                raise NumericError(f"non-finite denoiser output at step {k}")
            if guide is not None:
                mu = guide(mu, float(var[k]), k, active)
            noise = rng.standard_normal(y.shape) * np.sqrt(var[k]) if k > 1 else 0.0
            y = np.where(active[..., None], mu + noise, y)
        return y

    # ------------------------------------------------------------ persistence
    def save(self, path) -> Path:
        check_is_fitted(self, "net_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "kind": "denoiser",
            "params": self.get_params(),
            "horizons": self.horizons_.as_dict(),
            "schedule": {"n_steps": self.n_steps, "beta_start": self.beta_start, "beta_end": self.beta_end},
            "epoch": self.epoch_,
            "traj_mean": self.traj_mean_,
            "basis": self.basis_,
            "explained_variance_ratio": self.explained_variance_ratio_,
            "loss_curve": self.loss_curve_,
            "state_dict": self.net_.state_dict(),
            "optimizer": self.optimizer_.state_dict(),
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "TrajectoryDenoiser":
        try:
            ckpt = torch.load(path, weights_only=False)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise ConfigurationError(f"cannot read denoiser checkpoint {path}: {exc}") from exc
        if not isinstance(ckpt, dict) or ckpt.get("kind") != "denoiser":
            raise ConfigurationError(f"{path} is not a denoiser checkpoint")
        model = cls(**ckpt["params"])
        model._build(Horizons(**ckpt["horizons"]))
        model.net_.load_state_dict(ckpt["state_dict"])
        model.optimizer_.load_state_dict(ckpt["optimizer"])
        model.traj_mean_ = ckpt["traj_mean"]
        model.basis_ = ckpt["basis"]
        model.explained_variance_ratio_ = ckpt["explained_variance_ratio"]
        model.epoch_ = ckpt["epoch"]
        model.loss_curve_ = list(ckpt["loss_curve"])
        return model
