"""Multi-modal trajectory predictor trained with winner-takes-all regression."""
from __future__ import annotations

import math
import pickle
import weakref
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .dataset import WeightedDataset
from .exceptions import ConfigurationError, ShapeError, TrainingError
from .features import COORD_SCALE, SceneFeatures, collate, featurize, to_world
from .layers import AgentAttention, SceneEncoder, mlp
from .metrics import make_error_table, min_ade, min_fde
from .world import N_MAX, Horizons, Scenario

_FEATURES: "weakref.WeakKeyDictionary[Scenario, SceneFeatures]" = weakref.WeakKeyDictionary()


def scene_features(scn: Scenario) -> SceneFeatures:
    """Featurise ``scn`` once; scenarios are treated as immutable."""
    f = _FEATURES.get(scn)
    if f is None:
        f = featurize(scn)
        _FEATURES[scn] = f
    return f


@dataclass
class PredictionSet:
    agent_ids: list
    modes: np.ndarray  # (N, K, T_f, 2) world frame
    mode_probs: np.ndarray  # (N, K)

    def check(self, t_f: int) -> "PredictionSet":
        if self.modes.shape[2:] != (t_f, 2):
            raise ShapeError(f"modes have shape {self.modes.shape}, expected (N, K, {t_f}, 2)")
        if not np.isfinite(self.modes).all():
            raise ShapeError("non-finite predicted positions")
        if (self.mode_probs < 0).any() or not np.allclose(self.mode_probs.sum(-1), 1.0, atol=1e-6):
            raise ShapeError("mode probabilities must be non-negative and sum to 1")
        return self


class PredictorNet(nn.Module):
    def __init__(self, t_h1: int, t_f: int, dim: int = 128, n_modes: int = 6):
        super().__init__()
        self.t_f, self.n_modes = t_f, n_modes
        self.encoder = SceneEncoder(t_h1, dim)
        self.interaction = AgentAttention(dim)
        self.decoder = mlp(dim, 2 * dim, n_modes * (t_f * 2 + 1))

    def forward(self, batch):
        h = self.encoder(batch.past, batch.past_mask, batch.lanes, batch.lane_mask)
        h, attn = self.interaction(h, batch.rel, batch.agent_mask)
        out = self.decoder(h)
        b, n = h.shape[:2]
        out = out.view(b, n, self.n_modes, self.t_f * 2 + 1)
        traj = out[..., :-1].reshape(b, n, self.n_modes, self.t_f, 2) * COORD_SCALE
        return traj, out[..., -1], attn


def wta_loss(traj, logits, future, future_mask, agent_mask, cls_weight: float = 0.5):
    """Winner-takes-all loss. Returns (loss, per-agent minADE in metres, winner index).

    Regression only flows through each agent's best mode (lowest ADE); the
    mode logits get a cross-entropy against the winner.
    """
    m = future_mask.to(traj.dtype)
    dist = torch.sqrt(((traj - future[:, :, None]) ** 2).sum(-1) + 1e-9)  # (B, N, K, T)
    n_valid = m.sum(-1)  # (B, N)
    ade = (dist * m[:, :, None]).sum(-1) / n_valid.clamp(min=1.0)[..., None]
    best = ade.detach().argmin(-1)
    agents = agent_mask & (n_valid > 0)
    if not agents.any():
        zero = traj.sum() * 0.0
        return zero, ade.detach().min(-1).values, best
    reg = ade.gather(-1, best[..., None]).squeeze(-1)[agents].mean()
    cls = F.cross_entropy(logits[agents], best[agents])
    return reg + cls_weight * cls, ade.detach().min(-1).values, best


def draw_epoch_indices(weights, epoch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Weighted sampling with replacement of ``epoch_size`` entry indices."""
    w = np.asarray(weights, dtype=float)
    if epoch_size == 0:
        return np.zeros(0, dtype=np.int64)
    if len(w) == 0 or (w <= 0).any():
        raise ConfigurationError("weights must be non-empty and positive")
    return rng.choice(len(w), size=epoch_size, replace=True, p=w / w.sum())


class TrajectoryPredictor(BaseEstimator):
    """Small attention-based predictor producing ``n_modes`` futures per agent.

    ``fit`` trains ``n_epochs`` epochs on uniform weights; :meth:`train_epoch`
    runs one weighted epoch and is what the training loops drive directly.
    """

    def __init__(self, hidden_dim=128, n_modes=6, learning_rate=1e-3, batch_size=32, n_epochs=9,
                 epoch_size=None, max_epoch_size=1_000_000, cls_weight=0.5, grad_clip=5.0,
                 lr_schedule="cosine", lr_floor=0.1, random_state=0, horizons=None):
        self.hidden_dim = hidden_dim
        self.n_modes = n_modes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.epoch_size = epoch_size
        self.max_epoch_size = max_epoch_size
        self.cls_weight = cls_weight
        self.grad_clip = grad_clip
        self.lr_schedule = lr_schedule
        self.lr_floor = lr_floor
        self.random_state = random_state
        self.horizons = horizons

    # ------------------------------------------------------------ setup
    def _initialize(self, horizons: Horizons | None = None):
        hz = self.horizons or horizons or Horizons()
        if isinstance(hz, dict):
            hz = Horizons(**hz)
        torch.manual_seed(self.random_state)
        self.horizons_ = hz
        self.net_ = PredictorNet(hz.t_h + 1, hz.t_f, self.hidden_dim, self.n_modes)
        self.optimizer_ = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.epoch_ = 0
        return self

    def current_lr(self) -> float:
        """Learning rate for the epoch about to run; cosine decays over ``n_epochs`` to ``lr_floor``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule != "cosine":
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        frac = min(self.epoch_ / max(self.n_epochs, 1), 1.0)
        return self.learning_rate * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))

    def _check_horizons(self, scn: Scenario):
        if scn.horizons != self.horizons_:
            raise ShapeError(f"scenario {scn.scenario_id} horizons {scn.horizons} != model {self.horizons_}")

    # ------------------------------------------------------------ training
    def fit(self, scenarios, sample_weight=None):
        scenarios = list(scenarios)
        if not scenarios:
            raise ConfigurationError("cannot fit on an empty dataset")
        self._initialize(scenarios[0].horizons)
        data = WeightedDataset.from_scenarios(scenarios)
        if sample_weight is not None:
            data = data.with_weights(sample_weight)
        for _ in range(self.n_epochs):
            self.train_epoch(data, self.epoch_size or len(data))
        return self

    def train_epoch(self, dataset, epoch_size: int | None = None, seed=None) -> pd.DataFrame:
        """One optimiser pass over ``epoch_size`` weighted draws from ``dataset``.

        Returns one row per agent of every visited scenario with its minADE
        under the pre-update model; rows from generated entries have
        ``generated=True``. Later visits of the same scenario overwrite earlier ones.
        """
        if not isinstance(dataset, WeightedDataset):
            dataset = WeightedDataset.from_scenarios(dataset)
        if not hasattr(self, "net_"):
            if len(dataset) == 0:
                raise ConfigurationError("cannot train on an empty dataset")
            self._initialize(dataset[0].scenario.horizons)
        epoch_size = len(dataset) if epoch_size is None else int(epoch_size)
        if epoch_size > self.max_epoch_size:
            raise ConfigurationError(f"epoch_size {epoch_size} exceeds cap {self.max_epoch_size}")
        columns = ["entry", "scenario_id", "agent_id", "error", "generated"]
        self.last_draws_ = 0
        if epoch_size == 0:
            return pd.DataFrame(columns=columns)
        if len(dataset) == 0:
            raise ConfigurationError("cannot train on an empty dataset")
        seed = (self.random_state, self.epoch_) if seed is None else seed
        rng = np.random.default_rng(seed)
        idx = draw_epoch_indices(dataset.weights(), epoch_size, rng)
        self.last_draws_ = len(idx)
        torch.manual_seed(int(rng.integers(2**31)))
        for group in self.optimizer_.param_groups:
            group["lr"] = self.current_lr()
        self.net_.train()
        rows: dict = {}
        for start in range(0, epoch_size, self.batch_size):
            chunk = idx[start : start + self.batch_size]
            entries = [dataset[int(i)] for i in chunk]
            for e in entries:
                self._check_horizons(e.scenario)
            batch = collate([scene_features(e.scenario) for e in entries])
            traj, logits, _ = self.net_(batch)
            loss, err, _ = wta_loss(traj, logits, batch.future, batch.future_mask, batch.agent_mask,
                                    self.cls_weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {self.epoch_} batch {start // self.batch_size}")
            self.optimizer_.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(self.net_.parameters(), self.grad_clip)
            self.optimizer_.step()
            err = err.numpy()
            has_future = batch.future_mask.any(-1).numpy()
            for b, (i, e) in enumerate(zip(chunk, entries)):
                for n, agent in enumerate(e.scenario.agents):
                    if has_future[b, n]:
                        rows[(int(i), agent.agent_id)] = (int(i), e.scenario.scenario_id, agent.agent_id,
                                                          float(err[b, n]), e.generated)
        self.epoch_ += 1
        return pd.DataFrame(list(rows.values()), columns=columns)

    # ------------------------------------------------------------ inference
    @torch.no_grad()
    def predict_batch(self, scenarios) -> list:
        check_is_fitted(self, "net_")
        self.net_.eval()
        out = []
        scenarios = list(scenarios)
        for start in range(0, len(scenarios), 64):
            chunk = scenarios[start : start + 64]
            for s in chunk:
                self._check_horizons(s)
            batch = collate([scene_features(s) for s in chunk])
            traj, logits, _ = self.net_(batch)
            probs = torch.softmax(logits.double(), -1).numpy()
            traj = traj.double().numpy()
            for b, s in enumerate(chunk):
                n = s.n_agents
                t = traj[b, :n]
                world = to_world(t.reshape(n, -1, 2), batch.origin[b, :n], batch.heading[b, :n]).reshape(t.shape)
                out.append(PredictionSet([a.agent_id for a in s.agents], world, probs[b, :n]))
        return out

    def predict(self, scenario: Scenario) -> PredictionSet:
        return self.predict_batch([scenario])[0]

    def error_table(self, scenarios, model: str = "", split: str = "") -> pd.DataFrame:
        scenarios = list(scenarios)
        records = []
        for s, pred in zip(scenarios, self.predict_batch(scenarios)):
            fut = s.future()
            fmask = s.future_valid()
            for n, agent in enumerate(s.agents):
                if not fmask[n].any():
                    continue
                records.append((s.scenario_id, agent.agent_id, min_ade(pred.modes[n], fut[n], fmask[n]),
                                min_fde(pred.modes[n], fut[n], fmask[n])))
        return make_error_table(records, model=model, split=split)

    def score(self, scenarios) -> float:
        """Negative mean minADE (higher is better, sklearn convention)."""
        table = self.error_table(scenarios)
        return -math.fsum(table["minade6"].tolist()) / max(len(table), 1)

    # ------------------------------------------------------------ persistence
    def save(self, path) -> Path:
        check_is_fitted(self, "net_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "kind": "predictor",
            "params": self.get_params(),
            "horizons": self.horizons_.as_dict(),
            "epoch": self.epoch_,
            "seed": self.random_state,
            "state_dict": self.net_.state_dict(),
            "optimizer": self.optimizer_.state_dict(),
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "TrajectoryPredictor":
        try:
            ckpt = torch.load(path, weights_only=False)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise ConfigurationError(f"cannot read predictor checkpoint {path}: {exc}") from exc
        if not isinstance(ckpt, dict) or ckpt.get("kind") != "predictor":
            raise ConfigurationError(f"{path} is not a predictor checkpoint")
        params = dict(ckpt["params"])
        params["horizons"] = None
        model = cls(**params)._initialize(Horizons(**ckpt["horizons"]))
        model.net_.load_state_dict(ckpt["state_dict"])
        model.optimizer_.load_state_dict(ckpt["optimizer"])
        model.epoch_ = ckpt["epoch"]
        return model


__all__ = ["PredictionSet", "TrajectoryPredictor", "draw_epoch_indices", "wta_loss", "scene_features", "N_MAX"]
