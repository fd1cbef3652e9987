"""Active training loop: tail mining, tail-aware augmentation and weighted dataset updates.

The same driver runs GALTraj and the three baselines so every method shares
the initial phase, the sampling budget and the history format.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import GENERATED, Entry, WeightedDataset
from .diffusion import TrajectoryDenoiser
from .exceptions import ConfigurationError, GALTrajError
from .guidance import (GuidanceConfig, categorize_agents, real_guided_sample_batch, relevance_attention,
                       unguided_sample_batch)
from .metrics import summarize
from .predictor import TrajectoryPredictor
from .world import AgentTrack, Scenario

log = logging.getLogger(__name__)

METHODS = ("vanilla", "resampling", "naive", "galtraj")
STAGES = ("mine", "augment", "shift", "update", "train", "eval")


@dataclass(frozen=True)
class TailRecord:
    scenario_id: int
    tail_agent_ids: frozenset
    epoch: int
    max_error: float


@dataclass
class RunConfig:
    total_epochs: int = 9
    initial_fraction: str = "2/3"
    tau_policy: str = "quantile"
    tau_quantile: float = 95.0
    tau_value: float | None = None
    alpha: float = 0.9
    w_min: float = 0.2
    epoch_size: int | None = 8000
    max_shift: int | None = None
    generation_batch: int = 32
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    predictor: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.guidance, dict):
            self.guidance = GuidanceConfig(**self.guidance)
        self.validate()

    @property
    def fraction(self) -> Fraction:
        return Fraction(str(self.initial_fraction)).limit_denominator(1000)

    @property
    def initial_epochs(self) -> int:
        return math.ceil(self.fraction * self.total_epochs)

    def validate(self) -> "RunConfig":
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        try:
            frac = self.fraction
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"bad initial_fraction {self.initial_fraction!r}") from exc
        if not 0 < frac < 1:
            raise ConfigurationError("initial_fraction must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if not 0 < self.w_min < 1:
            raise ConfigurationError("w_min must lie in (0, 1)")
        if self.tau_policy not in ("quantile", "fixed"):
            raise ConfigurationError(f"unknown tau policy {self.tau_policy!r}")
        if self.tau_policy == "fixed" and self.tau_value is None:
            raise ConfigurationError("fixed tau policy needs tau_value")
        if not 0 < self.tau_quantile < 100:
            raise ConfigurationError("tau_quantile must lie in (0, 100)")
        if self.epoch_size is not None and self.epoch_size < 0:
            raise ConfigurationError("epoch_size must be non-negative")
        if self.generation_batch < 1:
            raise ConfigurationError("generation_batch must be >= 1")
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = self.guidance.as_dict()
        return d


# ---------------------------------------------------------------- mining


def choose_tau(errors, policy: str = "quantile", quantile: float = 95.0, value: float | None = None) -> float:
    """Error threshold: linear-interpolated percentile of ``errors`` or a fixed ``value``."""
    if policy == "fixed":
        if value is None:
            raise ConfigurationError("fixed tau policy needs a value")
        return float(value)
    if policy != "quantile":
        raise ConfigurationError(f"unknown tau policy {policy!r}")
    errors = np.asarray(errors, dtype=float).ravel()
    errors = errors[np.isfinite(errors)]
    if len(errors) == 0:
        raise ConfigurationError("cannot choose tau from an empty error set")
    return float(np.percentile(errors, quantile))


def mine_tail_samples(errors: pd.DataFrame, tau: float, epoch: int) -> list:
    """One :class:`TailRecord` per original scenario with an agent error above ``tau``.

    ``errors`` has columns ``scenario_id, agent_id, error`` and optionally
    ``generated``; generated rows are ignored.
    """
    if "generated" in errors.columns:
        errors = errors[~errors["generated"].astype(bool)]
    hits = errors[errors["error"] > tau]
    records = []
    for sid, grp in hits.groupby("scenario_id", sort=True):
        records.append(TailRecord(int(sid), frozenset(int(a) for a in grp["agent_id"]), epoch,
                                  float(grp["error"].max())))
    return records


# ---------------------------------------------------------------- augmentation


def _with_future(scn: Scenario, future: np.ndarray, scenario_id: int) -> Scenario:
    t0 = scn.horizons.t_h + 1
    agents = []
    for a, f in zip(scn.agents, future):
        pos = a.positions.copy()
        pos[t0:] = f
        agents.append(AgentTrack(a.agent_id, pos, a.valid_mask.copy(), a.maneuver_label))
    return Scenario(scenario_id, scn.map, agents, scn.horizons)


def augment_tail(records, dataset: WeightedDataset, denoiser: TrajectoryDenoiser, guidance: GuidanceConfig,
                 seed=0, batch_size: int = 32, stats: dict | None = None) -> list:
    """One generated :class:`Entry` per record, ids continuing after the dataset's.

    Record tail agents are tail; relevance comes from attention at the tail
    agents' start step. Records that fail to generate are skipped and logged.
    """
    records = list(records)
    rng = np.random.default_rng(seed)
    k_tail = max(denoiser.schedule.k_star(guidance.lambda_tail), 1)
    jobs = []
    for rec in records:
        try:
            entry = dataset.entry_for(rec.scenario_id)
            if entry.generated:
                raise GALTrajError(f"scenario {rec.scenario_id} is generated")
            scn = entry.scenario
            ids = [a.agent_id for a in scn.agents]
            if not rec.tail_agent_ids <= set(ids):
                raise GALTrajError(f"record {rec.scenario_id} names unknown agents")
            flags = [1.0 if i in rec.tail_agent_ids else 0.0 for i in ids]
            attn = relevance_attention(denoiser, scn, k_tail, seed=int(rng.integers(2**31)))
            jobs.append((rec, scn, categorize_agents(flags, 0.5, attn)))
        except (GALTrajError, KeyError, ArithmeticError, ValueError) as exc:
            log.warning("skipping tail record %s: %s", rec.scenario_id, exc)
    out = []
    next_id = dataset.next_scenario_id()
    failed = len(records) - len(jobs)
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        try:
            futures = real_guided_sample_batch(denoiser, [j[1] for j in chunk], [j[2] for j in chunk], guidance,
                                               seed=int(rng.integers(2**31)))
        except (GALTrajError, ArithmeticError, ValueError) as exc:
            log.warning("generation batch failed (%s); retrying records one by one", exc)
            futures = []
            for _, scn, cats in chunk:
                try:
                    futures.append(real_guided_sample_batch(denoiser, [scn], [cats], guidance,
                                                            seed=int(rng.integers(2**31)))[0])
                except (GALTrajError, ArithmeticError, ValueError) as exc2:
                    log.warning("skipping scenario %s: %s", scn.scenario_id, exc2)
                    futures.append(None)
        for (rec, scn, cats), fut in zip(chunk, futures):
            if fut is None or not np.isfinite(fut).all():
                failed += 1
                continue
            out.append(Entry(_with_future(scn, fut, next_id), 1.0, GENERATED, scn.scenario_id, tuple(cats)))
            next_id += 1
    if stats is not None:
        stats["failed"] = failed
    return out


def naive_augment(records, dataset: WeightedDataset, denoiser: TrajectoryDenoiser, seed=0,
                  batch_size: int = 32) -> list:
    """Unguided generation from pure noise for every agent; no categories."""
    rng = np.random.default_rng(seed)
    scns = [dataset.entry_for(r.scenario_id).scenario for r in records]
    out = []
    next_id = dataset.next_scenario_id()
    for start in range(0, len(scns), batch_size):
        chunk = scns[start : start + batch_size]
        for scn, fut in zip(chunk, unguided_sample_batch(denoiser, chunk, seed=int(rng.integers(2**31)))):
            if not np.isfinite(fut).all():
                log.warning("skipping non-finite naive sample for scenario %s", scn.scenario_id)
                continue
            out.append(Entry(_with_future(scn, fut, next_id), 1.0, GENERATED, scn.scenario_id, None))
            next_id += 1
    return out


def time_window_shift(scn: Scenario, delta_t: int, max_shift: int | None = None) -> Scenario:
    """Slide every track ``delta_t`` steps forward; the trailing steps are zeroed and masked."""
    max_shift = scn.horizons.t_f // 2 if max_shift is None else max_shift
    if not 0 <= delta_t <= max_shift or delta_t != int(delta_t):
        raise ValueError(f"delta_t must be an integer in [0, {max_shift}], got {delta_t}")
    if delta_t == 0:
        return scn
    agents = []
    for a in scn.agents:
        pos = np.zeros_like(a.positions)
        valid = np.zeros_like(a.valid_mask)
        pos[:-delta_t] = a.positions[delta_t:]
        valid[:-delta_t] = a.valid_mask[delta_t:]
        agents.append(AgentTrack(a.agent_id, pos, valid, a.maneuver_label))
    return Scenario(scn.scenario_id, scn.map, agents, scn.horizons)


def update_dataset(dataset: WeightedDataset, generated, alpha: float, w_min: float) -> WeightedDataset:
    """Decay existing weights to ``max(alpha * w, w_min)`` and append ``generated`` at weight 1."""
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    out = WeightedDataset(replace(e, weight=max(alpha * e.weight, w_min)) for e in dataset)
    for g in generated:
        if not isinstance(g, Entry):
            raise TypeError("generated items must be Entry objects")
        out.append(replace(g, weight=1.0, provenance=GENERATED))
    return out


# ---------------------------------------------------------------- loop


class StageError(GALTrajError):
    def __init__(self, stage: str, epoch: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed at epoch {epoch}: {cause}")
        self.stage, self.epoch = stage, epoch
        self.exit_code = getattr(cause, "exit_code", 1)


class _Timer:
    def __init__(self, epoch: int):
        self.epoch = epoch
        self.times = {s: 0.0 for s in STAGES}

    def run(self, stage, fn, *args, **kwargs):
        t = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except GALTrajError as exc:
            raise StageError(stage, self.epoch, exc) from exc
        finally:
            self.times[stage] += time.perf_counter() - t


def make_predictor(config: RunConfig, horizons=None) -> TrajectoryPredictor:
    params = dict(config.predictor)
    params.setdefault("random_state", config.seed)
    params.setdefault("n_epochs", config.total_epochs)
    return TrajectoryPredictor(**params)._initialize(horizons)


@dataclass
class InitialPhase:
    predictor: TrajectoryPredictor
    rows: list
    last_errors: pd.DataFrame


def train_initial(config: RunConfig, scenarios, val=None) -> InitialPhase:
    """The shared first ``ceil(f * E)`` epochs on uniform weights."""
    scenarios = list(scenarios)
    if not scenarios:
        raise ConfigurationError("cannot train on an empty dataset")
    data = WeightedDataset.from_scenarios(scenarios)
    model = make_predictor(config, scenarios[0].horizons)
    m = config.epoch_size if config.epoch_size is not None else len(scenarios)
    rows, errs = [], None
    for epoch in range(1, config.initial_epochs + 1):
        row, errs = _plain_epoch(model, data, m, epoch, val, "initial")
        rows.append(row)
    return InitialPhase(model, rows, errs)


def _snapshot(model, val, timer):
    if not val:
        return None
    table = timer.run("eval", model.error_table, val)
    row = summarize(table)
    return {k: v for k, v in row.items() if not k.startswith("top")}


def _plain_epoch(model, data, m, epoch, val, phase):
    start = time.perf_counter()
    timer = _Timer(epoch)
    errs = timer.run("train", model.train_epoch, data, m)
    snap = _snapshot(model, val, timer)
    return _row(epoch, phase, model, errs, data, timer, start, snapshot=snap), errs


def _row(epoch, phase, model, errs, data, timer, start, **extra) -> dict:
    total = time.perf_counter() - start
    timing = {k: round(v, 6) for k, v in timer.times.items()}
    timing["epoch"] = round(total, 6)
    timing["generation_fraction"] = round((timer.times["augment"] + timer.times["shift"]) / total, 6) if total else 0
    row = {
        "epoch": epoch,
        "phase": phase,
        "n_sampled": int(model.last_draws_),
        "train_error": float(errs["error"].mean()) if len(errs) else float("nan"),
        "dataset": data.weight_summary(),
        "timing": timing,
    }
    row.update(extra)
    return row


def run_method(method: str, config: RunConfig, scenarios, denoiser: TrajectoryDenoiser | None = None,
               val=None, initial=None):
    """Train ``method`` for ``config.total_epochs`` epochs.

    ``initial`` optionally supplies the :class:`InitialPhase` (copied, not
    modified) so several methods can share one initial phase.
    Returns ``(predictor, history)`` where ``history["reference"]`` is the
    frozen initial-phase predictor used for Top k%.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    if method in ("naive", "galtraj") and denoiser is None:
        raise ConfigurationError(f"method {method!r} needs a trained denoiser")
    scenarios = list(scenarios)
    if initial is None:
        initial = train_initial(config, scenarios, val)
    reference = initial.predictor
    model = copy.deepcopy(reference)
    data = WeightedDataset.from_scenarios(scenarios)
    m = config.epoch_size if config.epoch_size is not None else len(scenarios)
    rows = [dict(r) for r in initial.rows]
    max_shift = config.max_shift if config.max_shift is not None else scenarios[0].horizons.t_f // 2
    rng = np.random.default_rng([config.seed, 7])
    last_errors = initial.last_errors
    for epoch in range(config.initial_epochs + 1, config.total_epochs + 1):
        if method == "vanilla":
            rows.append(_plain_epoch(model, data, m, epoch, val, "loop")[0])
            continue
        start = time.perf_counter()
        timer = _Timer(epoch)
        tau, records, counts = timer.run("mine", _mine, last_errors, config, epoch)
        stats: dict = {"failed": 0}
        generated = []
        if method == "galtraj":
            generated = timer.run("augment", augment_tail, records, data, denoiser, config.guidance,
                                  seed=int(rng.integers(2**31)), batch_size=config.generation_batch, stats=stats)
            generated = timer.run("shift", _shift_all, generated, rng, max_shift)
        elif method == "naive":
            generated = timer.run("augment", naive_augment, records, data, denoiser,
                                  seed=int(rng.integers(2**31)), batch_size=config.generation_batch)
        if method == "resampling":
            data = timer.run("update", _resample_update, data, records, config.alpha, config.w_min)
        elif method == "galtraj":
            data = timer.run("update", update_dataset, data, generated, config.alpha, config.w_min)
        else:
            data = timer.run("update", _concat, data, generated)
        last_errors = timer.run("train", model.train_epoch, data, m)
        snap = _snapshot(model, val, timer)
        rows.append(_row(epoch, "loop", model, last_errors, data, timer, start, snapshot=snap, tau=tau,
                         n_tail_scenes=len(records), **counts, n_generated=len(generated),
                         n_failed=stats["failed"]))
    history = {"method": method, "config": config.as_dict(), "initial_epochs": config.initial_epochs,
               "epochs": rows, "reference": reference}
    return model, history


def _mine(errors: pd.DataFrame, config: RunConfig, epoch: int):
    originals = errors[~errors["generated"].astype(bool)]
    tau = choose_tau(originals["error"], config.tau_policy, config.tau_quantile, config.tau_value)
    records = mine_tail_samples(errors, tau, epoch)
    n_agents = len(originals)
    n_tail = sum(len(r.tail_agent_ids) for r in records)
    counts = {"n_tail_agents": n_tail, "n_agents_mined": n_agents,
              "tail_agent_fraction": n_tail / max(n_agents, 1),
              "tail_scene_fraction": len(records) / max(originals["scenario_id"].nunique(), 1)}
    return tau, records, counts


def _shift_all(generated, rng, max_shift):
    deltas = rng.integers(0, max_shift + 1, size=len(generated))
    return [replace(g, scenario=time_window_shift(g.scenario, int(d), max_shift)) for g, d in zip(generated, deltas)]


def _concat(data: WeightedDataset, generated) -> WeightedDataset:
    out = data.copy()
    for g in generated:
        out.append(replace(g, weight=1.0, provenance=GENERATED))
    return out


def _resample_update(data: WeightedDataset, records, alpha, w_min) -> WeightedDataset:
    """Decay as usual, then lift the mined tail scenarios back to weight 1."""
    tail_ids = {r.scenario_id for r in records}
    out = update_dataset(data, [], alpha, w_min)
    for e in out:
        if e.scenario.scenario_id in tail_ids:
            e.weight = 1.0
    return out


def history_to_json(history: dict) -> dict:
    """JSON-safe copy of a history; the reference predictor is dropped."""
    return {k: v for k, v in history.items() if k != "reference"}


def save_history(history: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(history_to_json(history), indent=2, sort_keys=True, default=float) + "\n")
    return path


def strip_timing(history: dict) -> dict:
    """History without wall-clock fields, for reproducibility comparisons."""
    out = copy.deepcopy(history_to_json(history))
    for row in out["epochs"]:
        row.pop("timing", None)
    return out


class GALTrajTrainer(BaseEstimator):
    """Estimator wrapper around :func:`run_method`.

    ``fit`` trains the predictor and keeps the frozen initial-phase model in
    ``reference_`` so Top k% can be computed against it.
    """

    def __init__(self, method="galtraj", denoiser=None, total_epochs=9, initial_fraction="2/3",
                 tau_policy="quantile", tau_quantile=95.0, tau_value=None, alpha=0.9, w_min=0.2,
                 epoch_size=8000, max_shift=None, generation_batch=32, guidance=None, predictor=None,
                 random_state=0):
        self.method = method
        self.denoiser = denoiser
        self.total_epochs = total_epochs
        self.initial_fraction = initial_fraction
        self.tau_policy = tau_policy
        self.tau_quantile = tau_quantile
        self.tau_value = tau_value
        self.alpha = alpha
        self.w_min = w_min
        self.epoch_size = epoch_size
        self.max_shift = max_shift
        self.generation_batch = generation_batch
        self.guidance = guidance
        self.predictor = predictor
        self.random_state = random_state

    def run_config(self) -> RunConfig:
        guidance = self.guidance if self.guidance is not None else GuidanceConfig()
        return RunConfig(total_epochs=self.total_epochs, initial_fraction=self.initial_fraction,
                         tau_policy=self.tau_policy, tau_quantile=self.tau_quantile, tau_value=self.tau_value,
                         alpha=self.alpha, w_min=self.w_min, epoch_size=self.epoch_size,
                         max_shift=self.max_shift, generation_batch=self.generation_batch, guidance=guidance,
                         predictor=dict(self.predictor or {}), seed=self.random_state)

    def fit(self, scenarios, val=None, initial: InitialPhase | None = None):
        model, history = run_method(self.method, self.run_config(), scenarios, self.denoiser, val=val,
                                    initial=initial)
        self.predictor_ = model
        self.reference_ = history["reference"]
        self.history_ = history_to_json(history)
        return self

    def predict(self, scenario):
        check_is_fitted(self, "predictor_")
        return self.predictor_.predict(scenario)

    def error_table(self, scenarios, split: str = "") -> pd.DataFrame:
        check_is_fitted(self, "predictor_")
        return self.predictor_.error_table(scenarios, model=self.method, split=split)

    def score(self, scenarios) -> float:
        check_is_fitted(self, "predictor_")
        return self.predictor_.score(scenarios)
