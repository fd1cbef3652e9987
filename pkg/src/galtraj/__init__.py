"""Tail-aware generative augmentation for multi-agent trajectory prediction."""
from .diffusion import DiffusionSchedule, TrajectoryDenoiser, forward_noise
from .guidance import GuidanceConfig, apply_gradient_guidance, cost_no_offroad, cost_repeller
from .loop import GALTrajTrainer, RunConfig, TailRecord, mine_tail_samples, run_method, time_window_shift, update_dataset
from .metrics import false_prediction_ratio, min_ade, min_fde, top_k_percent, value_at_risk
from .predictor import TrajectoryPredictor
from .world import DatasetConfig, build_map, synthesize_dataset, synthesize_scenario

__version__ = "0.1.0"
