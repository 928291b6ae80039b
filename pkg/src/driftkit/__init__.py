"""driftkit: one-step action-chunk policies trained by drift-field regression,
fine-tuned online with exact-likelihood PPO."""

from .actor import ActorOutput, GaussianActor, prefix_entropy, prefix_log_prob, sample_action
from .autodiff import Tensor, backward, no_grad, stop_gradient
from .drift import (DriftConfig, DriftFieldTensors, HypothesisBatch, ReferencePool,
                    build_reference_pool, compute_drift_field, fixed_point_loss, drift_loss)
from .envs import ImitationDataset, PointMassEnv, mode_coverage, synth_multimodal
from .generator import ChunkSpec, Generator, executed_prefix, sample_hypotheses
from .ppo import (Critic, PPOConfig, RolloutBuffer, collect_rollouts, compute_gae,
                  ppo_update, evaluate_policy)
from .training import AdamW, TrainConfig, drift_train_step, train

__all__ = [
    "ActorOutput", "AdamW", "ChunkSpec", "Critic", "DriftConfig",
    "DriftFieldTensors", "GaussianActor", "Generator", "HypothesisBatch",
    "ImitationDataset", "PPOConfig", "PointMassEnv", "ReferencePool",
    "RolloutBuffer", "Tensor", "TrainConfig", "backward",
    "build_reference_pool", "collect_rollouts", "compute_drift_field",
    "compute_gae", "fixed_point_loss", "ppo_update", "drift_loss", "drift_train_step",
    "evaluate_policy", "executed_prefix", "mode_coverage", "no_grad",
    "prefix_entropy", "prefix_log_prob", "sample_action", "sample_hypotheses",
    "stop_gradient", "synth_multimodal", "train",
]
