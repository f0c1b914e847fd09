"""Desk-scale SFT and GRPO over log-linear toy policies."""

from .loops import (
    GRPOConfig,
    RolloutGroup,
    TrainingLog,
    load_checkpoint,
    rollout_group,
    save_checkpoint,
    score_group,
    train_grpo,
    train_sft,
)
from .objectives import Adam, categorical_kl, compute_advantages, grpo_objective, k3_terms, kl_term, sft_loss
from .policy import CatalogPolicy, LogLinearPolicy, SampleView, TinyLMPolicy, Trajectory

__all__ = [
    "Adam", "CatalogPolicy", "GRPOConfig", "LogLinearPolicy", "RolloutGroup", "SampleView",
    "TinyLMPolicy", "TrainingLog", "Trajectory", "categorical_kl", "compute_advantages",
    "grpo_objective", "k3_terms", "kl_term", "load_checkpoint", "rollout_group", "save_checkpoint",
    "score_group", "sft_loss", "train_grpo", "train_sft",
]
