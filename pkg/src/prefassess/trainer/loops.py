"""Rollouts, the GRPO and SFT training loops, logs and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .objectives import ADVANTAGE_MODES, KL_ESTIMATORS, Adam, compute_advantages, grpo_objective, sft_loss
from .policy import LogLinearPolicy, Trajectory

RewardFn = Callable[[Any, Trajectory], float]


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 6
    temperature: float = 0.9
    beta: float = 0.04
    clip_eps: float = 0.2
    advantage_mode: str = "mean"
    sigma_floor: float = 1e-8
    learning_rate: float = 1e-6
    kl_estimator: str = "k3"
    max_len: int = 64
    batch_size: int = 1
    updates_per_rollout: int = 1  # >1 reuses a rollout batch, so pi_old lags the policy

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ValueError(f"advantage_mode must be one of {ADVANTAGE_MODES}")
        if self.kl_estimator not in KL_ESTIMATORS:
            raise ValueError(f"kl_estimator must be one of {KL_ESTIMATORS}")
        if self.temperature < 0 or self.learning_rate <= 0:
            raise ValueError("temperature must be >= 0 and learning_rate > 0")
        if self.batch_size < 1 or self.updates_per_rollout < 1 or self.max_len < 1:
            raise ValueError("batch_size, updates_per_rollout and max_len must be positive")


@dataclass
class RolloutGroup:
    context: Any
    outputs: list[Trajectory]
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None

    @property
    def old_logprobs(self) -> list[np.ndarray]:
        return [o.logprobs for o in self.outputs]

    def __len__(self) -> int:
        return len(self.outputs)


def rollout_group(
    policy: LogLinearPolicy, context: Any, cfg: GRPOConfig, rng: np.random.Generator
) -> RolloutGroup:
    outputs = [policy.generate(context, cfg.temperature, cfg.max_len, rng) for _ in range(cfg.group_size)]
    return RolloutGroup(context, outputs)


def score_group(group: RolloutGroup, reward_fn: RewardFn, cfg: GRPOConfig) -> RolloutGroup:
    group.rewards = np.array([0.0 if o.truncated else float(reward_fn(group.context, o)) for o in group.outputs])
    group.advantages = compute_advantages(group.rewards, cfg.advantage_mode, cfg.sigma_floor)
    return group


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


def train_grpo(
    policy: LogLinearPolicy,
    ref_policy: LogLinearPolicy,
    contexts: Sequence[Any],
    reward_fn: RewardFn,
    cfg: GRPOConfig,
    steps: int,
    rng: np.random.Generator,
    on_step: Callable[[int, LogLinearPolicy], None] | None = None,
) -> TrainingLog:
    """Group-relative policy optimization by Adam ascent on the clipped objective.

    Each step draws `cfg.batch_size` contexts, samples a group for each,
    scores and normalizes rewards within groups, then applies
    `cfg.updates_per_rollout` ascent updates against those fixed rollouts.
    """
    if not ref_policy.frozen:
        raise ValueError("reference policy must be a frozen clone")
    if not contexts:
        raise ValueError("no training contexts")
    opt = Adam(cfg.learning_rate)
    log = TrainingLog()
    for step in range(steps):
        idx = rng.choice(len(contexts), size=cfg.batch_size, replace=cfg.batch_size > len(contexts))
        groups = []
        for i in idx:
            group = rollout_group(policy, contexts[int(i)], cfg, rng)
            try:
                score_group(group, reward_fn, cfg)
            except Exception as exc:
                raise RuntimeError(f"reward failed at step {step} (context {int(i)})") from exc
            groups.append(group)
        for _ in range(cfg.updates_per_rollout):
            grad = np.zeros(policy.n_params)
            objective = kl = clip = 0.0
            for group in groups:
                stats, g = grpo_objective(
                    policy, group.old_logprobs, ref_policy, group.outputs, group.advantages,
                    cfg.clip_eps, cfg.beta, cfg.kl_estimator,
                )
                grad += g
                objective += stats.objective
                kl += stats.kl
                clip += stats.clip_fraction
            n = len(groups)
            policy.parameters = policy.theta + opt.direction(-grad / n)
        rewards = np.concatenate([g.rewards for g in groups])
        advs = np.concatenate([g.advantages for g in groups])
        log.append({
            "step": step,
            "mean_reward": float(rewards.mean()),
            "mean_advantage_abs": float(np.abs(advs).mean()),
            "kl": kl / n,
            "clip_fraction": clip / n,
            "loss": -objective / n,
        })
        if on_step is not None:
            on_step(step, policy)
    return log


def train_sft(
    policy: LogLinearPolicy,
    dataset: Sequence[tuple[Any, Sequence[int]]],
    epochs: int = 1,
    lr: float = 1e-2,
    rng: np.random.Generator | None = None,
    batch_size: int = 1,
) -> TrainingLog:
    """Adam descent on the token-level cross-entropy; one log record per epoch."""
    if not dataset:
        raise ValueError("empty SFT dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(lr)
    log = TrainingLog()
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [dataset[int(i)] for i in order[start : start + batch_size]]
            loss, grad = sft_loss(policy, batch)
            total += loss * len(batch)
            policy.parameters = policy.theta + opt.direction(grad)
        log.append({"epoch": epoch, "loss": total / len(dataset), "steps": opt.t})
    return log


CHECKPOINT_FORMAT = "prefassess-ckpt-v1"


def save_checkpoint(path: str | Path, policy: LogLinearPolicy, config_hash: str) -> None:
    """npz with `params` (float64 vector), `config_hash`, `signature` (JSON) and `format`."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            params=policy.parameters,
            config_hash=np.array(config_hash),
            signature=np.array(json.dumps(list(policy.signature()))),
            format=np.array(CHECKPOINT_FORMAT),
        )


def load_checkpoint(path: str | Path, policy: LogLinearPolicy) -> str:
    """Load parameters into `policy` in place; returns the stored config hash."""
    with np.load(path) as data:
        if str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        sig = json.loads(str(data["signature"]))
        if sig != list(policy.signature()):
            raise ValueError(f"{path}: checkpoint is for {sig}, policy is {list(policy.signature())}")
        policy.parameters = data["params"]
        return str(data["config_hash"])


def config_dict(cfg: GRPOConfig) -> dict:
    return asdict(cfg)
