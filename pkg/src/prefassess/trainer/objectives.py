"""Losses, advantages, KL estimators and the clipped group objective.

Every function returns its value together with an exact gradient with
respect to the policy's flat parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .policy import (
    log_softmax,
    LogLinearPolicy,
    Trajectory,
    chosen_logprob_grads,
    chosen_logprobs,
    step_logprobs,
)

ADVANTAGE_MODES = ("mean", "max")
KL_ESTIMATORS = ("exact", "k3")


def sft_loss(
    policy: LogLinearPolicy, batch: Sequence[tuple[object, Sequence[int]]]
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the target sequences and its gradient."""
    if not batch:
        raise ValueError("empty batch")
    theta = policy.theta
    loss = 0.0
    grad = np.zeros_like(theta)
    for context, tokens in batch:
        traj = policy.trajectory(context, tokens, temperature=1.0)
        loss -= float(np.sum(chosen_logprobs(theta, traj)))
        if len(traj):
            grad -= chosen_logprob_grads(theta, traj).sum(axis=0)
    return loss / len(batch), grad / len(batch)


def compute_advantages(
    rewards: Sequence[float], mode: str = "mean", sigma_floor: float = 1e-8
) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if mode not in ADVANTAGE_MODES:
        raise ValueError(f"unknown advantage mode {mode!r}")
    std = float(r.std())
    if std < sigma_floor:
        return np.zeros_like(r)
    base = r.mean() if mode == "mean" else r.max()
    return (r - base) / max(std, sigma_floor)


def _check_compatible(policy: LogLinearPolicy, ref: LogLinearPolicy) -> None:
    if policy.signature() != ref.signature():
        raise ValueError(f"policy {policy.signature()} and reference {ref.signature()} differ")


def kl_term(
    policy: LogLinearPolicy,
    ref_policy: LogLinearPolicy,
    traj: Trajectory,
    estimator: str = "k3",
) -> tuple[float, np.ndarray]:
    """KL(pi_theta || pi_ref) along one trajectory, summed over steps.

    "exact" sums the full categorical KL at every visited step; "k3" uses the
    per-token estimator q/p - log(q/p) - 1 at the sampled token, which is
    pointwise non-negative.
    """
    _check_compatible(policy, ref_policy)
    if estimator not in KL_ESTIMATORS:
        raise ValueError(f"unknown KL estimator {estimator!r}")
    theta, t = policy.theta, traj.temperature
    grad = np.zeros_like(theta)
    if len(traj) == 0:
        return 0.0, grad
    if estimator == "exact":
        lp = step_logprobs(theta, traj)
        lq = step_logprobs(ref_policy.theta, traj)
        p = np.exp(lp)
        diff = np.where(traj.mask, lp - lq, 0.0)
        per_step = np.sum(p * diff, axis=-1)
        # d KL / d z = p * (log p - log q - KL), and d z / d theta = F / t
        dz = p * (diff - per_step[:, None])
        grad = np.einsum("so,sod->d", dz, traj.feats) / t
        return float(per_step.sum()), grad
    lp = chosen_logprobs(theta, traj)
    lq = chosen_logprobs(ref_policy.theta, traj)
    ratio = np.exp(lq - lp)
    terms = ratio - (lq - lp) - 1.0
    grad = ((1.0 - ratio)[:, None] * chosen_logprob_grads(theta, traj)).sum(axis=0)
    return float(terms.sum()), grad


def k3_terms(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Per-token k3 values for given current and reference log-probabilities."""
    log_ratio = np.asarray(logq) - np.asarray(logp)
    return np.exp(log_ratio) - log_ratio - 1.0


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


@dataclass
class ObjectiveStats:
    objective: float
    surrogate: float
    kl: float
    clip_fraction: float
    ratios: np.ndarray


def _stack(outputs: Sequence[Trajectory], n_params: int) -> tuple[np.ndarray, ...]:
    """Concatenate the steps of several trajectories; `seg` maps steps to outputs."""
    width = max((o.feats.shape[1] for o in outputs if len(o)), default=1)
    total = sum(len(o) for o in outputs)
    feats = np.zeros((total, width, n_params))
    mask = np.zeros((total, width), dtype=bool)
    choice = np.zeros(total, dtype=np.int64)
    seg = np.zeros(total, dtype=np.int64)
    pos = 0
    for i, o in enumerate(outputs):
        n, w = len(o), o.feats.shape[1]
        feats[pos : pos + n, :w] = o.feats
        mask[pos : pos + n, :w] = o.mask
        choice[pos : pos + n] = o.choice
        seg[pos : pos + n] = i
        pos += n
    return feats, mask, choice, seg


def grpo_objective(
    policy: LogLinearPolicy,
    old_logprobs: Sequence[np.ndarray],
    ref_policy: LogLinearPolicy,
    outputs: Sequence[Trajectory],
    advantages: Sequence[float],
    clip_eps: float = 0.2,
    beta: float = 0.04,
    kl_estimator: str = "k3",
) -> tuple[ObjectiveStats, np.ndarray]:
    """Clipped sequence-level surrogate minus beta times KL, averaged over the group.

    The objective is to be maximized; the returned gradient is its ascent direction.
    """
    if not len(outputs) == len(old_logprobs) == len(advantages):
        raise ValueError("outputs, old log-probs and advantages must have equal length")
    if beta > 0.0:
        _check_compatible(policy, ref_policy)
    if kl_estimator not in KL_ESTIMATORS:
        raise ValueError(f"unknown KL estimator {kl_estimator!r}")
    temps = {o.temperature for o in outputs}
    if len(temps) != 1:
        raise ValueError("all outputs in a group must share one sampling temperature")
    t = temps.pop()
    for i, (traj, old) in enumerate(zip(outputs, old_logprobs)):
        if np.shape(old) != (len(traj),):
            raise ValueError(f"output {i}: {len(traj)} tokens but {np.shape(old)} old log-probs")

    theta = policy.theta
    g = len(outputs)
    adv = np.asarray(advantages, dtype=np.float64)
    feats, mask, choice, seg = _stack(outputs, policy.n_params)
    rows = np.arange(len(choice))
    lp_all = log_softmax(feats @ theta / t, mask)
    lp = lp_all[rows, choice]
    old_sum = np.array([float(np.sum(o)) for o in old_logprobs])
    rho = np.exp(np.bincount(seg, lp, minlength=g) - old_sum)
    unclipped = rho * adv
    bounded = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    is_clipped = bounded < unclipped
    surrogate = float(np.where(is_clipped, bounded, unclipped).mean())

    # per-step weight on d log pi(chosen) / d theta
    coef = np.where(is_clipped, 0.0, unclipped)[seg] / g
    extra = None
    kl = 0.0
    if beta > 0.0 and len(choice):
        lq_all = log_softmax(feats @ ref_policy.theta / t, mask)
        if kl_estimator == "exact":
            p = np.exp(lp_all)
            diff = np.where(mask, lp_all - lq_all, 0.0)
            per_step = np.sum(p * diff, axis=-1)
            kl = float(per_step.sum()) / g
            extra = -beta / g * p * (diff - per_step[:, None])
        else:
            log_ratio = lq_all[rows, choice] - lp
            ratio = np.exp(log_ratio)
            kl = float(np.sum(ratio - log_ratio - 1.0)) / g
            coef = coef - beta / g * (1.0 - ratio)
    p = np.exp(lp_all)
    # sum_s coef_s * (F[s, c_s] - p_s F_s) / t, plus the exact-KL logit term
    logit_w = -coef[:, None] * p
    logit_w[rows, choice] += coef
    if extra is not None:
        logit_w += extra
    grad = np.einsum("so,sod->d", logit_w, feats) / t
    stats = ObjectiveStats(surrogate - beta * kl, surrogate, kl, float(is_clipped.mean()), rho)
    return stats, grad


class Adam:
    """Plain Adam on a flat parameter vector."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        """Step to add to the parameters when descending `grad`."""
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
