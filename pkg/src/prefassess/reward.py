"""Hybrid reward: format, accuracy and the similarity-aware prediction reward.

    r = w_p * r_predict + w_f * r_format + w_a * r_accuracy
    r_predict = w_img * s_img + w_text * s_text

s_text compares serialized predicted and ground-truth profiles; s_img
compares renders of a probe prompt recaptioned with each. Both are averages
over the (preference, non-preference) sides, so r_predict stays in [0, 1];
set `normalize=False` to get the raw two-term sums instead.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

from .cot import try_parse
from .datagen import ANSWERS, RenderedImage, T2IBackend, UserSample, recaption
from .profile import PreferenceProfile, profile_to_text
from .similarity import ImageSimilarityFn, TextSimilarityFn, greedy_match, matched_mean


@dataclass(frozen=True)
class RewardConfig:
    w_p: float = 0.7
    w_f: float = 0.3
    w_a: float = 1.0
    w_img: float = 0.5
    w_text: float = 0.5
    probe_prompt_policy: str = "first"  # "first" | "fixed"
    probe_prompt: str = "a quiet town square at dusk"
    probe_seed: int = 0
    normalize: bool = True
    tau: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_p", "w_f", "w_a", "w_img", "w_text"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if abs(self.w_img + self.w_text - 1.0) > 1e-12:
            raise ValueError("w_img + w_text must equal 1")
        if self.probe_prompt_policy not in ("first", "fixed"):
            raise ValueError(f"unknown probe prompt policy {self.probe_prompt_policy!r}")

    @property
    def max_total(self) -> float:
        return self.w_p + self.w_f + self.w_a


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: int
    r_accuracy: int
    s_text: float
    s_img: float
    r_predict: float
    total: float

    @classmethod
    def combine(
        cls, r_format: int, r_accuracy: int, s_text: float, s_img: float, cfg: RewardConfig
    ) -> "RewardBreakdown":
        r_predict = prediction_reward(s_text, s_img, cfg)
        total = cfg.w_p * r_predict + cfg.w_f * r_format + cfg.w_a * r_accuracy
        return cls(r_format, r_accuracy, s_text, s_img, r_predict, total)


@dataclass
class RewardBackends:
    t2i: T2IBackend
    text_sim: TextSimilarityFn
    image_sim: ImageSimilarityFn


def format_reward(resp_text: str) -> int:
    return int(try_parse(resp_text, "strict") is not None)


def accuracy_reward(answer: str | None, gt_answer: str) -> int:
    if answer is None or answer not in ANSWERS:
        return 0
    return int(answer == gt_answer)


def text_similarity_score(
    pred_pos: Sequence[PreferenceProfile],
    pred_neg: Sequence[PreferenceProfile],
    gt_pos: Sequence[PreferenceProfile],
    gt_neg: Sequence[PreferenceProfile],
    sim: TextSimilarityFn,
    normalize: bool = True,
) -> float:
    if not gt_pos or not gt_neg:
        raise ValueError("ground-truth profiles are required")

    def side(pred: Sequence[PreferenceProfile], gt: Sequence[PreferenceProfile]) -> float:
        return matched_mean(pred, gt, lambda a, b: sim(profile_to_text(a), profile_to_text(b)))

    s = side(pred_pos, gt_pos) + side(pred_neg, gt_neg)
    return s / 2 if normalize else s


def image_similarity_score(
    pred_pos: Sequence[PreferenceProfile],
    pred_neg: Sequence[PreferenceProfile],
    gt_pos: Sequence[PreferenceProfile],
    gt_neg: Sequence[PreferenceProfile],
    initial_prompt: str,
    t2i: T2IBackend,
    sim: ImageSimilarityFn,
    seed: int,
    normalize: bool = True,
) -> float:
    """Render the probe prompt under each profile with one shared seed and compare."""
    if not initial_prompt or not initial_prompt.strip():
        raise ValueError("probe prompt is empty")
    if not gt_pos or not gt_neg:
        raise ValueError("ground-truth profiles are required")

    def render(p: PreferenceProfile) -> RenderedImage:
        try:
            return t2i.render(recaption(initial_prompt, p), seed)
        except Exception as exc:
            raise RuntimeError(f"render failed for profile '{profile_to_text(p)}'") from exc

    def side(pred: Sequence[PreferenceProfile], gt: Sequence[PreferenceProfile]) -> float:
        pred_imgs = [render(p) for p in pred if len(p)]
        gt_imgs = [render(g) for g in gt]
        # empty predicted profiles cannot be recaptioned; they count as unmatched
        denom = max(len(pred), len(gt))
        return sum(s for _, _, s in greedy_match(pred_imgs, gt_imgs, sim)) / denom

    s = side(pred_pos, gt_pos) + side(pred_neg, gt_neg)
    return s / 2 if normalize else s


def prediction_reward(s_text: float, s_img: float, cfg: RewardConfig) -> float:
    return cfg.w_img * s_img + cfg.w_text * s_text


def probe_prompt(sample: UserSample, cfg: RewardConfig) -> str:
    if cfg.probe_prompt_policy == "fixed":
        return cfg.probe_prompt
    return sample.initial_prompts[0]


def total_reward(
    resp_text: str, sample: UserSample, cfg: RewardConfig, backends: RewardBackends
) -> RewardBreakdown:
    r = try_parse(resp_text, "strict")
    if r is None:
        return RewardBreakdown.combine(0, 0, 0.0, 0.0, cfg)
    ps = sample.profile_set
    s_text = text_similarity_score(
        r.predicted_preferences, r.predicted_non_preferences,
        ps.preferences, ps.non_preferences, backends.text_sim, cfg.normalize,
    )
    s_img = image_similarity_score(
        r.predicted_preferences, r.predicted_non_preferences,
        ps.preferences, ps.non_preferences,
        probe_prompt(sample, cfg), backends.t2i, backends.image_sim, cfg.probe_seed, cfg.normalize,
    )
    return RewardBreakdown.combine(1, accuracy_reward(r.answer, sample.gt_answer), s_text, s_img, cfg)


def debug_record(b: RewardBreakdown, sample: UserSample, cfg: RewardConfig) -> str:
    rec = asdict(b)
    rec["weights"] = {k: getattr(cfg, k) for k in ("w_p", "w_f", "w_a", "w_img", "w_text")}
    rec["probe_prompt"] = probe_prompt(sample, cfg)
    rec["seed"] = cfg.probe_seed
    return json.dumps(rec, indent=2)
