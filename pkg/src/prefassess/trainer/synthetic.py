"""Synthetic bandit task: a catalog of templated responses per user sample.

Each context offers the same eight response templates instantiated for one
mock user, scored once with the real reward engine:

    0  ground-truth profiles, consistent scores, correct answer (reward max)
    1  ground-truth profiles, scores and answer flipped
    2  two elements wrong on each side, correct answer
    3  preference and non-preference profiles swapped, correct answer
    4  random profiles, correct answer
    5  random profiles, wrong answer
    6  oracle text with the answer block left unclosed
    7  oracle content with a prose think block (lenient-only)

Entries are shuffled per context so the best one sits at a random index.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, replace

import numpy as np

from ..cot import ANSWER_TAG, CoTResponse, format_response, oracle_response
from ..datagen import ANSWERS, MockT2IBackend, UserSample, build_user_sample, derive_seed, load_prompts
from ..profile import ELEMENTS, PreferenceProfile, Vocabulary, load_vocabulary, sample_profile_set
from ..reward import RewardBackends, RewardConfig, total_reward
from ..similarity import MockImageSimilarity, MockTextSimilarity
from .policy import CatalogPolicy, Trajectory

N_TEMPLATES = 8


@dataclass
class SyntheticTask:
    samples: list[UserSample]
    texts: list[list[str]]
    rewards: np.ndarray  # (n_contexts, N_TEMPLATES)

    @property
    def contexts(self) -> list[int]:
        return list(range(len(self.samples)))

    @property
    def best(self) -> np.ndarray:
        return np.argmax(self.rewards, axis=1)

    def policy(self) -> CatalogPolicy:
        return CatalogPolicy(len(self.samples), N_TEMPLATES, self.texts)

    def reward_fn(self, context: int, traj: Trajectory) -> float:
        return float(self.rewards[int(context), int(traj.tokens[0])])

    def converged_fraction(self, policy: CatalogPolicy, threshold: float = 0.95) -> float:
        hits = [policy.probabilities(c)[b] >= threshold for c, b in zip(self.contexts, self.best)]
        return float(np.mean(hits))


def _perturb(p: PreferenceProfile, vocab: Vocabulary, rng: np.random.Generator, n_wrong: int) -> PreferenceProfile:
    wrong = set(rng.choice(len(ELEMENTS), size=n_wrong, replace=False).tolist())
    items = []
    for i, (element, term) in enumerate(p):
        if i in wrong:
            others = [t for t in vocab[element] if t != term]
            term = others[int(rng.integers(len(others)))]
        items.append((element, term))
    return PreferenceProfile(tuple(items))


def _random_profile(vocab: Vocabulary, rng: np.random.Generator) -> PreferenceProfile:
    return PreferenceProfile(tuple((e, vocab[e][int(rng.integers(len(vocab[e])))]) for e in ELEMENTS))


def _with_answer(r: CoTResponse, correct: bool, gt: str) -> CoTResponse:
    first = (gt == ANSWERS[0]) == correct
    scores = tuple((hi, lo) if first else (lo, hi) for hi, lo in (sorted(s, reverse=True) for s in r.scores))
    totals = (sum(s[0] for s in scores), sum(s[1] for s in scores))
    return replace(r, scores=scores, totals=totals, answer=ANSWERS[0] if first else ANSWERS[1])


def _templates(sample: UserSample, vocab: Vocabulary, rng: np.random.Generator) -> list[str]:
    gt = sample.gt_answer
    oracle = oracle_response(sample, int(rng.integers(2**31)))
    pos, neg = sample.profile_set.preferences, sample.profile_set.non_preferences
    oracle_text = format_response(oracle)

    def random_side(n: int) -> tuple[PreferenceProfile, ...]:
        return tuple(_random_profile(vocab, rng) for _ in range(n))

    prose = oracle_text.replace(
        oracle_text[oracle_text.index("<think>") : oracle_text.index("</think>") + len("</think>")],
        "<think>Image 1 looks closer overall to what this user likes.</think>",
    )
    return [
        oracle_text,
        format_response(_with_answer(oracle, False, gt)),
        format_response(replace(
            oracle,
            predicted_preferences=tuple(_perturb(p, vocab, rng, 2) for p in pos),
            predicted_non_preferences=tuple(_perturb(p, vocab, rng, 2) for p in neg),
        )),
        format_response(replace(oracle, predicted_preferences=neg, predicted_non_preferences=pos)),
        format_response(replace(
            oracle, predicted_preferences=random_side(len(pos)), predicted_non_preferences=random_side(len(neg))
        )),
        format_response(_with_answer(replace(
            oracle, predicted_preferences=random_side(len(pos)), predicted_non_preferences=random_side(len(neg))
        ), False, gt)),
        oracle_text.replace(f"</{ANSWER_TAG}>", ""),
        prose,
    ]


def build_synthetic_task(
    n_contexts: int = 64,
    seed: int = 0,
    vocab: Vocabulary | None = None,
    k_refs: int = 3,
    reward_cfg: RewardConfig | None = None,
) -> SyntheticTask:
    vocab = vocab or load_vocabulary()
    reward_cfg = reward_cfg or RewardConfig()
    backend = MockT2IBackend(vocab)
    backends = RewardBackends(backend, MockTextSimilarity(vocab), MockImageSimilarity())
    prompts = load_prompts()
    rng = np.random.default_rng(seed)
    samples, texts = [], []
    rewards = np.zeros((n_contexts, N_TEMPLATES))
    with tempfile.TemporaryDirectory() as tmp:
        for c in range(n_contexts):
            n_profiles = 1 if c % 4 else 2
            ps = sample_profile_set(vocab, derive_seed(seed, c), n_profiles, user_id=f"syn{c:03d}")
            chosen = [prompts[j] for j in rng.choice(len(prompts), size=k_refs + 1, replace=False)]
            sample = build_user_sample(ps, chosen, k_refs, backend, derive_seed(seed, c, 1), tmp)
            entries = _templates(sample, vocab, rng)
            order = rng.permutation(N_TEMPLATES)
            entries = [entries[i] for i in order]
            samples.append(sample)
            texts.append(entries)
            rewards[c] = [total_reward(t, sample, reward_cfg, backends).total for t in entries]
    return SyntheticTask(samples, texts, rewards)
