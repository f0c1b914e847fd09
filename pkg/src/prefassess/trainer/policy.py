"""Desk-scale policies with exact, hand-differentiable log-probabilities.

Both policies are log-linear: at every decoding step the logits over the
allowed tokens are `F @ theta`, where the feature matrix F depends only on
the context and the prefix. Caching F at sampling time makes re-scoring a
trajectory under any parameter vector (current, old, reference) cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..cot import CoTResponse, NONPREF_TAG, PREF_TAG, THINK_TAG, format_response, parse_response
from ..datagen import ANSWERS, UserSample, decode_stripes, load_image
from ..profile import ELEMENTS, PreferenceProfile, Vocabulary

GREEDY_T = 1e-6


def log_softmax(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    out = z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    if mask is not None:
        out = np.where(mask, out, -np.inf)
    return out


@dataclass
class Step:
    """One decoding step: allowed token ids and their feature rows."""

    options: np.ndarray  # (n,) int token ids
    features: np.ndarray  # (n, n_params)


@dataclass
class Trajectory:
    context: Any
    tokens: np.ndarray  # (n_steps,)
    feats: np.ndarray  # (n_steps, max_options, n_params), zero padded
    mask: np.ndarray  # (n_steps, max_options)
    choice: np.ndarray  # (n_steps,) index of the chosen option
    logprobs: np.ndarray  # (n_steps,) under the sampling policy
    temperature: float
    truncated: bool = False
    text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


def stack_steps(steps: Sequence[Step], chosen: Sequence[int], n_params: int) -> tuple[np.ndarray, ...]:
    width = max((len(s.options) for s in steps), default=1)
    feats = np.zeros((len(steps), width, n_params))
    mask = np.zeros((len(steps), width), dtype=bool)
    choice = np.zeros(len(steps), dtype=np.int64)
    tokens = np.zeros(len(steps), dtype=np.int64)
    for t, (step, tok) in enumerate(zip(steps, chosen)):
        n = len(step.options)
        feats[t, :n] = step.features
        mask[t, :n] = True
        hit = np.flatnonzero(step.options == tok)
        if len(hit) != 1:
            raise ValueError(f"token {tok} not allowed at step {t}")
        choice[t] = hit[0]
        tokens[t] = tok
    return tokens, feats, mask, choice


def step_logprobs(theta: np.ndarray, traj: Trajectory, temperature: float | None = None) -> np.ndarray:
    """Log-probabilities of every option at every step, shape (n_steps, max_options)."""
    t = traj.temperature if temperature is None else temperature
    if len(traj) == 0:
        return np.zeros((0, 1))
    z = traj.feats @ theta
    if t <= GREEDY_T:
        best = np.argmax(np.where(traj.mask, z, -np.inf), axis=-1)
        out = np.full(z.shape, -np.inf)
        out[np.arange(len(best)), best] = 0.0
        return out
    return log_softmax(z / t, traj.mask)


def chosen_logprobs(theta: np.ndarray, traj: Trajectory, temperature: float | None = None) -> np.ndarray:
    lp = step_logprobs(theta, traj, temperature)
    return lp[np.arange(len(traj)), traj.choice]


def chosen_logprob_grads(theta: np.ndarray, traj: Trajectory, temperature: float | None = None) -> np.ndarray:
    """Per-step gradient of the chosen token's log-probability, shape (n_steps, n_params)."""
    t = traj.temperature if temperature is None else temperature
    if t <= GREEDY_T:
        raise ValueError("log-probabilities are not differentiable in the greedy limit")
    p = np.exp(step_logprobs(theta, traj, t))
    expected = np.einsum("so,sod->sd", p, traj.feats)
    picked = traj.feats[np.arange(len(traj)), traj.choice]
    return (picked - expected) / t


class LogLinearPolicy:
    """Shared sampling and scoring for policies whose step logits are F @ theta."""

    frozen: bool = False

    def __init__(self, n_params: int):
        self._theta = np.zeros(n_params)

    @property
    def parameters(self) -> np.ndarray:
        return self._theta.copy()

    @parameters.setter
    def parameters(self, value: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("reference policy is frozen")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._theta.shape:
            raise ValueError(f"expected {self._theta.shape} parameters, got {value.shape}")
        self._theta = value.copy()

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @property
    def n_params(self) -> int:
        return self._theta.size

    def clone_frozen(self) -> "LogLinearPolicy":
        twin = self.clone()
        twin.frozen = True
        return twin

    def clone(self) -> "LogLinearPolicy":
        import copy

        twin = copy.copy(self)
        twin._theta = self._theta.copy()
        twin.frozen = False
        return twin

    # subclasses implement these two
    def next_step(self, context: Any, prefix: Sequence[int]) -> Step | None:
        raise NotImplementedError

    def detokenize(self, context: Any, tokens: Sequence[int], truncated: bool) -> str:
        raise NotImplementedError

    def is_complete(self, context: Any, tokens: Sequence[int]) -> bool:
        """True when `tokens` is a whole response (not cut short)."""
        return self.next_step(context, tokens) is None

    def signature(self) -> tuple:
        """Identifies the token space; policies with equal signatures are comparable."""
        return (type(self).__name__, self.n_params)

    def steps_for(self, context: Any, tokens: Sequence[int]) -> list[Step]:
        steps = []
        for t in range(len(tokens)):
            step = self.next_step(context, tokens[:t])
            if step is None:
                raise ValueError("sequence continues past the end of the grammar")
            steps.append(step)
        return steps

    def trajectory(self, context: Any, tokens: Sequence[int], temperature: float = 1.0) -> Trajectory:
        tokens = [int(t) for t in tokens]
        steps = self.steps_for(context, tokens)
        tok, feats, mask, choice = stack_steps(steps, tokens, self.n_params)
        traj = Trajectory(context, tok, feats, mask, choice, np.zeros(len(tok)), temperature)
        traj.logprobs = chosen_logprobs(self._theta, traj)
        traj.truncated = not self.is_complete(context, tokens)
        traj.text = self.detokenize(context, tokens, traj.truncated)
        return traj

    def generate(
        self, context: Any, temperature: float, max_len: int, rng: np.random.Generator
    ) -> Trajectory:
        tokens: list[int] = []
        steps: list[Step] = []
        logps: list[float] = []
        truncated = False
        while True:
            step = self.next_step(context, tokens)
            if step is None:
                break
            if len(tokens) >= max_len:
                truncated = True
                break
            z = step.features @ self._theta
            if temperature <= GREEDY_T:
                k, lp = int(np.argmax(z)), 0.0
            else:
                z = z / temperature
                z -= z.max()
                cdf = np.cumsum(np.exp(z))
                k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(z) - 1)
                lp = float(z[k] - np.log(cdf[-1]))
            steps.append(step)
            tokens.append(int(step.options[k]))
            logps.append(lp)
        tok, feats, mask, choice = stack_steps(steps, tokens, self.n_params)
        traj = Trajectory(context, tok, feats, mask, choice, np.array(logps), temperature)
        truncated = truncated or not self.is_complete(context, tokens)
        traj.truncated = truncated
        traj.text = self.detokenize(context, tokens, truncated)
        return traj

    def logprobs(self, context: Any, tokens: Sequence[int], temperature: float = 1.0) -> np.ndarray:
        return self.trajectory(context, tokens, temperature).logprobs


class CatalogPolicy(LogLinearPolicy):
    """Independent logits over a fixed catalog of responses for each context.

    A trajectory is a single token: the index of the chosen catalog entry.
    """

    def __init__(self, n_contexts: int, n_entries: int, texts: Sequence[Sequence[str]] | None = None):
        super().__init__(n_contexts * n_entries)
        self.n_contexts = n_contexts
        self.n_entries = n_entries
        self.texts = texts

    def signature(self) -> tuple:
        return ("catalog", self.n_contexts, self.n_entries)

    def next_step(self, context: int, prefix: Sequence[int]) -> Step | None:
        if prefix:
            return None
        feats = np.zeros((self.n_entries, self.n_params))
        base = int(context) * self.n_entries
        feats[np.arange(self.n_entries), base + np.arange(self.n_entries)] = 1.0
        return Step(np.arange(self.n_entries), feats)

    def detokenize(self, context: int, tokens: Sequence[int], truncated: bool) -> str:
        if not tokens or self.texts is None:
            return ""
        return self.texts[int(context)][int(tokens[0])]

    def logits(self, context: int) -> np.ndarray:
        return self._theta.reshape(self.n_contexts, self.n_entries)[int(context)].copy()

    def probabilities(self, context: int, temperature: float = 1.0) -> np.ndarray:
        return np.exp(log_softmax(self.logits(context) / temperature))


# --- TinyLM over the CoT grammar -------------------------------------------


@dataclass(frozen=True)
class SampleView:
    """What the policy observes: decoded stripe codes of the visible images."""

    sample: UserSample = field(compare=False, repr=False)
    preferred: tuple[tuple[int | None, ...], ...]
    non_preferred: tuple[tuple[int | None, ...], ...]
    candidates: tuple[tuple[int | None, ...], tuple[int | None, ...]]

    @classmethod
    def from_sample(cls, sample: UserSample, root: str | Path) -> "SampleView":
        def codes(ref):
            return decode_stripes(load_image(root, ref))

        return cls(
            sample=sample,
            preferred=tuple(codes(r) for r in sample.preferred_refs),
            non_preferred=tuple(codes(r) for r in sample.non_preferred_refs),
            candidates=(codes(sample.candidate_1), codes(sample.candidate_2)),
        )

    def truncate(self, k: int) -> "SampleView":
        if not 1 <= k <= len(self.preferred):
            raise ValueError(f"k must be in 1..{len(self.preferred)}, got {k}")
        return SampleView(self.sample, self.preferred[:k], self.non_preferred[:k], self.candidates)


@dataclass
class _Layout:
    count_match: int = 0
    count_bias: slice = slice(1, 4)
    term_pos: slice = slice(4, 7)  # anchor, own-side histogram, other-side histogram
    term_neg: slice = slice(7, 10)
    score: slice = slice(10, 43)  # 11 scores x (bias, matches preference, matches non-preference)
    answer_total: int = 43
    answer_bias: int = 44
    eos: int = 45
    size: int = 46


class TinyLMPolicy(LogLinearPolicy):
    """Autoregressive model over a compact symbol vocabulary covering the response grammar.

    Token order: profile count, preference terms (count x 5), non-preference
    terms (count x 5), per-element scores for Image 1 and Image 2, answer.
    Every step may also emit end-of-sequence, which truncates the response.
    """

    layout = _Layout()

    def __init__(self, vocab: Vocabulary, eos_bias: float = -3.0):
        super().__init__(self.layout.size)
        self.vocab = vocab
        self._theta[self.layout.eos] = eos_bias
        self.symbols: list[str] = ["<eos>", "n=1", "n=2", "n=3"]
        self.term_ids: dict[tuple[int, int], int] = {}
        for ei, element in enumerate(ELEMENTS):
            for ti, term in enumerate(vocab[element]):
                self.term_ids[(ei, ti)] = len(self.symbols)
                self.symbols.append(f"{element.label}={term}")
        self.score_base = len(self.symbols)
        self.symbols += [f"s={s}" for s in range(11)]
        self.answer_base = len(self.symbols)
        self.symbols += list(ANSWERS)
        self._term_of = {tok: key for key, tok in self.term_ids.items()}

    EOS = 0

    def signature(self) -> tuple:
        return ("tinylm", self.vocab.digest(), self.n_params)

    def is_complete(self, context: Any, tokens: Sequence[int]) -> bool:
        return bool(tokens) and tokens[-1] != self.EOS and self._slot(tokens) is None

    @staticmethod
    def length_for(n: int) -> int:
        return 1 + 10 * n + 2 * len(ELEMENTS) + 1

    def _slot(self, prefix: Sequence[int]) -> tuple[str, tuple] | None:
        if prefix and prefix[-1] == self.EOS:
            return None
        t = len(prefix)
        if t == 0:
            return ("count", ())
        n = prefix[0]
        t -= 1
        if t < 5 * n:
            return ("term", (0, t // 5, t % 5))
        t -= 5 * n
        if t < 5 * n:
            return ("term", (1, t // 5, t % 5))
        t -= 5 * n
        if t < 2 * len(ELEMENTS):
            return ("score", (t // 2, t % 2))
        t -= 2 * len(ELEMENTS)
        if t == 0:
            return ("answer", ())
        return None

    def _predicted(self, prefix: Sequence[int], side: int, element: int) -> set[int]:
        n = prefix[0]
        start = 1 + side * 5 * n
        out = set()
        for p in range(n):
            pos = start + 5 * p + element
            if pos < len(prefix):
                out.add(self._term_of[prefix[pos]][1])
        return out

    def next_step(self, ctx: SampleView, prefix: Sequence[int]) -> Step | None:
        slot = self._slot(prefix)
        if slot is None:
            return None
        L = self.layout
        kind, args = slot
        if kind == "count":
            options = np.array([1, 2, 3])
            feats = np.zeros((3, self.n_params))
            distinct = min(len(set(ctx.preferred)), 3)
            for i, n in enumerate(options):
                feats[i, L.count_match] = float(n == distinct)
                feats[i, L.count_bias.start + i] = 1.0
        elif kind == "term":
            side, p, e = args
            own, other = (ctx.preferred, ctx.non_preferred) if side == 0 else (ctx.non_preferred, ctx.preferred)
            block = L.term_pos if side == 0 else L.term_neg
            n_terms = len(self.vocab[ELEMENTS[e]])
            options = np.array([self.term_ids[(e, j)] for j in range(n_terms)])
            feats = np.zeros((n_terms, self.n_params))
            anchor = own[p % len(own)][e]
            own_col = [c[e] for c in own]
            other_col = [c[e] for c in other]
            for j in range(n_terms):
                feats[j, block.start] = float(anchor == j)
                feats[j, block.start + 1] = own_col.count(j) / len(own_col)
                feats[j, block.start + 2] = other_col.count(j) / len(other_col)
        elif kind == "score":
            e, c = args
            code = ctx.candidates[c][e]
            m_pos = float(code is not None and code in self._predicted(prefix, 0, e))
            m_neg = float(code is not None and code in self._predicted(prefix, 1, e))
            options = self.score_base + np.arange(11)
            feats = np.zeros((11, self.n_params))
            for s in range(11):
                base = L.score.start + 3 * s
                feats[s, base : base + 3] = (1.0, m_pos, m_neg)
        else:
            totals = self._totals(prefix)
            options = self.answer_base + np.arange(2)
            feats = np.zeros((2, self.n_params))
            feats[0, L.answer_total] = totals[0] / 10
            feats[1, L.answer_total] = totals[1] / 10
            feats[0, L.answer_bias] = 1.0
        eos = np.zeros((1, self.n_params))
        eos[0, L.eos] = 1.0
        return Step(np.concatenate([options, [self.EOS]]), np.vstack([feats, eos]))

    def _totals(self, prefix: Sequence[int]) -> tuple[int, int]:
        n = prefix[0]
        start = 1 + 10 * n
        vals = [tok - self.score_base for tok in prefix[start : start + 2 * len(ELEMENTS)]]
        return (sum(vals[0::2]), sum(vals[1::2]))

    # --- text <-> tokens ---------------------------------------------------

    def _profiles(self, tokens: Sequence[int], side: int, n: int) -> list[PreferenceProfile]:
        out = []
        start = 1 + side * 5 * n
        for p in range(n):
            items = []
            for e in range(len(ELEMENTS)):
                pos = start + 5 * p + e
                if pos >= len(tokens) or tokens[pos] == self.EOS:
                    break
                ei, ti = self._term_of[tokens[pos]]
                items.append((ELEMENTS[ei], self.vocab[ELEMENTS[ei]][ti]))
            if items:
                out.append(PreferenceProfile(tuple(items)))
        return out

    def detokenize(self, ctx: Any, tokens: Sequence[int], truncated: bool) -> str:
        tokens = list(tokens)
        if not truncated:
            n = tokens[0]
            scores = tuple(
                (tokens[1 + 10 * n + 2 * e] - self.score_base, tokens[2 + 10 * n + 2 * e] - self.score_base)
                for e in range(len(ELEMENTS))
            )
            r = CoTResponse(
                predicted_preferences=tuple(self._profiles(tokens, 0, n)),
                predicted_non_preferences=tuple(self._profiles(tokens, 1, n)),
                scores=scores,
                totals=(sum(s[0] for s in scores), sum(s[1] for s in scores)),
                answer=ANSWERS[tokens[-1] - self.answer_base],
            )
            return format_response(r)
        # truncated: emit the blocks reached so far and leave the last one open
        if not tokens or tokens[0] == self.EOS:
            return ""
        n = tokens[0]
        body = [f"<{PREF_TAG}>"]
        body += [str(p) for p in self._profiles(tokens, 0, n)]
        if len(tokens) > 1 + 5 * n:
            body += [f"</{PREF_TAG}>", f"<{NONPREF_TAG}>"]
            body += [str(p) for p in self._profiles(tokens, 1, n)]
        if len(tokens) > 1 + 10 * n:
            body += [f"</{NONPREF_TAG}>", f"<{THINK_TAG}>"]
        return "\n".join(body)

    def tokenize(self, text: str) -> list[int]:
        """Token ids for a strict-grammar response; ValueError if it is not representable."""
        r = parse_response(text, "strict")
        n = len(r.predicted_preferences)
        if len(r.predicted_non_preferences) != n or not 1 <= n <= 3:
            raise ValueError("need 1..3 preference profiles and as many non-preference profiles")
        if r.totals != r.column_sums():
            raise ValueError("totals must equal the score column sums")
        tokens = [n]
        for profiles in (r.predicted_preferences, r.predicted_non_preferences):
            for p in profiles:
                if p.partial:
                    raise ValueError("partial profiles are not representable")
                for ei, element in enumerate(ELEMENTS):
                    term = p[element]
                    if not self.vocab.contains(element, term):
                        raise ValueError(f"out-of-vocabulary term {term!r} for {element.label}")
                    tokens.append(self.term_ids[(ei, self.vocab.index(element, term))])
        for s1, s2 in r.scores:
            tokens += [self.score_base + s1, self.score_base + s2]
        tokens.append(self.answer_base + ANSWERS.index(r.answer))
        return tokens
