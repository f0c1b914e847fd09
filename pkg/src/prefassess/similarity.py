"""Text and image similarity functions used by the filter, reward and metrics."""

from __future__ import annotations

import re
from functools import lru_cache
from typing import Callable, Protocol, Sequence, TypeVar

from .datagen import RenderedImage
from .profile import ELEMENTS, PreferenceProfile, Vocabulary, normalize_term

T = TypeVar("T")


class TextSimilarityFn(Protocol):
    def __call__(self, a: str, b: str) -> float: ...


class ImageSimilarityFn(Protocol):
    def __call__(self, a: RenderedImage, b: RenderedImage) -> float: ...


class MockTextSimilarity:
    """Jaccard overlap of the vocabulary terms found in each text.

    Two texts without any vocabulary term are similar only if they are
    identical after whitespace/case normalization.
    """

    def __init__(self, vocab: Vocabulary):
        terms = sorted(vocab.all_terms(), key=len, reverse=True)
        alt = "|".join(re.escape(t) for t in terms)
        self._pattern = re.compile(rf"(?<![\w-])({alt})(?![\w-])", re.I)
        self.terms = lru_cache(maxsize=65536)(self._terms)

    def _terms(self, text: str) -> frozenset[str]:
        return frozenset(m.group(1).lower() for m in self._pattern.finditer(text))

    def __call__(self, a: str, b: str) -> float:
        ta, tb = self.terms(a), self.terms(b)
        if not ta and not tb:
            return 1.0 if normalize_term(a) == normalize_term(b) else 0.0
        return len(ta & tb) / len(ta | tb)


class MockImageSimilarity:
    """Fraction of the five stripes whose decoded term index agrees."""

    def __call__(self, a: RenderedImage, b: RenderedImage) -> float:
        da, db = a.stripe_codes, b.stripe_codes
        return sum(x == y for x, y in zip(da, db)) / len(ELEMENTS)


class SentenceEmbeddingSimilarity:
    """Adapter for a sentence-embedding model (cosine similarity clipped to [0, 1]).

    The model is loaded lazily on first use; nothing in the test suite
    downloads weights.
    """

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        self.model_name = model_name
        self._model = None

    def __call__(self, a: str, b: str) -> float:
        if self._model is None:
            from sentence_transformers import SentenceTransformer

            self._model = SentenceTransformer(self.model_name)
        ea, eb = self._model.encode([a, b], normalize_embeddings=True)
        return float(min(1.0, max(0.0, float(ea @ eb))))


def greedy_match(
    pred: Sequence[T], gt: Sequence[T], score: Callable[[T, T], float]
) -> list[tuple[int, int, float]]:
    """Pair predictions with ground truth, best-scoring pair first.

    Ties break toward the lowest (pred, gt) index so matching is deterministic.
    """
    cells = sorted(
        ((score(p, g), i, j) for i, p in enumerate(pred) for j, g in enumerate(gt)),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for s, i, j in cells:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, s))
    return pairs


def matched_mean(
    pred: Sequence[T], gt: Sequence[T], score: Callable[[T, T], float]
) -> float:
    """Greedy-matched similarity averaged over max(len(pred), len(gt)).

    Unmatched profiles on either side contribute 0, which keeps the value
    symmetric and stops over-prediction from earning credit.
    """
    if not gt:
        raise ValueError("ground-truth list is empty")
    denom = max(len(pred), len(gt))
    return sum(s for _, _, s in greedy_match(pred, gt, score)) / denom


def element_scores(
    pred: PreferenceProfile,
    gt: PreferenceProfile,
    term_sim: TextSimilarityFn,
    threshold: float | None = None,
) -> list[float]:
    """Per ground-truth element similarity of the predicted term (0 if missing)."""
    out = []
    for element, term in gt:
        guess = pred.get(element)
        if guess is None:
            out.append(0.0)
            continue
        s = term_sim(guess, term)
        out.append(float(s >= threshold) if threshold is not None else s)
    return out


def profile_agreement(
    pred: Sequence[PreferenceProfile],
    gt: Sequence[PreferenceProfile],
    term_sim: TextSimilarityFn,
    threshold: float | None = None,
) -> float:
    """Mean per-element agreement after greedy profile pairing."""

    def score(p: PreferenceProfile, g: PreferenceProfile) -> float:
        vals = element_scores(p, g, term_sim, threshold)
        return sum(vals) / len(vals) if vals else 0.0

    return matched_mean(pred, gt, score)
