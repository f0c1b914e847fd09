"""Visual preference profiles: elements, vocabulary and profile sampling.

A profile assigns one vocabulary term to each of five visual elements.
Users carry one to three (preference, non-preference) profile pairs.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

logger = logging.getLogger(__name__)

MAX_PROFILES = 3


class VisualElement(Enum):
    """The five visual elements, declared in canonical order."""

    ART_STYLE = "art style"
    COLOR = "color"
    DETAIL = "detail"
    ART_MEDIUM = "art medium"
    SATURATION = "saturation"

    @property
    def label(self) -> str:
        return self.value

    @property
    def position(self) -> int:
        return ELEMENTS.index(self)

    @classmethod
    def from_name(cls, name: str) -> "VisualElement":
        """Resolve 'art style', 'art_style', 'Art-Style' etc. Raises KeyError."""
        key = re.sub(r"[\s_\-]+", " ", name.strip().lower())
        try:
            return _BY_LABEL[key]
        except KeyError:
            raise KeyError(name) from None


ELEMENTS: tuple[VisualElement, ...] = tuple(VisualElement)
_BY_LABEL = {e.value: e for e in ELEMENTS}


def normalize_term(term: str) -> str:
    return " ".join(term.strip().lower().split())


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    terms: Mapping[VisualElement, tuple[str, ...]]
    source: str = "<memory>"

    def __post_init__(self) -> None:
        for element in ELEMENTS:
            if element not in self.terms:
                raise VocabularyError(f"{self.source}: missing element '{element.label}'")
            items = self.terms[element]
            if len(items) < 2:
                raise VocabularyError(
                    f"{self.source}: element '{element.label}' needs at least 2 terms, got {len(items)}"
                )
            if len(set(items)) != len(items):
                raise VocabularyError(f"{self.source}: duplicate term under '{element.label}'")
            if any(not t for t in items):
                raise VocabularyError(f"{self.source}: empty term under '{element.label}'")

    def __getitem__(self, element: VisualElement) -> tuple[str, ...]:
        return self.terms[element]

    def index(self, element: VisualElement, term: str) -> int:
        """Position of `term` in the element's list; ValueError if absent."""
        return self.terms[element].index(normalize_term(term))

    def contains(self, element: VisualElement, term: str) -> bool:
        return normalize_term(term) in self.terms[element]

    def all_terms(self) -> set[str]:
        return {t for e in ELEMENTS for t in self.terms[e]}

    def digest(self) -> str:
        h = hashlib.sha256()
        for element in ELEMENTS:
            h.update(element.label.encode())
            for term in self.terms[element]:
                h.update(b"\x00" + term.encode())
            h.update(b"\x01")
        return h.hexdigest()[:16]


def load_vocabulary(path: str | Path | None = None) -> Vocabulary:
    """Load a vocabulary file (the bundled seed list when `path` is None).

    Format: `[element name]` section headers, one term per line, `#` comments.
    """
    if path is None:
        text = resources.files("prefassess.data").joinpath("vocabulary.txt").read_text("utf-8")
        source = "<bundled>/vocabulary.txt"
    else:
        p = Path(path)
        if not p.is_file():
            raise VocabularyError(f"{p}: vocabulary file not found")
        text = p.read_text("utf-8")
        source = str(p)

    sections: dict[VisualElement, list[str]] = {}
    current: VisualElement | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            try:
                current = VisualElement.from_name(name)
            except KeyError:
                raise VocabularyError(f"{source}:{lineno}: unknown element '{name}'") from None
            if current in sections:
                raise VocabularyError(f"{source}:{lineno}: element '{name}' declared twice")
            sections[current] = []
            continue
        if current is None:
            raise VocabularyError(f"{source}:{lineno}: term outside of any element section")
        term = normalize_term(line)
        if any(ch in term for ch in ";:\n"):
            raise VocabularyError(f"{source}:{lineno}: term '{term}' contains a reserved character")
        if term in sections[current]:
            raise VocabularyError(
                f"{source}:{lineno}: duplicate term '{term}' under '{current.label}'"
            )
        sections[current].append(term)

    for element in ELEMENTS:
        if element not in sections:
            raise VocabularyError(f"{source}: missing element '{element.label}'")
        if len(sections[element]) < 2:
            raise VocabularyError(
                f"{source}: element '{element.label}' needs at least 2 terms, "
                f"got {len(sections[element])}"
            )
    return Vocabulary({e: tuple(sections[e]) for e in ELEMENTS}, source=source)


@dataclass(frozen=True)
class PreferenceProfile:
    """One term per visual element, stored in canonical element order.

    Sampled profiles cover all five elements. Model predictions may cover
    fewer (`partial`) and may hold out-of-vocabulary terms.
    """

    items: tuple[tuple[VisualElement, str], ...] = ()

    def __post_init__(self) -> None:
        seen = {}
        for element, term in self.items:
            if element in seen:
                raise ValueError(f"element '{element.label}' assigned twice")
            seen[element] = normalize_term(term)
        ordered = tuple((e, seen[e]) for e in ELEMENTS if e in seen)
        object.__setattr__(self, "items", ordered)

    @classmethod
    def of(cls, mapping: Mapping[VisualElement | str, str]) -> "PreferenceProfile":
        items = []
        for key, term in mapping.items():
            element = key if isinstance(key, VisualElement) else VisualElement.from_name(key)
            items.append((element, term))
        return cls(tuple(items))

    @property
    def partial(self) -> bool:
        return len(self.items) < len(ELEMENTS)

    @property
    def elements(self) -> tuple[VisualElement, ...]:
        return tuple(e for e, _ in self.items)

    def get(self, element: VisualElement, default: str | None = None) -> str | None:
        for e, t in self.items:
            if e is element:
                return t
        return default

    def __getitem__(self, element: VisualElement) -> str:
        term = self.get(element)
        if term is None:
            raise KeyError(element)
        return term

    def __contains__(self, element: object) -> bool:
        return any(e is element for e, _ in self.items)

    def __iter__(self) -> Iterator[tuple[VisualElement, str]]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def as_dict(self) -> dict[str, str]:
        return {e.label: t for e, t in self.items}

    def key(self) -> tuple[str, ...]:
        return tuple(t for _, t in self.items)

    def __str__(self) -> str:
        return profile_to_text(self)


@dataclass(frozen=True)
class UserProfileSet:
    preferences: tuple[PreferenceProfile, ...]
    non_preferences: tuple[PreferenceProfile, ...]
    user_id: str
    multi: bool = field(default=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "preferences", tuple(self.preferences))
        object.__setattr__(self, "non_preferences", tuple(self.non_preferences))
        n = len(self.preferences)
        if not 1 <= n <= MAX_PROFILES:
            raise ValueError(f"expected 1..{MAX_PROFILES} preference profiles, got {n}")
        if len(self.non_preferences) != n:
            raise ValueError("preference and non-preference lists differ in length")
        for pref, neg in zip(self.preferences, self.non_preferences):
            if pref.partial or neg.partial:
                raise ValueError("profile sets require full profiles")
            for element in ELEMENTS:
                if pref[element] == neg[element]:
                    raise ValueError(
                        f"preference and non-preference share '{pref[element]}' for {element.label}"
                    )
        if self.multi != (n > 1):
            raise ValueError("multi flag must be set exactly when several profiles exist")
        if len({p.key() for p in self.preferences}) != n:
            raise ValueError("preference profiles must be pairwise distinct")

    def combination_key(self) -> str:
        """Order-insensitive identity of the preference profile combination."""
        keys = sorted("|".join(p.key()) for p in self.preferences)
        return "||".join(keys)


def _draw_pair(vocab: Vocabulary, rng: np.random.Generator) -> tuple[PreferenceProfile, PreferenceProfile]:
    pref, neg = [], []
    for element in ELEMENTS:
        terms = vocab[element]
        i = int(rng.integers(len(terms)))
        # uniform over the remaining terms
        j = int(rng.integers(len(terms) - 1))
        if j >= i:
            j += 1
        pref.append((element, terms[i]))
        neg.append((element, terms[j]))
    return PreferenceProfile(tuple(pref)), PreferenceProfile(tuple(neg))


def sample_profile_set(
    vocab: Vocabulary, rng_seed: int, n_profiles: int = 1, user_id: str | None = None
) -> UserProfileSet:
    """Draw `n_profiles` (preference, non-preference) pairs, deterministic in the seed."""
    if not 1 <= n_profiles <= MAX_PROFILES:
        raise ValueError(f"n_profiles must be in 1..{MAX_PROFILES}, got {n_profiles}")
    n_combos = 1
    for element in ELEMENTS:
        if len(vocab[element]) < 2:
            raise ValueError(f"element '{element.label}' needs at least 2 terms")
        n_combos *= len(vocab[element])
    if n_combos < n_profiles:
        raise ValueError("vocabulary too small for distinct preference profiles")

    rng = np.random.default_rng(rng_seed)
    prefs: list[PreferenceProfile] = []
    negs: list[PreferenceProfile] = []
    attempts = 0
    while len(prefs) < n_profiles:
        attempts += 1
        if attempts > 1000:
            raise ValueError("could not draw distinct preference profiles")
        pref, neg = _draw_pair(vocab, rng)
        if any(pref.key() == p.key() for p in prefs):
            continue
        prefs.append(pref)
        negs.append(neg)
    return UserProfileSet(
        preferences=tuple(prefs),
        non_preferences=tuple(negs),
        user_id=user_id if user_id is not None else f"user-{rng_seed}",
        multi=n_profiles > 1,
    )


def profile_to_text(p: PreferenceProfile) -> str:
    return "; ".join(f"{e.label}: {t}" for e, t in p.items)


_CLAUSE = re.compile(r"^\s*([^:]+?)\s*:\s*(.*?)\s*$", re.S)


def parse_profile_clauses(text: str) -> tuple[PreferenceProfile, int]:
    """Parse 'element: term' clauses; returns the profile and the dropped-clause count.

    Clauses naming unknown elements, repeating an element or lacking a term
    are dropped. Never raises.
    """
    items: dict[VisualElement, str] = {}
    dropped = 0
    for clause in re.split(r"[;\n]", text):
        if not clause.strip():
            continue
        m = _CLAUSE.match(clause)
        if not m:
            dropped += 1
            continue
        name, term = m.group(1), normalize_term(m.group(2))
        try:
            element = VisualElement.from_name(name)
        except KeyError:
            dropped += 1
            continue
        if not term or element in items:
            dropped += 1
            continue
        items[element] = term
    if dropped:
        logger.debug("dropped %d unparseable profile clause(s)", dropped)
    return PreferenceProfile(tuple(items.items())), dropped


def parse_profile_text(text: str) -> PreferenceProfile:
    return parse_profile_clauses(text)[0]


def profiles_equal(a: Iterable[PreferenceProfile], b: Iterable[PreferenceProfile]) -> bool:
    """Multiset equality of profile lists (order-insensitive)."""
    def norm(ps: Iterable[PreferenceProfile]) -> list[tuple[tuple[str, str], ...]]:
        return sorted(tuple((e.label, t) for e, t in p) for p in ps)

    return norm(a) == norm(b)
