"""Predict-then-assess response grammar, annotation prompts and the data filter.

A response carries four blocks, in this order and each exactly once::

    <visual preference profile> ... </visual preference profile>
    <visual non-preference profile> ... </visual non-preference profile>
    <think>
    Dimension: art style | Image 1: 9/10 | Image 2: 3/10
    ... one line per element, canonical order ...
    Total | Image 1: 45/50 | Image 2: 15/50
    </think>
    <answer>Image 1</answer>
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .datagen import ANSWERS, UserSample
from .profile import (
    ELEMENTS,
    PreferenceProfile,
    VisualElement,
    parse_profile_clauses,
    profile_to_text,
)
from .similarity import TextSimilarityFn, profile_agreement

logger = logging.getLogger(__name__)

PREF_TAG = "visual preference profile"
NONPREF_TAG = "visual non-preference profile"
THINK_TAG = "think"
ANSWER_TAG = "answer"
TAGS = (PREF_TAG, NONPREF_TAG, THINK_TAG, ANSWER_TAG)

MAX_SCORE = 10
MAX_TOTAL = MAX_SCORE * len(ELEMENTS)

REJECT_CODES = (
    "PARSE_FAIL",
    "TOTAL_MISMATCH",
    "ANSWER_NOT_ARGMAX",
    "TIE",
    "PROFILE_MISMATCH",
    "WRONG_ANSWER",
)


class ParseError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class CoTResponse:
    predicted_preferences: tuple[PreferenceProfile, ...]
    predicted_non_preferences: tuple[PreferenceProfile, ...]
    scores: tuple[tuple[int, int], ...]  # one (image 1, image 2) pair per element
    totals: tuple[int, int]
    answer: str
    raw_text: str = field(default="", compare=False, repr=False)

    def column_sums(self) -> tuple[int, int]:
        return (sum(s[0] for s in self.scores), sum(s[1] for s in self.scores))

    def argmax_answer(self) -> str | None:
        """Answer implied by the totals; None on a tie."""
        t1, t2 = self.totals
        if t1 == t2:
            return None
        return ANSWERS[0] if t1 > t2 else ANSWERS[1]

    def check(self) -> None:
        """Raise ValueError unless the response is internally consistent."""
        if not self.predicted_preferences or not self.predicted_non_preferences:
            raise ValueError("at least one predicted profile per side is required")
        if len(self.scores) != len(ELEMENTS):
            raise ValueError("expected one score pair per element")
        for pair in self.scores:
            if any(not 0 <= s <= MAX_SCORE for s in pair):
                raise ValueError(f"score out of range: {pair}")
        if self.totals != self.column_sums():
            raise ValueError(f"totals {self.totals} differ from column sums {self.column_sums()}")
        if self.answer not in ANSWERS:
            raise ValueError(f"bad answer {self.answer!r}")
        if self.argmax_answer() != self.answer:
            raise ValueError("answer is not the strict argmax of the totals")


def _profiles_block(profiles: Sequence[PreferenceProfile]) -> str:
    if len(profiles) == 1:
        return profile_to_text(profiles[0])
    return "\n".join(f"{i}. {profile_to_text(p)}" for i, p in enumerate(profiles, start=1))


def dimension_line(element: VisualElement, s1: int, s2: int) -> str:
    return f"Dimension: {element.label} | Image 1: {s1}/{MAX_SCORE} | Image 2: {s2}/{MAX_SCORE}"


def total_line(t1: int, t2: int) -> str:
    return f"Total | Image 1: {t1}/{MAX_TOTAL} | Image 2: {t2}/{MAX_TOTAL}"


def format_response(r: CoTResponse) -> str:
    """Serialize without validating (used for policy samples that may be inconsistent)."""
    think = [dimension_line(e, s1, s2) for e, (s1, s2) in zip(ELEMENTS, r.scores)]
    think.append(total_line(*r.totals))
    return (
        f"<{PREF_TAG}>\n{_profiles_block(r.predicted_preferences)}\n</{PREF_TAG}>\n"
        f"<{NONPREF_TAG}>\n{_profiles_block(r.predicted_non_preferences)}\n</{NONPREF_TAG}>\n"
        f"<{THINK_TAG}>\n" + "\n".join(think) + f"\n</{THINK_TAG}>\n"
        f"<{ANSWER_TAG}>{r.answer}</{ANSWER_TAG}>"
    )


def render_response(r: CoTResponse) -> str:
    r.check()
    return format_response(r)


# --- parsing ---------------------------------------------------------------

_ITEM = re.compile(r"^\s*(\d+)\.\s*(.*)$")
_DIM = re.compile(
    r"^Dimension:\s*(.+?)\s*\|\s*Image 1:\s*(\d+)\s*/\s*10\s*\|\s*Image 2:\s*(\d+)\s*/\s*10\s*$"
)
_TOTAL = re.compile(r"^Total\s*\|\s*Image 1:\s*(\d+)\s*/\s*50\s*\|\s*Image 2:\s*(\d+)\s*/\s*50\s*$")


def _strict_blocks(text: str) -> list[str]:
    positions = []
    for tag in TAGS:
        open_t, close_t = f"<{tag}>", f"</{tag}>"
        n_open, n_close = text.count(open_t), text.count(close_t)
        if n_open == 0 or n_close == 0:
            raise ParseError("MISSING_TAG", f"missing <{tag}> block")
        if n_open > 1 or n_close > 1:
            raise ParseError("DUPLICATE_TAG", f"<{tag}> appears more than once")
        start, end = text.index(open_t), text.index(close_t)
        if end < start:
            raise ParseError("MISORDERED_TAGS", f"</{tag}> precedes <{tag}>")
        positions.append((start, start + len(open_t), end, end + len(close_t)))
    for prev, nxt in zip(positions, positions[1:]):
        if nxt[0] < prev[3]:
            raise ParseError("MISORDERED_TAGS", "blocks are not in canonical order")
    outside = [text[: positions[0][0]]]
    outside += [text[a[3] : b[0]] for a, b in zip(positions, positions[1:])]
    outside.append(text[positions[-1][3] :])
    if any(chunk.strip() for chunk in outside):
        raise ParseError("STRAY_TEXT", "text outside the tagged blocks")
    return [text[p[1] : p[2]] for p in positions]


def _strict_profiles(body: str, tag: str) -> tuple[PreferenceProfile, ...]:
    lines = [ln.strip() for ln in body.strip().splitlines() if ln.strip()]
    if not lines:
        raise ParseError("BAD_PROFILE", f"<{tag}> is empty")
    items = [_ITEM.match(ln) for ln in lines]
    if all(items):
        numbers = [int(m.group(1)) for m in items]  # type: ignore[union-attr]
        if numbers != list(range(1, len(lines) + 1)):
            raise ParseError("BAD_PROFILE", f"<{tag}> list is not numbered 1..n")
        chunks = [m.group(2) for m in items]  # type: ignore[union-attr]
    elif len(lines) == 1:
        chunks = lines
    else:
        raise ParseError("BAD_PROFILE", f"<{tag}> holds several unnumbered lines")
    profiles = []
    for chunk in chunks:
        profile, dropped = parse_profile_clauses(chunk)
        if dropped or not len(profile):
            raise ParseError("BAD_PROFILE", f"unparseable profile clause in <{tag}>: {chunk!r}")
        profiles.append(profile)
    return tuple(profiles)


def _check_score(value: int, limit: int) -> int:
    if not 0 <= value <= limit:
        raise ParseError("BAD_SCORES", f"score {value} outside 0..{limit}")
    return value


def _strict_think(body: str) -> tuple[tuple[tuple[int, int], ...], tuple[int, int]]:
    lines = [ln.strip() for ln in body.strip().splitlines() if ln.strip()]
    if len(lines) != len(ELEMENTS) + 1:
        raise ParseError("BAD_SCORES", f"expected {len(ELEMENTS) + 1} lines in <think>")
    scores = []
    for element, line in zip(ELEMENTS, lines):
        m = _DIM.match(line)
        if not m:
            raise ParseError("BAD_SCORES", f"malformed dimension line: {line!r}")
        try:
            named = VisualElement.from_name(m.group(1))
        except KeyError:
            raise ParseError("BAD_SCORES", f"unknown dimension {m.group(1)!r}") from None
        if named is not element:
            raise ParseError("BAD_SCORES", f"expected dimension {element.label!r}")
        scores.append((_check_score(int(m.group(2)), MAX_SCORE), _check_score(int(m.group(3)), MAX_SCORE)))
    m = _TOTAL.match(lines[-1])
    if not m:
        raise ParseError("BAD_SCORES", f"malformed total line: {lines[-1]!r}")
    totals = (_check_score(int(m.group(1)), MAX_TOTAL), _check_score(int(m.group(2)), MAX_TOTAL))
    return tuple(scores), totals


def _answer(body: str) -> str:
    answer = body.strip()
    if answer not in ANSWERS:
        raise ParseError("BAD_ANSWER", f"answer must be 'Image 1' or 'Image 2', got {answer!r}")
    return answer


_ELEMENT_NAME = r"(?:art[\s_-]?style|color|detail|art[\s_-]?medium|saturation)"
# a term ends at punctuation or at "and <element>:" (terms may contain "and")
_LENIENT_CLAUSE = re.compile(
    rf"({_ELEMENT_NAME})\s*:\s*([^;\n,.]+?)(?=\s*(?:[;\n,.]|\band\s+{_ELEMENT_NAME}\s*:|$))",
    re.I,
)
_FRACTION = re.compile(r"(\d+)\s*/\s*10\b")
_LENIENT_TOTAL = re.compile(r"total[^\n]*?(\d+)\s*/\s*50\b[^\n]*?(\d+)\s*/\s*50\b", re.I)


def _lenient_profiles(body: str) -> tuple[PreferenceProfile, ...]:
    lines = [ln for ln in body.splitlines() if ln.strip()]
    numbered = [ln for ln in lines if _ITEM.match(ln)]
    chunks = [_ITEM.match(ln).group(2) for ln in numbered] if numbered else [body]  # type: ignore[union-attr]
    profiles = []
    for chunk in chunks:
        items: dict[VisualElement, str] = {}
        for m in _LENIENT_CLAUSE.finditer(chunk):
            element = VisualElement.from_name(m.group(1))
            items.setdefault(element, m.group(2).strip())
        if items:
            profiles.append(PreferenceProfile(tuple(items.items())))
    return tuple(profiles)


def _lenient_think(body: str) -> tuple[tuple[tuple[int, int], ...], tuple[int, int]]:
    scores = []
    for element in ELEMENTS:
        name = r"[\s_-]?".join(re.escape(w) for w in element.label.split())
        found = None
        for m in re.finditer(rf"\b{name}\b", body, re.I):
            fractions = _FRACTION.findall(body, m.end())
            if len(fractions) >= 2:
                found = (int(fractions[0]), int(fractions[1]))
                break
        if found is None:
            raise ParseError("BAD_SCORES", f"no scores found for {element.label!r}")
        scores.append((_check_score(found[0], MAX_SCORE), _check_score(found[1], MAX_SCORE)))
    m = _LENIENT_TOTAL.search(body)
    if m:
        totals = (int(m.group(1)), int(m.group(2)))
    else:
        totals = (sum(s[0] for s in scores), sum(s[1] for s in scores))
    return tuple(scores), totals


def parse_response(text: str, mode: str = "strict") -> CoTResponse:
    """Parse a response; raises ParseError with a code on failure.

    Strict mode enforces the canonical grammar. Lenient mode accepts prose
    inside the blocks and pulls scores from `n/10` patterns after each
    element name.
    """
    if mode == "strict":
        pref, nonpref, think, answer = _strict_blocks(text)
        prefs = _strict_profiles(pref, PREF_TAG)
        negs = _strict_profiles(nonpref, NONPREF_TAG)
        scores, totals = _strict_think(think)
    elif mode == "lenient":
        bodies = []
        for tag in TAGS:
            m = re.search(rf"<{re.escape(tag)}>(.*?)</{re.escape(tag)}>", text, re.S)
            if not m:
                raise ParseError("MISSING_TAG", f"missing <{tag}> block")
            bodies.append(m.group(1))
        pref, nonpref, think, answer = bodies
        prefs = _lenient_profiles(pref)
        negs = _lenient_profiles(nonpref)
        scores, totals = _lenient_think(think)
    else:
        raise ValueError(f"unknown parse mode {mode!r}")
    return CoTResponse(prefs, negs, scores, totals, _answer(answer), raw_text=text)


def try_parse(text: str, mode: str = "strict") -> CoTResponse | None:
    try:
        return parse_response(text, mode)
    except ParseError:
        return None


# --- annotation ------------------------------------------------------------

_SYSTEM = (
    "You are an expert in personalized image assessment. A user has shown you "
    "reference images they like and images they dislike. First infer the user's "
    "visual preference profile and non-preference profile over five elements "
    "(art style, color, detail, art medium, saturation). Then score both candidate "
    "images on each element from 0 to 10 against the inferred profile, add the "
    "scores, and pick the candidate with the higher total."
)

_MULTI_NOTE = (
    "This user holds several distinct preference profiles. List every profile as a "
    "numbered item, and score each element against whichever preference profile "
    "the candidate matches best."
)


def build_annotation_prompt(sample: UserSample) -> str:
    """Deterministic annotation request carrying the ground-truth meta information."""
    ps = sample.profile_set
    lines = [_SYSTEM]
    if ps.multi:
        lines += ["", _MULTI_NOTE]
    lines += [
        "",
        f"Reference images: {sample.k_refs} preferred, {sample.k_refs} non-preferred.",
        "Candidate images: Image 1 and Image 2.",
        "",
        "Meta information (do not mention that it was given):",
        f"Question prompt: {sample.initial_prompts[-1]}",
    ]
    if ps.multi:
        lines.append("Visual preference profiles:")
        lines += [f"  {i}. {profile_to_text(p)}" for i, p in enumerate(ps.preferences, start=1)]
        lines.append("Visual non-preference profiles:")
        lines += [f"  {i}. {profile_to_text(p)}" for i, p in enumerate(ps.non_preferences, start=1)]
    else:
        lines.append(f"Visual preference profile: {profile_to_text(ps.preferences[0])}")
        lines.append(f"Visual non-preference profile: {profile_to_text(ps.non_preferences[0])}")
    lines += [
        f"Correct answer: {sample.gt_answer}",
        "",
        "Respond exactly in this format:",
        f"<{PREF_TAG}>",
        "art style: ...; color: ...; detail: ...; art medium: ...; saturation: ...",
        f"</{PREF_TAG}>",
        f"<{NONPREF_TAG}>",
        "art style: ...; color: ...; detail: ...; art medium: ...; saturation: ...",
        f"</{NONPREF_TAG}>",
        f"<{THINK_TAG}>",
        *[dimension_line(e, 0, 0).replace("0/10", "<s>/10") for e in ELEMENTS],
        total_line(0, 0).replace("0/50", "<t>/50"),
        f"</{THINK_TAG}>",
        f"<{ANSWER_TAG}>Image 1 or Image 2</{ANSWER_TAG}>",
    ]
    return "\n".join(lines)


def oracle_response(sample: UserSample, rng_seed: int) -> CoTResponse:
    """Ground-truth profiles, gt candidate scored 7..10 and the other 1..4 on every element."""
    rng = np.random.default_rng(rng_seed)
    ps = sample.profile_set
    gt_first = sample.gt_answer == ANSWERS[0]
    scores = []
    for element in ELEMENTS:
        hi, lo = int(rng.integers(7, 11)), int(rng.integers(1, 5))
        # sampled pairs always differ on every element, so the gt candidate wins each one
        scores.append((hi, lo) if gt_first else (lo, hi))
    r = CoTResponse(
        predicted_preferences=ps.preferences,
        predicted_non_preferences=ps.non_preferences,
        scores=tuple(scores),
        totals=(sum(s[0] for s in scores), sum(s[1] for s in scores)),
        answer=sample.gt_answer,
    )
    r.check()
    return r


def oracle_annotate(sample: UserSample, rng_seed: int) -> str:
    return render_response(oracle_response(sample, rng_seed))


class AnnotatorClient(Protocol):
    def annotate(self, sample: UserSample, prompt_text: str) -> str: ...


class TransientAnnotatorError(RuntimeError):
    """Raised by clients for failures worth retrying (rate limits, timeouts)."""


class OracleAnnotator:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def annotate(self, sample: UserSample, prompt_text: str) -> str:
        digest = hashlib.sha256(f"{self.seed}:{sample.user_id}".encode()).digest()
        return oracle_annotate(sample, int.from_bytes(digest[:8], "little"))


class RemoteAnnotator:
    """Adapter stub for a hosted multimodal annotator; reads ANNOTATOR_API_KEY."""

    def __init__(self, model: str, api_key: str | None = None):
        import os

        self.model = model
        self.api_key = api_key or os.environ.get("ANNOTATOR_API_KEY")

    def annotate(self, sample: UserSample, prompt_text: str) -> str:
        if not self.api_key:
            raise RuntimeError("ANNOTATOR_API_KEY is not set")
        raise NotImplementedError(f"no client wired for annotator model {self.model!r}")


def annotate_samples(
    samples: Sequence[UserSample],
    client: AnnotatorClient,
    jobs: int = 4,
    max_retries: int = 4,
    backoff: float = 0.5,
) -> list[str]:
    """Annotate every sample with bounded concurrency; output order follows input order."""

    def one(sample: UserSample) -> str:
        prompt = build_annotation_prompt(sample)
        for attempt in range(max_retries + 1):
            try:
                return client.annotate(sample, prompt)
            except TransientAnnotatorError:
                if attempt == max_retries:
                    raise
                delay = backoff * 2**attempt
                time.sleep(delay * (0.5 + random.random() / 2))
        raise AssertionError("unreachable")

    if jobs <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, samples))


# --- filtering -------------------------------------------------------------


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reasons: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.accepted != (not self.reasons):
            raise ValueError("accepted must hold exactly when there are no reasons")


def filter_response(
    resp_text: str, sample: UserSample, sim: TextSimilarityFn, tau: float = 1.0
) -> FilterVerdict:
    """Accept only consistent, correct responses whose profiles match the ground truth."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    r = try_parse(resp_text, "strict")
    if r is None:
        return FilterVerdict(False, ("PARSE_FAIL",))
    reasons = []
    if r.totals != r.column_sums():
        reasons.append("TOTAL_MISMATCH")
    implied = r.argmax_answer()
    if implied is None:
        reasons.append("TIE")
    elif implied != r.answer:
        reasons.append("ANSWER_NOT_ARGMAX")
    ps = sample.profile_set
    agreement = 0.5 * (
        profile_agreement(r.predicted_preferences, ps.preferences, sim)
        + profile_agreement(r.predicted_non_preferences, ps.non_preferences, sim)
    )
    if agreement < tau:
        reasons.append("PROFILE_MISMATCH")
    if r.answer != sample.gt_answer:
        reasons.append("WRONG_ANSWER")
    return FilterVerdict(not reasons, tuple(reasons))


def prompt_hash(prompt_text: str) -> str:
    return hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()[:16]


def write_annotations(
    path: str | Path,
    samples: Sequence[UserSample],
    responses: Sequence[str],
    verdicts: Iterable[FilterVerdict | None] | None = None,
) -> None:
    verdicts = list(verdicts) if verdicts is not None else [None] * len(samples)
    with open(path, "w", encoding="utf-8") as f:
        for sample, text, verdict in zip(samples, responses, verdicts):
            row = {
                "user_id": sample.user_id,
                "prompt_text_hash": prompt_hash(build_annotation_prompt(sample)),
                "response_text": text,
                "verdict": "pending" if verdict is None else ("accepted" if verdict.accepted else "rejected"),
                "reasons": [] if verdict is None else list(verdict.reasons),
            }
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_annotations(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
