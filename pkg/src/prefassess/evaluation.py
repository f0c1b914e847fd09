"""Benchmark harness: assessment accuracy, profile-prediction accuracy, sweeps and reports.

All accuracies are exact fractions; floats appear only when reports are written.
"""

from __future__ import annotations

import csv
import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .cot import CoTResponse, format_response, oracle_annotate, try_parse
from .datagen import ANSWERS, SPLITS, T2IBackend, UserSample, generate_dataset, load_dataset
from .profile import ELEMENTS, PreferenceProfile, UserProfileSet, Vocabulary
from .similarity import TextSimilarityFn, greedy_match

OVERALL = "overall"


@dataclass(frozen=True)
class BenchmarkSpec:
    split_sizes: dict[str, int] = field(
        default_factory=lambda: {"seen-SP": 50, "seen-MP": 25, "unseen-SP": 50, "unseen-MP": 25}
    )
    k_refs: int = 5
    seed: int = 1000

    def __post_init__(self) -> None:
        unknown = set(self.split_sizes) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits {sorted(unknown)}")
        if any(self.split_sizes.get(s, 0) < 1 for s in SPLITS):
            raise ValueError("every split needs at least one sample")
        if self.k_refs < 1:
            raise ValueError("k_refs must be >= 1")


def build_benchmark(
    spec: BenchmarkSpec,
    vocab: Vocabulary,
    backend: T2IBackend,
    out_dir: str | Path,
    seen_pool: Sequence[UserProfileSet] | None = None,
    jobs: int = 1,
) -> list[UserSample]:
    """Fresh users; seen users reuse training profile combinations when a pool is given."""
    generate_dataset(
        vocab, sum(spec.split_sizes.values()), 0.0, spec.k_refs, backend, spec.seed, out_dir,
        jobs=jobs, split_sizes=dict(spec.split_sizes), seen_pool=seen_pool,
    )
    return load_dataset(Path(out_dir) / "dataset.jsonl")


# --- assessors -------------------------------------------------------------


class Assessor(Protocol):
    def assess(self, sample: UserSample, k_visible: int) -> str: ...


def _sample_seed(seed: int, user_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{user_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class OracleAssessor:
    """Reads the ground truth; an upper bound."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def assess(self, sample: UserSample, k_visible: int) -> str:
        return oracle_annotate(sample, _sample_seed(self.seed, sample.user_id))


class RandomAssessor:
    """Well-formed response with random profiles and a coin-flip answer; a lower bound."""

    def __init__(self, vocab: Vocabulary, seed: int = 0):
        self.vocab = vocab
        self.seed = seed

    def assess(self, sample: UserSample, k_visible: int) -> str:
        rng = np.random.default_rng(_sample_seed(self.seed, sample.user_id))

        def profile() -> PreferenceProfile:
            return PreferenceProfile(
                tuple((e, self.vocab[e][int(rng.integers(len(self.vocab[e])))]) for e in ELEMENTS)
            )

        first = bool(rng.integers(2))
        scores = []
        for _ in ELEMENTS:
            hi, lo = int(rng.integers(6, 11)), int(rng.integers(0, 6))
            scores.append((hi, lo) if first else (lo, hi))
        r = CoTResponse(
            predicted_preferences=(profile(),),
            predicted_non_preferences=(profile(),),
            scores=tuple(scores),
            totals=(sum(s[0] for s in scores), sum(s[1] for s in scores)),
            answer=ANSWERS[0] if first else ANSWERS[1],
        )
        return format_response(r)


class PolicyAssessor:
    """Decodes a trained policy on the decoded reference images of each sample.

    Greedy by default; a positive temperature samples with a per-user seed.
    """

    def __init__(self, policy, root: str | Path, temperature: float = 0.0, max_len: int = 64, seed: int = 0):
        from .trainer.policy import SampleView

        self._view = SampleView.from_sample
        self.policy = policy
        self.root = Path(root)
        self.temperature = temperature
        self.max_len = max_len
        self.seed = seed
        self._cache: dict[str, object] = {}

    def view(self, sample: UserSample):
        v = self._cache.get(sample.user_id)
        if v is None:
            v = self._cache[sample.user_id] = self._view(sample, self.root)
        return v

    def assess(self, sample: UserSample, k_visible: int) -> str:
        ctx = self.view(sample).truncate(k_visible)
        rng = np.random.default_rng(_sample_seed(self.seed, sample.user_id))
        return self.policy.generate(ctx, self.temperature, self.max_len, rng).text


class FixedTextAssessor:
    def __init__(self, text: str):
        self.text = text

    def assess(self, sample: UserSample, k_visible: int) -> str:
        return self.text


# --- metrics ---------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    assessment: dict[str, Fraction]
    prediction: dict[str, Fraction]
    counts: dict[str, int]
    config_hash: str = ""

    def rows(self) -> list[tuple[str, str, Fraction, int]]:
        out = []
        for split in self.counts:
            out.append((split, "assessment_accuracy", self.assessment[split], self.counts[split]))
            out.append((split, "prediction_accuracy", self.prediction[split], self.counts[split]))
        return out


def collect_responses(
    assessor: Assessor, samples: Sequence[UserSample], k_visible: int | None = None, jobs: int = 1
) -> list[str]:
    def one(s: UserSample) -> str:
        return assessor.assess(s, s.k_refs if k_visible is None else k_visible)

    if jobs <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, samples))


def is_correct(text: str, sample: UserSample) -> bool:
    r = try_parse(text, "lenient")
    return r is not None and r.answer == sample.gt_answer


def side_match_counts(
    pred: Sequence[PreferenceProfile],
    gt: Sequence[PreferenceProfile],
    sim: TextSimilarityFn,
    tau: float,
) -> tuple[int, int]:
    """(correct elements, element slots) after greedy profile pairing.

    Slots are 5 x max(len(pred), len(gt)), so missing or surplus profiles count as wrong.
    """

    def hits(p: PreferenceProfile, g: PreferenceProfile) -> int:
        return sum(1 for e, term in g if e in p and sim(p[e], term) >= tau)

    matched = sum(int(s) for _, _, s in greedy_match(pred, gt, hits))
    return matched, len(ELEMENTS) * max(len(pred), len(gt))


def sample_prediction_score(text: str, sample: UserSample, sim: TextSimilarityFn, tau: float) -> Fraction:
    """Mean over the two sides of the thresholded per-element match rate; 0 if unparseable."""
    r = try_parse(text, "lenient")
    if r is None:
        return Fraction(0)
    ps = sample.profile_set
    a, n = side_match_counts(r.predicted_preferences, ps.preferences, sim, tau)
    b, m = side_match_counts(r.predicted_non_preferences, ps.non_preferences, sim, tau)
    return (Fraction(a, n) + Fraction(b, m)) / 2


def _by_split(samples: Sequence[UserSample], splits: Iterable[str]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {s: [] for s in splits}
    for i, sample in enumerate(samples):
        if sample.split in groups:
            groups[sample.split].append(i)
    empty = [s for s, idx in groups.items() if not idx]
    if empty:
        raise ValueError(f"empty split(s): {', '.join(empty)}")
    return groups


def _mean(values: Sequence[Fraction | int]) -> Fraction:
    return Fraction(sum(values, Fraction(0)), len(values))


def report_from_responses(
    responses: Sequence[str],
    samples: Sequence[UserSample],
    sim: TextSimilarityFn,
    tau: float = 1.0,
    splits: Sequence[str] = SPLITS,
    config_hash: str = "",
) -> MetricsReport:
    groups = _by_split(samples, splits)
    correct = [int(is_correct(t, s)) for t, s in zip(responses, samples)]
    pred = [sample_prediction_score(t, s, sim, tau) for t, s in zip(responses, samples)]
    assessment, prediction, counts = {}, {}, {}
    for split, idx in groups.items():
        assessment[split] = _mean([correct[i] for i in idx])
        prediction[split] = _mean([pred[i] for i in idx])
        counts[split] = len(idx)
    every = [i for idx in groups.values() for i in idx]
    assessment[OVERALL] = _mean([correct[i] for i in every])
    prediction[OVERALL] = _mean([pred[i] for i in every])
    counts[OVERALL] = len(every)
    return MetricsReport(assessment, prediction, counts, config_hash)


def evaluate(
    assessor: Assessor,
    samples: Sequence[UserSample],
    sim: TextSimilarityFn,
    tau: float = 1.0,
    k_visible: int | None = None,
    splits: Sequence[str] = SPLITS,
    jobs: int = 1,
    config_hash: str = "",
) -> MetricsReport:
    """Per-split and overall assessment and profile-prediction accuracy."""
    _by_split(samples, splits)
    responses = collect_responses(assessor, samples, k_visible, jobs)
    return report_from_responses(responses, samples, sim, tau, splits, config_hash)


def profile_prediction_accuracy(
    assessor: Assessor,
    samples: Sequence[UserSample],
    sim: TextSimilarityFn,
    tau: float = 1.0,
    splits: Sequence[str] = SPLITS,
) -> dict[str, Fraction]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return evaluate(assessor, samples, sim, tau, splits=splits).prediction


@dataclass(frozen=True)
class SweepRow:
    k: int
    split: str
    accuracy: Fraction
    n: int


def robustness_sweep(
    assessor: Assessor,
    samples: Sequence[UserSample],
    k_values: Sequence[int],
    sim: TextSimilarityFn,
    splits: Sequence[str] = SPLITS,
    jobs: int = 1,
) -> list[SweepRow]:
    """Assessment accuracy when only the first k reference pairs are visible."""
    available = min(s.k_refs for s in samples) if samples else 0
    for k in k_values:
        if k <= 0 or k > available:
            raise ValueError(f"k={k} outside 1..{available}")
    rows = []
    for k in k_values:
        report = evaluate(assessor, samples, sim, k_visible=k, splits=splits, jobs=jobs)
        rows += [SweepRow(k, split, report.assessment[split], report.counts[split]) for split in report.counts]
    return rows


# --- ablation ----------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    sft: bool
    rl: bool
    prediction_reward: bool


ABLATION_VARIANTS = (
    Variant("base", False, False, False),
    Variant("sft", True, False, False),
    Variant("rl", False, True, False),
    Variant("sft+rl", True, True, False),
    Variant("sft+rl+pr", True, True, True),
)


@dataclass(frozen=True)
class AblationRow:
    variant: str
    seed: int
    assessment: Fraction
    prediction: Fraction
    n: int


def ablation_run(
    variants: Sequence[Variant],
    seeds: Sequence[int],
    train_and_evaluate: Callable[[Variant, int], MetricsReport],
) -> list[AblationRow]:
    """Train every variant for every seed and collect overall metrics."""
    rows = []
    for v in variants:
        for seed in seeds:
            report = train_and_evaluate(v, seed)
            rows.append(AblationRow(v.name, seed, report.assessment[OVERALL], report.prediction[OVERALL], report.counts[OVERALL]))
    return rows


def ablation_means(rows: Sequence[AblationRow]) -> dict[str, tuple[Fraction, Fraction]]:
    out: dict[str, tuple[Fraction, Fraction]] = {}
    for name in dict.fromkeys(r.variant for r in rows):
        mine = [r for r in rows if r.variant == name]
        out[name] = (_mean([r.assessment for r in mine]), _mean([r.prediction for r in mine]))
    return out


# --- report emission ---------------------------------------------------------

REPORT_FORMATS = ("text-table", "csv", "plot-data")


def _fmt(x: Fraction) -> str:
    return f"{float(x):.6f}"


def _csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_report(report: MetricsReport, fmt: str) -> str:
    if not report.counts or any(n == 0 for n in report.counts.values()):
        raise ValueError("report has an empty split")
    if fmt == "csv":
        return _csv(("split", "metric", "value", "n"), ((s, m, _fmt(v), n) for s, m, v, n in report.rows()))
    if fmt == "plot-data":
        return _csv(
            ("split", "assessment_accuracy", "prediction_accuracy"),
            ((s, _fmt(report.assessment[s]), _fmt(report.prediction[s])) for s in report.counts),
        )
    if fmt == "text-table":
        lines = [f"{'split':<12} {'Ass.':>8} {'Pred.':>8} {'n':>6}"]
        for s in report.counts:
            lines.append(
                f"{s:<12} {100 * float(report.assessment[s]):>8.1f} {100 * float(report.prediction[s]):>8.1f} {report.counts[s]:>6}"
            )
        if report.config_hash:
            lines.append(f"config {report.config_hash}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def render_sweep(rows: Sequence[SweepRow], fmt: str) -> str:
    if not rows:
        raise ValueError("empty sweep")
    if fmt == "csv":
        return _csv(("k", "split", "accuracy", "n"), ((r.k, r.split, _fmt(r.accuracy), r.n) for r in rows))
    if fmt == "plot-data":
        splits = list(dict.fromkeys(r.split for r in rows))
        ks = list(dict.fromkeys(r.k for r in rows))
        cell = {(r.k, r.split): r.accuracy for r in rows}
        return _csv(("k", *splits), ((k, *(_fmt(cell[(k, s)]) for s in splits)) for k in ks))
    if fmt == "text-table":
        lines = [f"{'k':>3} {'split':<12} {'Ass.':>8} {'n':>6}"]
        lines += [f"{r.k:>3} {r.split:<12} {100 * float(r.accuracy):>8.1f} {r.n:>6}" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def render_ablation(rows: Sequence[AblationRow], fmt: str = "text-table") -> str:
    if not rows:
        raise ValueError("empty ablation")
    means = ablation_means(rows)
    if fmt == "csv":
        return _csv(
            ("variant", "seed", "assessment_accuracy", "prediction_accuracy", "n"),
            ((r.variant, r.seed, _fmt(r.assessment), _fmt(r.prediction), r.n) for r in rows),
        )
    if fmt == "text-table":
        lines = [f"{'variant':<12} {'Ass.':>8} {'Pred.':>8}"]
        lines += [f"{v:<12} {100 * float(a):>8.1f} {100 * float(p):>8.1f}" for v, (a, p) in means.items()]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown ablation format {fmt!r}")


def emit_report(report: MetricsReport, fmt: str, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(render_report(report, fmt), "utf-8")
    return path
