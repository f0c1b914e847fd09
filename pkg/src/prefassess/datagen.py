"""Synthetic personalized-preference data: recaptioning, mock rendering, datasets.

Each simulated user gets k pairs of reference images (preferred and
non-preferred) and two candidates rendered from one shared fresh prompt.
The mock text-to-image backend paints five horizontal stripes whose hues
encode which vocabulary term the prompt mentions for each element, so the
profile behind any mock image can be decoded exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from .profile import (
    ELEMENTS,
    PreferenceProfile,
    UserProfileSet,
    VisualElement,
    Vocabulary,
    sample_profile_set,
)

logger = logging.getLogger(__name__)

ANSWERS = ("Image 1", "Image 2")
SPLITS = ("seen-SP", "seen-MP", "unseen-SP", "unseen-MP")
IMAGE_SIZE = 32
HUE_LEVELS = 32

_CLAUSES = {
    VisualElement.ART_STYLE: "in {} style",
    VisualElement.COLOR: "with {} colors",
    VisualElement.DETAIL: "{} detail",
    VisualElement.ART_MEDIUM: "rendered as {}",
    VisualElement.SATURATION: "{} saturation",
}


def recaption(initial_prompt: str, p: PreferenceProfile) -> str:
    """Append one style clause per element present in `p`.

    Not idempotent: applying it twice appends the clauses twice.
    """
    if not initial_prompt or not initial_prompt.strip():
        raise ValueError("initial prompt is empty")
    if not len(p):
        raise ValueError("profile is empty")
    clauses = [_CLAUSES[e].format(t) for e, t in p]
    return ", ".join([initial_prompt.strip(), *clauses])


def load_prompts(path: str | Path | None = None) -> list[str]:
    if path is None:
        text = resources.files("prefassess.data").joinpath("prompts.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    prompts = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            prompts.append(line)
    return prompts


# --- mock text-to-image ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    backend_id: str
    seed: int

    @cached_property
    def stripe_codes(self) -> tuple[int | None, ...]:
        return decode_stripes(self.pixels)

    def to_png(self, path: Path) -> None:
        Image.fromarray(self.pixels, mode="RGB").save(path, format="PNG")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RenderedImage) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]


class T2IBackend(Protocol):
    backend_id: str

    def render(self, prompt: str, seed: int) -> RenderedImage: ...


def _term_patterns(vocab: Vocabulary) -> dict[VisualElement, re.Pattern[str]]:
    patterns = {}
    for element in ELEMENTS:
        # longest first so multi-word terms win over their prefixes
        terms = sorted(vocab[element], key=len, reverse=True)
        alt = "|".join(re.escape(t) for t in terms)
        patterns[element] = re.compile(rf"(?<![\w-])({alt})(?![\w-])", re.I)
    return patterns


_PATTERN_CACHE: dict[str, dict[VisualElement, re.Pattern[str]]] = {}


def detect_terms(prompt: str, vocab: Vocabulary) -> tuple[int | None, ...]:
    """Per element, the vocabulary index of the single term the prompt mentions.

    None when the prompt mentions no term or more than one distinct term.
    """
    key = vocab.digest()
    if key not in _PATTERN_CACHE:
        _PATTERN_CACHE[key] = _term_patterns(vocab)
    patterns = _PATTERN_CACHE[key]
    codes = []
    for element in ELEMENTS:
        found = {m.group(1).lower() for m in patterns[element].finditer(prompt)}
        codes.append(vocab.index(element, found.pop()) if len(found) == 1 else None)
    return tuple(codes)


def _stripe_rows(element_pos: int) -> slice:
    n = len(ELEMENTS)
    return slice(element_pos * IMAGE_SIZE // n, (element_pos + 1) * IMAGE_SIZE // n)


def _noise_rng(prompt: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return np.random.default_rng([int.from_bytes(digest[:8], "little"), seed & 0xFFFFFFFFFFFF])


def mock_render(prompt: str, seed: int, vocab: Vocabulary, backend_id: str = "mock-stripes") -> RenderedImage:
    """Render a 32x32 stripe image whose hues encode the prompt's terms."""
    for element in ELEMENTS:
        if len(vocab[element]) > HUE_LEVELS:
            raise ValueError(f"mock renderer supports at most {HUE_LEVELS} terms per element")
    codes = detect_terms(prompt, vocab)
    rng = _noise_rng(prompt, seed)
    hsv = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    hsv[..., 2] = 0.55 + 0.45 * rng.random((IMAGE_SIZE, IMAGE_SIZE))
    for pos, code in enumerate(codes):
        rows = _stripe_rows(pos)
        if code is None:
            hsv[rows, :, 0] = 0.0
            hsv[rows, :, 1] = 0.0
        else:
            hsv[rows, :, 0] = code / HUE_LEVELS
            hsv[rows, :, 1] = 1.0
    pixels = np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)
    return RenderedImage(pixels=pixels, backend_id=backend_id, seed=seed)


def decode_stripes(image: RenderedImage | np.ndarray) -> tuple[int | None, ...]:
    """Recover the per-element term indices painted by `mock_render`."""
    pixels = image.pixels if isinstance(image, RenderedImage) else image
    # value noise scales each pixel uniformly, so the stripe mean keeps hue and saturation
    means = np.stack(
        [pixels[_stripe_rows(pos)].reshape(-1, 3).mean(axis=0) for pos in range(len(ELEMENTS))]
    )
    hsv = rgb_to_hsv(means / 255.0)
    codes: list[int | None] = []
    for h, s, _ in hsv:
        codes.append(None if s < 0.5 else int(np.round(h * HUE_LEVELS)) % HUE_LEVELS)
    return tuple(codes)


class MockT2IBackend:
    """Deterministic stand-in for a diffusion model; renders are memoized on (prompt, seed)."""

    backend_id = "mock-stripes"

    def __init__(self, vocab: Vocabulary, cache_size: int = 65536):
        self.vocab = vocab
        self._render = lru_cache(maxsize=cache_size)(self._render_uncached)

    def _render_uncached(self, prompt: str, seed: int) -> RenderedImage:
        return mock_render(prompt, seed, self.vocab, self.backend_id)

    def render(self, prompt: str, seed: int) -> RenderedImage:
        return self._render(prompt, seed)


class RemoteT2IBackend:
    """Adapter stub for a real text-to-image service.

    A concrete client posts `{"prompt": ..., "seed": ...}` and must return a
    PNG; it is not shipped here.
    """

    def __init__(self, endpoint: str, backend_id: str = "remote"):
        self.endpoint = endpoint
        self.backend_id = backend_id

    def render(self, prompt: str, seed: int) -> RenderedImage:
        raise NotImplementedError(f"no text-to-image client configured for {self.endpoint}")


# --- samples ---------------------------------------------------------------


@dataclass(frozen=True)
class ImageRef:
    path: str
    width: int
    height: int
    backend_id: str
    render_seed: int


@dataclass(frozen=True)
class UserSample:
    user_id: str
    profile_set: UserProfileSet
    initial_prompts: tuple[str, ...]
    preferred_refs: tuple[ImageRef, ...]
    non_preferred_refs: tuple[ImageRef, ...]
    candidate_1: ImageRef
    candidate_2: ImageRef
    gt_answer: str
    split: str = "seen-SP"

    def __post_init__(self) -> None:
        if len(self.preferred_refs) != len(self.non_preferred_refs) or not self.preferred_refs:
            raise ValueError("reference lists must be non-empty and equally long")
        if self.gt_answer not in ANSWERS:
            raise ValueError(f"bad gt_answer {self.gt_answer!r}")
        if self.split not in SPLITS:
            raise ValueError(f"bad split {self.split!r}")

    @property
    def k_refs(self) -> int:
        return len(self.preferred_refs)

    @property
    def multi(self) -> bool:
        return self.profile_set.multi

    def to_row(self) -> dict:
        return {
            "user_id": self.user_id,
            "split": self.split,
            "multi": self.profile_set.multi,
            "preferences": [p.as_dict() for p in self.profile_set.preferences],
            "non_preferences": [p.as_dict() for p in self.profile_set.non_preferences],
            "prompts": list(self.initial_prompts),
            "preferred_refs": [asdict(r) for r in self.preferred_refs],
            "non_preferred_refs": [asdict(r) for r in self.non_preferred_refs],
            "candidate_1": asdict(self.candidate_1),
            "candidate_2": asdict(self.candidate_2),
            "gt_answer": self.gt_answer,
        }

    @classmethod
    def from_row(cls, row: dict) -> "UserSample":
        prefs = tuple(PreferenceProfile.of(d) for d in row["preferences"])
        negs = tuple(PreferenceProfile.of(d) for d in row["non_preferences"])
        profile_set = UserProfileSet(prefs, negs, row["user_id"], bool(row["multi"]))
        return cls(
            user_id=row["user_id"],
            profile_set=profile_set,
            initial_prompts=tuple(row["prompts"]),
            preferred_refs=tuple(ImageRef(**r) for r in row["preferred_refs"]),
            non_preferred_refs=tuple(ImageRef(**r) for r in row["non_preferred_refs"]),
            candidate_1=ImageRef(**row["candidate_1"]),
            candidate_2=ImageRef(**row["candidate_2"]),
            gt_answer=row["gt_answer"],
            split=row["split"],
        )


def _ref(img: RenderedImage, path: str) -> ImageRef:
    h, w = img.pixels.shape[:2]
    return ImageRef(path=path, width=w, height=h, backend_id=img.backend_id, render_seed=img.seed)


def build_user_sample(
    profile_set: UserProfileSet,
    prompts: Sequence[str],
    k_refs: int,
    backend: T2IBackend,
    rng_seed: int,
    out_dir: str | Path,
    split: str | None = None,
) -> UserSample:
    """Render one user's references and candidates into `out_dir/img/`.

    Reference i (both preferred and non-preferred) uses prompts[i] and the
    profile pair i mod n; the candidates share prompts[k_refs].
    """
    if k_refs < 1:
        raise ValueError("k_refs must be >= 1")
    if len(prompts) < k_refs + 1:
        raise ValueError(f"need at least {k_refs + 1} prompts, got {len(prompts)}")
    rng = np.random.default_rng(rng_seed)
    n = len(profile_set.preferences)
    uid = profile_set.user_id
    img_dir = Path(out_dir) / "img"
    img_dir.mkdir(parents=True, exist_ok=True)

    def render(prompt: str, name: str) -> ImageRef:
        seed = int(rng.integers(2**31))
        img = backend.render(prompt, seed)
        rel = f"img/{uid}_{name}.png"
        img.to_png(Path(out_dir) / rel)
        return _ref(img, rel)

    preferred, non_preferred = [], []
    for i in range(k_refs):
        j = i % n
        preferred.append(render(recaption(prompts[i], profile_set.preferences[j]), f"pref{i}"))
        non_preferred.append(render(recaption(prompts[i], profile_set.non_preferences[j]), f"nonpref{i}"))

    chosen = int(rng.integers(n))
    fresh = prompts[k_refs]
    good = render(recaption(fresh, profile_set.preferences[chosen]), "cand_pref")
    bad = render(recaption(fresh, profile_set.non_preferences[chosen]), "cand_nonpref")
    if rng.integers(2) == 0:
        cand1, cand2, answer = good, bad, ANSWERS[0]
    else:
        cand1, cand2, answer = bad, good, ANSWERS[1]
    # rename so file names do not leak the answer
    cand1 = _rename(out_dir, cand1, f"img/{uid}_cand1.png")
    cand2 = _rename(out_dir, cand2, f"img/{uid}_cand2.png")

    if split is None:
        split = "seen-MP" if profile_set.multi else "seen-SP"
    return UserSample(
        user_id=uid,
        profile_set=profile_set,
        initial_prompts=tuple(prompts[: k_refs + 1]),
        preferred_refs=tuple(preferred),
        non_preferred_refs=tuple(non_preferred),
        candidate_1=cand1,
        candidate_2=cand2,
        gt_answer=answer,
        split=split,
    )


def _rename(out_dir: str | Path, ref: ImageRef, new_rel: str) -> ImageRef:
    root = Path(out_dir)
    (root / ref.path).replace(root / new_rel)
    return ImageRef(new_rel, ref.width, ref.height, ref.backend_id, ref.render_seed)


def load_image(root: str | Path, ref: ImageRef) -> np.ndarray:
    with Image.open(Path(root) / ref.path) as im:
        return np.asarray(im.convert("RGB"))


# --- datasets --------------------------------------------------------------


@dataclass
class DatasetManifest:
    counts: dict[str, int]
    seed: int
    vocab_hash: str
    backend_id: str
    n_users: int
    k_refs: int
    reserved_fraction: float
    files: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text("utf-8")))


def is_reserved(combination_key: str, reserved_fraction: float) -> bool:
    """Whether a profile combination belongs to the held-out (unseen) pool."""
    digest = hashlib.sha256(combination_key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64 < reserved_fraction


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def draw_profile_set(
    vocab: Vocabulary,
    seed: int,
    n_profiles: int,
    user_id: str,
    unseen: bool,
    reserved_fraction: float,
    seen_pool: Sequence[UserProfileSet] | None = None,
) -> UserProfileSet:
    """Sample a profile set whose combination falls in (unseen) or out of (seen) the reserved pool.

    With a `seen_pool`, seen users reuse one of the pooled profile combinations.
    """
    if not unseen and seen_pool:
        rng = np.random.default_rng(seed)
        pool = [s for s in seen_pool if len(s.preferences) == n_profiles] or list(seen_pool)
        src = pool[int(rng.integers(len(pool)))]
        return UserProfileSet(src.preferences, src.non_preferences, user_id, src.multi)
    for attempt in range(10_000):
        ps = sample_profile_set(vocab, derive_seed(seed, attempt), n_profiles, user_id)
        if is_reserved(ps.combination_key(), reserved_fraction) == unseen:
            return ps
    raise RuntimeError("could not draw a profile set for the requested split")


def _group_sizes(n_users: int, multi_fraction: float, unseen_fraction: float) -> dict[str, int]:
    n_mp = int(round(n_users * multi_fraction))
    if 0 < multi_fraction < 1:
        n_mp = min(max(n_mp, 2), n_users - 2)
    n_sp = n_users - n_mp

    def unseen(n: int) -> int:
        if n < 2:
            return 0
        return min(max(int(round(n * unseen_fraction)), 1), n - 1)

    return {
        "seen-SP": n_sp - unseen(n_sp),
        "unseen-SP": unseen(n_sp),
        "seen-MP": n_mp - unseen(n_mp),
        "unseen-MP": unseen(n_mp),
    }


def generate_dataset(
    vocab: Vocabulary,
    n_users: int,
    multi_fraction: float,
    k_refs: int,
    backend: T2IBackend,
    seed: int,
    out_dir: str | Path,
    prompts: Sequence[str] | None = None,
    unseen_fraction: float = 0.2,
    reserved_fraction: float = 0.2,
    jobs: int = 1,
    split_sizes: dict[str, int] | None = None,
    seen_pool: Sequence[UserProfileSet] | None = None,
) -> DatasetManifest:
    """Write `dataset.jsonl`, `img/*.png` and `manifest.json` under `out_dir`.

    Users in the unseen splits draw profile combinations from a reserved,
    hash-defined pool that seen users never touch.
    """
    if not 0.0 <= multi_fraction <= 1.0:
        raise ValueError("multi_fraction must lie in [0, 1]")
    if split_sizes is None:
        if n_users < 4:
            raise ValueError("n_users must be >= 4 to populate all four splits")
        split_sizes = _group_sizes(n_users, multi_fraction, unseen_fraction)
    n_users = sum(split_sizes.values())
    prompts = list(prompts) if prompts is not None else load_prompts()
    if len(prompts) < k_refs + 1:
        raise ValueError(f"prompt corpus needs at least {k_refs + 1} prompts")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    labels = [s for s in SPLITS for _ in range(split_sizes.get(s, 0))]
    labels = [labels[i] for i in rng.permutation(len(labels))]

    # all per-user randomness is fixed here, before any parallel dispatch
    jobs_spec = []
    for i, split in enumerate(labels):
        multi = split.endswith("MP")
        n_profiles = int(rng.integers(2, 4)) if multi else 1
        user_prompts = [prompts[j] for j in rng.choice(len(prompts), size=k_refs + 1, replace=False)]
        jobs_spec.append((i, split, n_profiles, user_prompts, int(rng.integers(2**31))))

    def build(spec: tuple) -> UserSample:
        i, split, n_profiles, user_prompts, user_seed = spec
        uid = f"u{seed}-{i:05d}"
        ps = draw_profile_set(
            vocab, derive_seed(user_seed, 1), n_profiles, uid, split.startswith("unseen"),
            reserved_fraction, seen_pool,
        )
        return build_user_sample(ps, user_prompts, k_refs, backend, derive_seed(user_seed, 2), out, split)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(build, jobs_spec))
    else:
        samples = [build(s) for s in jobs_spec]

    write_dataset(samples, out / "dataset.jsonl")
    counts = {s: sum(1 for x in samples if x.split == s) for s in SPLITS}
    manifest = DatasetManifest(
        counts=counts,
        seed=seed,
        vocab_hash=vocab.digest(),
        backend_id=backend.backend_id,
        n_users=n_users,
        k_refs=k_refs,
        reserved_fraction=reserved_fraction,
        files={"rows": "dataset.jsonl", "images": "img/"},
    )
    (out / "manifest.json").write_text(manifest.to_json(), "utf-8")
    logger.info("wrote %d users to %s", n_users, out)
    return manifest


def write_dataset(samples: Sequence[UserSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_row(), ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> list[UserSample]:
    """Read samples from a dataset directory or a JSONL file."""
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.jsonl"
    with open(p, encoding="utf-8") as f:
        return [UserSample.from_row(json.loads(line)) for line in f if line.strip()]
