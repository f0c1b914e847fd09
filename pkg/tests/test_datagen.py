from __future__ import annotations

import json

import numpy as np
import pytest

from prefassess.datagen import (
    ANSWERS,
    SPLITS,
    DatasetManifest,
    build_user_sample,
    decode_stripes,
    detect_terms,
    generate_dataset,
    is_reserved,
    load_dataset,
    load_image,
    load_prompts,
    mock_render,
    recaption,
)
from prefassess.profile import ELEMENTS, PreferenceProfile, sample_profile_set


def test_recaption_single_clause():
    assert recaption("a cat", PreferenceProfile.of({"color": "warm"})) == "a cat, with warm colors"


def test_recaption_rejects_empty():
    with pytest.raises(ValueError):
        recaption("  ", PreferenceProfile.of({"color": "warm"}))
    with pytest.raises(ValueError):
        recaption("a cat", PreferenceProfile(()))


def test_recaption_not_idempotent():
    p = PreferenceProfile.of({"color": "warm"})
    assert recaption(recaption("a cat", p), p) == "a cat, with warm colors, with warm colors"


def test_detect_terms_ambiguity(vocab):
    warm, cool = vocab.index(ELEMENTS[1], "warm"), vocab.index(ELEMENTS[1], "cool")
    assert detect_terms("a cat, with warm colors", vocab)[1] == warm
    assert detect_terms("a cat, cool tones", vocab)[1] == cool
    assert detect_terms("a cat, warm and cool colors", vocab)[1] is None
    assert detect_terms("a cat", vocab) == (None,) * len(ELEMENTS)


def test_mock_render_encodes_profile(vocab):
    p = sample_profile_set(vocab, 5, 1).preferences[0]
    img = mock_render(recaption("a cat", p), 9, vocab)
    assert img.pixels.shape == (32, 32, 3) and img.pixels.dtype == np.uint8
    assert decode_stripes(img) == tuple(vocab.index(e, p[e]) for e in ELEMENTS)
    assert img == mock_render(recaption("a cat", p), 9, vocab)
    assert img != mock_render(recaption("a cat", p), 10, vocab)
    assert decode_stripes(mock_render("a cat", 0, vocab)) == (None,) * len(ELEMENTS)


def test_png_round_trip_keeps_codes(tmp_path, vocab, backend):
    ps = sample_profile_set(vocab, 11, 2)
    s = build_user_sample(ps, load_prompts()[:6], 5, backend, 4, tmp_path)
    for i, ref in enumerate(s.preferred_refs):
        p = ps.preferences[i % 2]
        assert decode_stripes(load_image(tmp_path, ref)) == tuple(vocab.index(e, p[e]) for e in ELEMENTS)


def test_build_user_sample_candidates(tmp_path, vocab, backend):
    ps = sample_profile_set(vocab, 2, 1)
    s = build_user_sample(ps, load_prompts()[:4], 3, backend, 7, tmp_path)
    good = tuple(vocab.index(e, ps.preferences[0][e]) for e in ELEMENTS)
    cands = [decode_stripes(load_image(tmp_path, c)) for c in (s.candidate_1, s.candidate_2)]
    assert cands[ANSWERS.index(s.gt_answer)] == good
    assert "pref" not in s.candidate_1.path and "pref" not in s.candidate_2.path
    assert s.k_refs == 3 and len(s.initial_prompts) == 4


def test_build_user_sample_validates(tmp_path, vocab, backend):
    ps = sample_profile_set(vocab, 2, 1)
    with pytest.raises(ValueError):
        build_user_sample(ps, load_prompts()[:3], 3, backend, 0, tmp_path)
    with pytest.raises(ValueError):
        build_user_sample(ps, load_prompts()[:3], 0, backend, 0, tmp_path)


def test_gt_answer_balance(tmp_path, vocab, backend):
    prompts = load_prompts()[:2]
    answers = [
        build_user_sample(sample_profile_set(vocab, s, 1), prompts, 1, backend, s, tmp_path).gt_answer
        for s in range(200)
    ]
    frac = answers.count(ANSWERS[0]) / len(answers)
    assert 0.4 <= frac <= 0.6


def test_dataset_splits(small_dataset):
    out, manifest, samples = small_dataset
    assert manifest.n_users == 100 == len(samples)
    assert sum(1 for s in samples if not s.multi) == 75
    assert sum(1 for s in samples if s.multi) == 25
    assert set(manifest.counts) == set(SPLITS) and all(manifest.counts.values())
    assert all(s.split.endswith("MP") == s.multi for s in samples)
    assert all(1 <= len(s.profile_set.preferences) <= 3 for s in samples)
    assert DatasetManifest.read(out / "manifest.json") == manifest


def test_unseen_combinations_disjoint(small_dataset):
    _, manifest, samples = small_dataset
    seen = {s.profile_set.combination_key() for s in samples if s.split.startswith("seen")}
    unseen = {s.profile_set.combination_key() for s in samples if s.split.startswith("unseen")}
    assert unseen and seen and not seen & unseen
    assert all(is_reserved(k, manifest.reserved_fraction) for k in unseen)
    assert not any(is_reserved(k, manifest.reserved_fraction) for k in seen)


def test_dataset_rows_round_trip(small_dataset):
    out, _, samples = small_dataset
    assert load_dataset(out) == samples
    row = json.loads((out / "dataset.jsonl").read_text().splitlines()[0])
    assert {"user_id", "split", "gt_answer", "preferences", "candidate_1"} <= set(row)


def test_generation_is_deterministic(tmp_path, vocab, backend):
    for name in ("a", "b"):
        generate_dataset(vocab, 12, 0.25, 2, backend, 5, tmp_path / name)
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for png in sorted((a / "img").iterdir()):
        assert png.read_bytes() == (b / "img" / png.name).read_bytes()


def test_parallel_generation_matches_serial(tmp_path, vocab, backend):
    generate_dataset(vocab, 12, 0.25, 2, backend, 5, tmp_path / "s", jobs=1)
    generate_dataset(vocab, 12, 0.25, 2, backend, 5, tmp_path / "p", jobs=4)
    assert (tmp_path / "s/dataset.jsonl").read_bytes() == (tmp_path / "p/dataset.jsonl").read_bytes()


def test_generation_rejects_tiny_runs(tmp_path, vocab, backend):
    with pytest.raises(ValueError):
        generate_dataset(vocab, 3, 0.25, 2, backend, 0, tmp_path)
    with pytest.raises(ValueError):
        generate_dataset(vocab, 10, 1.5, 2, backend, 0, tmp_path)
