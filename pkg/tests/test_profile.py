from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from prefassess.profile import (
    ELEMENTS,
    PreferenceProfile,
    UserProfileSet,
    VisualElement,
    Vocabulary,
    VocabularyError,
    load_vocabulary,
    parse_profile_clauses,
    parse_profile_text,
    profile_to_text,
    sample_profile_set,
)

FULL = """\
[art style]
cubism
baroque
[color]
warm
cool
[detail]
intricate
sparse
[art medium]
oil painting
watercolor
[saturation]
vivid
muted
"""


def test_elements_canonical_order():
    assert [e.label for e in ELEMENTS] == ["art style", "color", "detail", "art medium", "saturation"]
    assert [e.position for e in ELEMENTS] == [0, 1, 2, 3, 4]
    assert VisualElement.from_name("Art_Style") is VisualElement.ART_STYLE


def test_load_vocabulary_round_trip(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text(FULL)
    v = load_vocabulary(p)
    assert set(v.terms) == set(ELEMENTS)
    assert v[VisualElement.COLOR] == ("warm", "cool")
    assert v.source == str(p)


def test_bundled_vocabulary_is_valid(vocab):
    assert all(len(vocab[e]) >= 2 for e in ELEMENTS)
    assert len(vocab.all_terms()) == sum(len(vocab[e]) for e in ELEMENTS)


def test_missing_element_is_named(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text(FULL.split("[saturation]")[0])
    with pytest.raises(VocabularyError, match="saturation"):
        load_vocabulary(p)


def test_duplicate_term_reports_line(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text(FULL.replace("cool\n", "cool\nwarm\n"))
    with pytest.raises(VocabularyError, match=r":7: duplicate term 'warm'"):
        load_vocabulary(p)


@pytest.mark.parametrize(
    "text, message",
    [
        (FULL.replace("[detail]", "[mood]"), "unknown element 'mood'"),
        (FULL.replace("vivid\nmuted\n", "vivid\n"), "at least 2 terms"),
        ("orphan\n" + FULL, "outside of any element"),
    ],
)
def test_vocabulary_errors(tmp_path, text, message):
    p = tmp_path / "v.txt"
    p.write_text(text)
    with pytest.raises(VocabularyError, match=message):
        load_vocabulary(p)


def test_missing_vocabulary_file(tmp_path):
    with pytest.raises(VocabularyError, match="not found"):
        load_vocabulary(tmp_path / "nope.txt")


def test_sampling_is_deterministic(vocab):
    assert sample_profile_set(vocab, 42, 1) == sample_profile_set(vocab, 42, 1)


def test_sampled_pairs_are_disjoint(vocab):
    ps = sample_profile_set(vocab, 7, 1)
    for e in ELEMENTS:
        assert ps.preferences[0][e] != ps.non_preferences[0][e]


def test_two_term_vocabulary_seed_sweep():
    tiny = Vocabulary({e: ("a" + e.name.lower(), "b" + e.name.lower()) for e in ELEMENTS})
    for seed in range(1000):
        ps = sample_profile_set(tiny, seed, 2)
        a, b = ps.preferences
        assert any(a[e] != b[e] for e in ELEMENTS)


def test_sampling_rejects_bad_counts(vocab):
    for n in (0, 4):
        with pytest.raises(ValueError):
            sample_profile_set(vocab, 0, n)


def test_profile_set_invariants(vocab):
    ps = sample_profile_set(vocab, 1, 1)
    with pytest.raises(ValueError, match="share"):
        UserProfileSet(ps.preferences, ps.preferences, "u")
    with pytest.raises(ValueError, match="multi"):
        UserProfileSet(ps.preferences, ps.non_preferences, "u", multi=True)


def test_profile_to_text_canonical(vocab):
    p = sample_profile_set(vocab, 3, 1).preferences[0]
    text = profile_to_text(p)
    assert [c.split(":")[0] for c in text.split("; ")] == [e.label for e in ELEMENTS]
    assert parse_profile_text(text) == p


def test_partial_profile_text():
    p = PreferenceProfile.of({"color": "warm"})
    assert p.partial
    assert profile_to_text(p) == "color: warm"


def test_unknown_clause_dropped():
    p, dropped = parse_profile_clauses("Color: WARM; mood: dark")
    assert p == PreferenceProfile.of({"color": "warm"}) and p.partial
    assert dropped == 1


def test_empty_text_gives_empty_partial():
    p = parse_profile_text("")
    assert len(p) == 0 and p.partial


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_sampling_properties(seed, n):
    vocab = load_vocabulary()
    ps = sample_profile_set(vocab, seed, n)
    assert ps.multi == (n > 1)
    assert len({p.key() for p in ps.preferences}) == n
    for pref, neg in zip(ps.preferences, ps.non_preferences):
        assert all(pref[e] != neg[e] for e in ELEMENTS)
        assert all(vocab.contains(e, pref[e]) for e in ELEMENTS)
        assert parse_profile_text(profile_to_text(pref)) == pref
