from __future__ import annotations

import numpy as np
import pytest

from _helpers import random_response
from prefassess.cot import (
    ANSWERS,
    CoTResponse,
    FilterVerdict,
    ParseError,
    OracleAnnotator,
    annotate_samples,
    build_annotation_prompt,
    filter_response,
    format_response,
    oracle_response,
    parse_response,
    read_annotations,
    render_response,
    try_parse,
    write_annotations,
)
from prefassess.profile import ELEMENTS, PreferenceProfile, profile_to_text


@pytest.fixture(scope="module")
def samples(small_dataset):
    return small_dataset[2]


def _oracle(sample, seed=0):
    return oracle_response(sample, seed)


def test_round_trip(vocab):
    rng = np.random.default_rng(0)
    for _ in range(50):
        r = random_response(vocab, rng)
        assert parse_response(render_response(r), "strict") == r


def test_render_rejects_inconsistent(samples):
    r = _oracle(samples[0])
    with pytest.raises(ValueError, match="totals"):
        render_response(CoTResponse(r.predicted_preferences, r.predicted_non_preferences, r.scores, (0, 0), r.answer))


def _code(text: str) -> str:
    with pytest.raises(ParseError) as info:
        parse_response(text, "strict")
    return info.value.code


def test_strict_error_codes(samples):
    text = render_response(_oracle(samples[0]))
    think = text[text.index("<think>") : text.index("</think>") + len("</think>")]
    answer = text[text.index("<answer>") :]
    swapped = text.replace(think, "@@").replace(answer, think).replace("@@", answer)
    assert _code(swapped) == "MISORDERED_TAGS"
    assert _code(text.replace("<think>", "")) == "MISSING_TAG"
    assert _code(text + "\n<answer>Image 1</answer>") == "DUPLICATE_TAG"
    assert _code("hello\n" + text) == "STRAY_TEXT"
    assert _code(text.replace("Image 1</answer>", "Image 3</answer>").replace("Image 2</answer>", "Image 3</answer>")) == "BAD_ANSWER"
    assert _code(text.replace("/10 |", "/11 |", 1)) == "BAD_SCORES"
    bad_profile = text.replace("art style:", "mood: calm; art style:", 1)
    assert _code(bad_profile) == "BAD_PROFILE"


def test_strict_rejects_score_out_of_range(samples):
    r = _oracle(samples[0])
    text = format_response(CoTResponse(
        r.predicted_preferences, r.predicted_non_preferences,
        ((11, 0),) + r.scores[1:], r.totals, r.answer,
    ))
    assert _code(text) == "BAD_SCORES"


def test_lenient_prose():
    text = (
        "<visual preference profile>They like art style: cubism and color: warm.</visual preference profile>\n"
        "<visual non-preference profile>They avoid color: cool.</visual non-preference profile>\n"
        "<think>On art style Image 1 earns 9/10 while Image 2 gets 3/10. "
        "Color: 8/10 versus 2/10. For detail I give 7/10 and 4/10. "
        "Art medium 6/10 and 5/10; saturation 9/10 and 1/10.</think>\n"
        "<answer> Image 1 </answer>"
    )
    assert try_parse(text, "strict") is None
    r = parse_response(text, "lenient")
    assert r.scores[0] == (9, 3) and r.scores[1] == (8, 2)
    assert r.totals == (39, 15)
    assert r.answer == "Image 1"
    assert r.predicted_preferences == (PreferenceProfile.of({"art style": "cubism", "color": "warm"}),)


def test_lenient_missing_scores():
    text = "<visual preference profile></visual preference profile><visual non-preference profile></visual non-preference profile><think>no numbers</think><answer>Image 1</answer>"
    with pytest.raises(ParseError) as info:
        parse_response(text, "lenient")
    assert info.value.code == "BAD_SCORES"


def test_oracle_response_properties(samples):
    for s in samples[:20]:
        r = _oracle(s, 3)
        r.check()
        assert r.answer == s.gt_answer
        gi = ANSWERS.index(s.gt_answer)
        assert all(7 <= pair[gi] <= 10 and 1 <= pair[1 - gi] <= 4 for pair in r.scores)


def test_annotation_prompt_carries_meta(samples):
    mp = next(s for s in samples if s.multi)
    prompt = build_annotation_prompt(mp)
    assert mp.gt_answer in prompt
    for p in mp.profile_set.preferences:
        assert profile_to_text(p) in prompt
    assert "numbered" in prompt
    assert build_annotation_prompt(mp) == prompt


def test_filter_accepts_oracle(samples, text_sim):
    for s in samples[:30]:
        assert filter_response(render_response(_oracle(s)), s, text_sim) == FilterVerdict(True)


def test_filter_rejections(samples, text_sim):
    s = samples[0]
    r = _oracle(s)
    flipped = CoTResponse(
        r.predicted_preferences, r.predicted_non_preferences,
        tuple((b, a) for a, b in r.scores), r.totals[::-1], ANSWERS[1 - ANSWERS.index(r.answer)],
    )
    assert filter_response(format_response(flipped), s, text_sim).reasons == ("WRONG_ANSWER",)
    tie = CoTResponse(r.predicted_preferences, r.predicted_non_preferences, ((5, 5),) * 5, (25, 25), r.answer)
    assert "TIE" in filter_response(format_response(tie), s, text_sim).reasons
    bad_total = CoTResponse(r.predicted_preferences, r.predicted_non_preferences, r.scores, (50, 0), r.answer)
    assert "TOTAL_MISMATCH" in filter_response(format_response(bad_total), s, text_sim).reasons
    swapped = CoTResponse(r.predicted_non_preferences, r.predicted_preferences, r.scores, r.totals, r.answer)
    assert filter_response(format_response(swapped), s, text_sim).reasons == ("PROFILE_MISMATCH",)
    assert filter_response("junk", s, text_sim).reasons == ("PARSE_FAIL",)


def test_filter_tau_monotone(samples, vocab, text_sim):
    s = next(x for x in samples if not x.multi)
    p = s.profile_set.preferences[0]
    e = ELEMENTS[0]
    other = next(t for t in vocab[e] if t != p[e])
    wrong = PreferenceProfile(tuple((el, other if el is e else t) for el, t in p))
    r = _oracle(s)
    text = format_response(CoTResponse((wrong,), r.predicted_non_preferences, r.scores, r.totals, r.answer))
    taus = np.linspace(0, 1, 21)
    accepted = [filter_response(text, s, text_sim, float(t)).accepted for t in taus]
    assert accepted[0] and not accepted[-1]
    assert accepted == sorted(accepted, reverse=True)
    with pytest.raises(ValueError):
        filter_response(text, s, text_sim, 1.5)


def test_verdict_invariant():
    with pytest.raises(ValueError):
        FilterVerdict(True, ("TIE",))
    with pytest.raises(ValueError):
        FilterVerdict(False)


def test_annotation_file_round_trip(tmp_path, samples):
    texts = annotate_samples(samples[:8], OracleAnnotator(1), jobs=3)
    assert texts == annotate_samples(samples[:8], OracleAnnotator(1), jobs=1)
    write_annotations(tmp_path / "a.jsonl", samples[:8], texts)
    rows = read_annotations(tmp_path / "a.jsonl")
    assert [r["response_text"] for r in rows] == texts
    assert {r["verdict"] for r in rows} == {"pending"}
