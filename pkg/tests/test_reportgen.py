from __future__ import annotations

from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdrlvlm.lvlm.vocab import OOVError, build_vocab, canonical, detokenize, tokenize
from xdrlvlm.reportgen import (
    LOCATIONS,
    Finding,
    ReportError,
    enumerate_valid,
    grammar_corpus,
    location_of,
    parse_combined,
    parse_concept_answer,
    parse_report,
    render_caption,
    render_concept_answer,
    render_report,
)
from xdrlvlm.synthfundus import KINDS, LesionSpec

VOCAB = build_vocab(grammar_corpus())


def test_grade_zero_template_is_exact():
    assert render_report(0, []) == \
        "diagnosis : no dr . findings : none . rationale : no diabetic lesions are observed ."


def test_proliferative_rationale():
    text = render_report(4, [Finding("neovascularization", "central")])
    rationale = text.split("rationale :")[1]
    assert "neovascularization" in rationale and "proliferative" in rationale


def test_inconsistent_grade_rejected():
    with pytest.raises(ReportError):
        render_report(1, [Finding("hemorrhage", "central")])
    with pytest.raises(ReportError):
        render_report(0, [Finding("microaneurysm", "central")])


def test_concept_answer_templates():
    assert render_concept_answer([]) == "no pathological concepts are present ."
    t = render_concept_answer([Finding("hard_exudate", "central")])
    assert "hard exudates" in t and "central" in t
    a = render_concept_answer([Finding("irma", "central"), Finding("microaneurysm", "superior nasal")])
    b = render_concept_answer([Finding("microaneurysm", "superior nasal"), Finding("irma", "central")])
    assert a == b and a.index("microaneurysms") < a.index("irma")


def test_location_rule():
    assert location_of((32.0, 32.0)) == "central"
    assert location_of((20.0, 45.0)) == "superior nasal"
    assert location_of((20.0, 10.0)) == "superior temporal"
    assert location_of((50.0, 45.0)) == "inferior nasal"
    assert location_of((50.0, 10.0)) == "inferior temporal"


def test_round_trip_and_injectivity_on_capped_enumeration():
    seen = set()
    for g, f in enumerate_valid(max_findings=2):
        text = render_report(g, f)
        assert text not in seen
        seen.add(text)
        r = parse_report(text)
        assert r.valid and r.grade == g
        assert r.concepts == frozenset(x.kind for x in f)
        assert r.locations == {x.kind: x.location for x in f}


def test_parse_failures_report_position():
    r = parse_report("hello world")
    assert not r.valid and r.error_pos == 0 and r.grade is None


def test_partial_credit_keeps_grade():
    r = parse_report("diagnosis : moderate dr . findings : hemorrhages central .")
    assert not r.valid and r.grade == 2
    r = parse_report("diagnosis : moderate dr findings")
    assert not r.valid and r.grade is None


def test_non_canonical_order_rejected():
    good = render_concept_answer([Finding("microaneurysm", "central"), Finding("hemorrhage", "central")])
    bad = good.replace("microaneurysms central , hemorrhages central", "hemorrhages central , microaneurysms central")
    assert parse_concept_answer(good).valid and not parse_concept_answer(bad).valid


def test_trailing_tokens_invalidate():
    assert not parse_report(render_report(0, []) + " dr").valid
    assert not parse_concept_answer("no pathological concepts are present . .").valid


def test_combined_parse():
    f = [Finding("microaneurysm", "central")]
    rep, con = parse_combined(render_report(1, f) + " " + render_concept_answer(f))
    assert rep.valid and rep.grade == 1 and con.valid and con.concepts == {"microaneurysm"}
    rep, con = parse_combined(render_report(1, f))
    assert rep.valid and not con.valid


word_lists = st.lists(st.sampled_from(VOCAB.words[4:] + ["zebra", "."]), max_size=40)


@settings(max_examples=200, deadline=None)
@given(word_lists)
def test_parsers_never_raise(words):
    text = " ".join(words)
    for fn in (parse_report, parse_concept_answer):
        r = fn(text)
        assert isinstance(r.valid, bool)
    parse_combined(text)


# -- vocabulary ------------------------------------------------------------
def test_vocab_from_tiny_corpus():
    v = build_vocab(["no dr"])
    assert v.words == ["<bos>", "<eos>", "<pad>", "<img>", "dr", "no"]
    assert build_vocab(grammar_corpus()).words == VOCAB.words


def test_tokenize_canonicalises():
    assert detokenize(tokenize("No DR .", VOCAB), VOCAB) == "no dr ."
    assert tokenize("", VOCAB) == []
    with pytest.raises(OOVError, match="zebra"):
        tokenize("no zebra", VOCAB)


def test_vocab_closure_and_lossless_round_trip():
    for g, f in enumerate_valid(max_findings=2):
        for text in (render_report(g, f), render_concept_answer(f)):
            assert detokenize(tokenize(text, VOCAB), VOCAB) == canonical(text)


def test_captions_are_in_vocabulary():
    lesions = [LesionSpec("hemorrhage", (20.0, 20.0), 2)] * 3 + [LesionSpec("irma", (40.0, 40.0), 4)]
    cap = render_caption(lesions)
    assert cap.startswith("severe dr . 3 hemorrhages superior temporal")
    tokenize(cap, VOCAB)


def test_vocab_size_is_small_and_closed():
    assert 60 < len(VOCAB) < 200
    assert set(KINDS) and all(w == w.lower() for w in VOCAB.words[4:])


def test_grammar_file_is_shipped():
    text = resources.files("xdrlvlm").joinpath("grammar.ebnf").read_text()
    for loc in LOCATIONS:
        assert all(w in text for w in loc.split())
    assert "report" in text and "concept_answer" in text
