"""Template rendering of three-part diagnostic reports and their strict inverse.

Report shape::

    diagnosis : <grade phrase> . findings : <finding list | none> . rationale : <clause> .

Findings are listed in the fixed concept order, one location per concept.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

from .synthfundus import CENTER, KINDS, LesionSpec

GRADE_PHRASES = ("no dr", "mild dr", "moderate dr", "severe dr", "proliferative dr")
CONCEPT_PHRASES = {
    "microaneurysm": "microaneurysms",
    "hemorrhage": "hemorrhages",
    "hard_exudate": "hard exudates",
    "soft_exudate": "soft exudates",
    "neovascularization": "neovascularization",
    "irma": "irma",
}
LOCATIONS = ("superior temporal", "superior nasal", "inferior temporal", "inferior nasal", "central")
CENTRAL_RADIUS = 10.0
NO_CONCEPTS = "no pathological concepts are present ."

# kinds that can push a lesion set to severe depending on counts / presence
_SEVERE_CAPABLE = ("hemorrhage", "soft_exudate", "irma")
_MODERATE_KINDS = ("hemorrhage", "hard_exudate", "soft_exudate")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Finding:
    kind: str
    location: str


@dataclass
class DiagnosticReport:
    severity: int
    findings: list[Finding]
    rationale: str


@dataclass
class ParseResult:
    valid: bool
    grade: int | None = None
    concepts: frozenset = field(default_factory=frozenset)
    locations: dict = field(default_factory=dict)
    error_pos: int | None = None

    def concept_flags(self) -> tuple[bool, ...]:
        return tuple(k in self.concepts for k in KINDS)


# -- locations ------------------------------------------------------------
def location_of(center) -> str:
    """Quadrant by sign of (row-32, col-32); "central" within 10 px of the centre.

    Rows above the centre are superior; columns right of it (the optic-disc side)
    are nasal.  Zero offsets fall to inferior / nasal.
    """
    dr, dc = center[0] - CENTER[0], center[1] - CENTER[1]
    if dr * dr + dc * dc < CENTRAL_RADIUS**2:
        return "central"
    vert = "superior" if dr < 0 else "inferior"
    horiz = "temporal" if dc < 0 else "nasal"
    return f"{vert} {horiz}"


def findings_from_lesions(lesions) -> list[Finding]:
    """One finding per present kind, located at that kind's most frequent region."""
    out = []
    for kind in KINDS:
        locs = Counter(location_of(l.center) for l in lesions if l.kind == kind)
        if locs:
            best = max(LOCATIONS, key=lambda loc: (locs[loc], -LOCATIONS.index(loc)))
            out.append(Finding(kind, best))
    return out


def _canonical(findings) -> list[Finding]:
    findings = [f if isinstance(f, Finding) else Finding(*f) for f in findings]
    kinds = [f.kind for f in findings]
    if len(set(kinds)) != len(kinds):
        raise ReportError(f"duplicate concepts in findings: {kinds}")
    for f in findings:
        if f.kind not in KINDS:
            raise ReportError(f"unknown concept {f.kind!r}")
        if f.location not in LOCATIONS:
            raise ReportError(f"unknown location {f.location!r}")
    return sorted(findings, key=lambda f: KINDS.index(f.kind))


def consistent(grade: int, kinds) -> bool:
    """Whether some lesion multiset with exactly these kinds has this grade."""
    k = set(kinds)
    if grade == 4:
        return "neovascularization" in k
    if "neovascularization" in k:
        return False
    if grade == 3:
        return bool(k & set(_SEVERE_CAPABLE))
    if grade == 2:
        return "irma" not in k and bool(k & set(_MODERATE_KINDS))
    if grade == 1:
        return k == {"microaneurysm"}
    return grade == 0 and not k


def _join(words: list[str]) -> str:
    if len(words) == 1:
        return words[0]
    return " , ".join(words[:-1]) + " and " + words[-1]


def rationale(grade: int, kinds) -> str:
    k = set(kinds)
    if grade == 0:
        return "no diabetic lesions are observed"
    if grade == 1:
        return "microaneurysms only indicate mild non-proliferative dr"
    if grade == 2:
        present = [CONCEPT_PHRASES[x] for x in _MODERATE_KINDS if x in k]
        return f"{_join(present)} without severe features indicate moderate non-proliferative dr"
    if grade == 3:
        present = [CONCEPT_PHRASES[x] for x in _SEVERE_CAPABLE if x in k]
        return f"extensive {_join(present)} indicate severe non-proliferative dr"
    return "neovascularization indicates proliferative dr"


def _finding_list(findings: list[Finding]) -> str:
    return " , ".join(f"{CONCEPT_PHRASES[f.kind]} {f.location}" for f in findings)


def render_report(grade: int, findings) -> str:
    findings = _canonical(findings)
    kinds = [f.kind for f in findings]
    if grade not in range(5) or not consistent(grade, kinds):
        raise ReportError(f"grade {grade} is inconsistent with findings {kinds}")
    flist = _finding_list(findings) if findings else "none"
    return f"diagnosis : {GRADE_PHRASES[grade]} . findings : {flist} . rationale : {rationale(grade, kinds)} ."


def render_concept_answer(findings) -> str:
    findings = _canonical(findings)
    if not findings:
        return NO_CONCEPTS
    return f"pathological concepts : {_finding_list(findings)} ."


def render_caption(lesions) -> str:
    """Stage-1 caption: grade phrase plus lesion counts per kind and region."""
    from .synthfundus import grade_from_lesions

    grade = grade_from_lesions(lesions)
    per = Counter((l.kind, location_of(l.center)) for l in lesions)
    parts = [f"{per[(k, loc)]} {CONCEPT_PHRASES[k]} {loc}" for k in KINDS for loc in LOCATIONS if per[(k, loc)]]
    body = " , ".join(parts) if parts else "no lesions"
    return f"{GRADE_PHRASES[grade]} . {body} ."


def report_for_sample(sample) -> str:
    return render_report(sample.grade, findings_from_lesions(sample.lesions))


def concept_answer_for_sample(sample) -> str:
    return render_concept_answer(findings_from_lesions(sample.lesions))


# -- parsing --------------------------------------------------------------
class _Fail(Exception):
    def __init__(self, pos: int):
        self.pos = pos


@lru_cache(maxsize=None)
@lru_cache(maxsize=None)
def _phrase_table(phrases: tuple[str, ...]) -> dict[str, list]:
    """First token -> [(tokens, phrase)], longest first."""
    table: dict[str, list] = {}
    for p in phrases:
        words = tuple(p.split())
        table.setdefault(words[0], []).append((words, p))
    for v in table.values():
        v.sort(key=lambda e: -len(e[0]))
    return table


@lru_cache(maxsize=None)
def _rationale_tokens(grade: int, kinds: frozenset) -> list[str]:
    return _tokens(rationale(grade, kinds))


class _Cursor:
    def __init__(self, toks: list[str], pos: int = 0):
        self.toks = toks
        self.pos = pos

    def peek(self, n: int = 1) -> list[str]:
        return self.toks[self.pos:self.pos + n]

    def expect(self, *words: str) -> None:
        for w in words:
            if self.pos >= len(self.toks) or self.toks[self.pos] != w:
                raise _Fail(self.pos)
            self.pos += 1

    def choose(self, phrases: tuple[str, ...]) -> str:
        """Longest phrase matching at the cursor."""
        if self.pos < len(self.toks):
            for words, phrase in _phrase_table(phrases).get(self.toks[self.pos], ()):
                n = len(words)
                if n == 1 or tuple(self.toks[self.pos:self.pos + n]) == words:
                    self.pos += n
                    return phrase
        raise _Fail(self.pos)

    def at_end(self) -> bool:
        return self.pos == len(self.toks)


_PHRASE_TO_KIND = {v: k for k, v in CONCEPT_PHRASES.items()}
_CONCEPT_PHRASE_LIST = tuple(CONCEPT_PHRASES.values())
_KIND_RANK = {k: i for i, k in enumerate(KINDS)}


def _parse_finding_list(cur: _Cursor) -> list[Finding]:
    out = []
    while True:
        kind = _PHRASE_TO_KIND[cur.choose(_CONCEPT_PHRASE_LIST)]
        if out and _KIND_RANK[kind] <= _KIND_RANK[out[-1].kind]:
            # only the canonical concept order is grammatical
            raise _Fail(cur.pos - len(CONCEPT_PHRASES[kind].split()))
        out.append(Finding(kind, cur.choose(LOCATIONS)))
        if cur.peek() != [","]:
            return out
        cur.expect(",")


def _result(grade, findings, valid, pos=None) -> ParseResult:
    return ParseResult(valid, grade, frozenset(f.kind for f in findings),
                       {f.kind: f.location for f in findings}, pos)


def _tokens(text: str) -> list[str]:
    from .lvlm.vocab import canonical_tokens

    return canonical_tokens(text)


def _parse_report_at(cur: _Cursor) -> ParseResult:
    grade = None
    findings: list[Finding] = []
    try:
        cur.expect("diagnosis", ":")
        grade = GRADE_PHRASES.index(cur.choose(GRADE_PHRASES))
        cur.expect(".")
    except _Fail as e:
        return ParseResult(False, None, error_pos=e.pos)
    try:
        cur.expect("findings", ":")
        if cur.peek() == ["none"]:
            cur.expect("none")
        else:
            findings = _parse_finding_list(cur)
        cur.expect(".")
        kinds = [f.kind for f in findings]
        if not consistent(grade, kinds):
            raise _Fail(cur.pos)
        cur.expect("rationale", ":", *_rationale_tokens(grade, frozenset(kinds)), ".")
    except _Fail as e:
        # diagnosis sentence was intact: keep the grade, report the failure
        return ParseResult(False, grade, error_pos=e.pos)
    return _result(grade, findings, True)


def parse_report(text: str) -> ParseResult:
    """Strict parse of a rendered report; never raises on arbitrary text."""
    cur = _Cursor(_tokens(text))
    res = _parse_report_at(cur)
    if res.valid and not cur.at_end():
        return ParseResult(False, res.grade, error_pos=cur.pos)
    return res


def _parse_concepts_at(cur: _Cursor) -> ParseResult:
    try:
        if cur.peek() == ["no"]:
            cur.expect(*_tokens(NO_CONCEPTS))
            return _result(None, [], True)
        cur.expect("pathological", "concepts", ":")
        findings = _parse_finding_list(cur)
        cur.expect(".")
    except _Fail as e:
        return ParseResult(False, error_pos=e.pos)
    return _result(None, findings, True)


def parse_concept_answer(text: str) -> ParseResult:
    cur = _Cursor(_tokens(text))
    res = _parse_concepts_at(cur)
    if res.valid and not cur.at_end():
        return ParseResult(False, error_pos=cur.pos)
    return res


def parse_combined(text: str) -> tuple[ParseResult, ParseResult]:
    """Parse a report immediately followed by a concept answer (generic-prompt target)."""
    cur = _Cursor(_tokens(text))
    rep = _parse_report_at(cur)
    if not rep.valid:
        return rep, ParseResult(False, error_pos=rep.error_pos)
    con = _parse_concepts_at(cur)
    if con.valid and not cur.at_end():
        con = ParseResult(False, error_pos=cur.pos)
    return rep, con


# -- enumeration ----------------------------------------------------------
def enumerate_valid(max_findings: int | None = None):
    """Yield every consistent (grade, findings) pair, optionally capping findings per report."""
    for r in range(len(KINDS) + 1):
        if max_findings is not None and r > max_findings:
            break
        for kinds in itertools.combinations(KINDS, r):
            grades = [g for g in range(5) if consistent(g, kinds)]
            if not grades:
                continue
            for locs in itertools.product(LOCATIONS, repeat=r):
                findings = [Finding(k, loc) for k, loc in zip(kinds, locs)]
                for g in grades:
                    yield g, findings


def grammar_corpus(max_count: int = 40) -> list[str]:
    """Strings covering every word any template can emit (used to build the vocabulary)."""
    from .lvlm.prompts import PROMPTS

    texts = list(PROMPTS.values())
    all_findings = [Finding(k, loc) for k, loc in zip(KINDS, itertools.cycle(LOCATIONS))]
    for kinds_r in range(len(KINDS) + 1):
        for kinds in itertools.combinations(KINDS, kinds_r):
            for g in range(5):
                if consistent(g, kinds):
                    texts.append(render_report(g, [f for f in all_findings if f.kind in kinds]))
    texts.append(render_concept_answer([]))
    texts.append(render_concept_answer([Finding(k, loc) for k in KINDS for loc in LOCATIONS[:1]]))
    texts.extend(LOCATIONS)
    texts.append("no lesions . " + " ".join(str(i) for i in range(1, max_count + 1)))
    return texts


def lesion_counts_fit(lesions, max_count: int = 40) -> bool:
    per = Counter((l.kind, location_of(l.center)) for l in lesions)
    return max(per.values(), default=0) <= max_count


__all__ = [
    "DiagnosticReport", "Finding", "ParseResult", "ReportError", "GRADE_PHRASES", "CONCEPT_PHRASES", "LOCATIONS",
    "location_of", "findings_from_lesions", "render_report", "render_concept_answer", "render_caption",
    "parse_report", "parse_concept_answer", "parse_combined", "enumerate_valid", "grammar_corpus", "consistent",
]
