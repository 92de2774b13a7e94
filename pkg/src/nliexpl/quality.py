"""Data-quality tooling: uninformative-explanation filtering and
annotation-constraint validation.

An explanation is uninformative when its edit distance to any template,
instantiated with the full premise/hypothesis, falls strictly below 10
characters. Distances are computed after normalization (lowercase,
whitespace runs collapsed, one trailing period stripped) so casing and
punctuation noise cannot dominate a character-level metric.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

PREMISE_SLOT = "<PREMISE>"
HYPOTHESIS_SLOT = "<HYPOTHESIS>"
FILTER_THRESHOLD = 10

LABEL_CLASSES = ("general", "entailment", "neutral", "contradiction")


@dataclass(frozen=True)
class Template:
    """An uninformative-explanation frame for one label class."""

    label_class: str
    pattern: str


_GENERAL = [
    "<PREMISE>",
    "<HYPOTHESIS>",
    "<HYPOTHESIS> <PREMISE>",
    "<PREMISE> <HYPOTHESIS>",
    "Sentence 1 states <PREMISE>. Sentence 2 is stating <HYPOTHESIS>",
    "Sentence 2 states <HYPOTHESIS>. Sentence 1 is stating <PREMISE>",
    "There is <PREMISE>",
    "There is <HYPOTHESIS>",
]

_ENTAILMENT = [
    "<PREMISE> implies <HYPOTHESIS>",
    "If <PREMISE> then <HYPOTHESIS>",
    "<PREMISE> would imply <HYPOTHESIS>",
    "<HYPOTHESIS> is a rephrasing of <PREMISE>",
    "<PREMISE> is a rephrasing of <HYPOTHESIS>",
    "In both sentences <HYPOTHESIS>",
    "<PREMISE> would be <HYPOTHESIS>",
    "<PREMISE> can also be said as <HYPOTHESIS>",
    "<HYPOTHESIS> can also be said as <PREMISE>",
    "<HYPOTHESIS> is a less specific rephrasing of <PREMISE>",
    "This clarifies that <HYPOTHESIS>",
    "If <PREMISE> it means <HYPOTHESIS>",
    "<HYPOTHESIS> in both sentences",
    "<HYPOTHESIS> in both",
    "<HYPOTHESIS> is same as <PREMISE>",
    "<PREMISE> is same as <HYPOTHESIS>",
    "<PREMISE> is a synonym of <HYPOTHESIS>",
    "<HYPOTHESIS> is a synonym of <PREMISE>.",
]

_NEUTRAL = [
    "Just because <PREMISE> doesn't mean <HYPOTHESIS>",
    "Cannot infer the <HYPOTHESIS>",
    "One cannot assume <HYPOTHESIS>",
    "One cannot infer that <HYPOTHESIS>",
    "Cannot assume <HYPOTHESIS>",
    "<PREMISE> does not mean <HYPOTHESIS>",
    "We don't know that <HYPOTHESIS>",
    "The fact that <PREMISE> doesn't mean <HYPOTHESIS>",
    "The fact that <PREMISE> does not imply <HYPOTHESIS>",
    "The fact that <PREMISE> does not always mean <HYPOTHESIS>",
    "The fact that <PREMISE> doesn't always imply <HYPOTHESIS>.",
]

_CONTRADICTION = [
    "In sentence 1 <PREMISE> while in sentence 2 <HYPOTHESIS>",
    "It can either be <PREMISE> or <HYPOTHESIS>",
    "It cannot be <HYPOTHESIS> if <PREMISE>",
    "Either <PREMISE> or <HYPOTHESIS>",
    "Either <HYPOTHESIS> or <PREMISE>",
    "<PREMISE> and other <HYPOTHESIS>",
    "<HYPOTHESIS> and other <PREMISE>",
    "<HYPOTHESIS> after <PREMISE>",
    "<PREMISE> is not the same as <HYPOTHESIS>",
    "<HYPOTHESIS> is not the same as <PREMISE>",
    "<PREMISE> is contradictory to <HYPOTHESIS>",
    "<HYPOTHESIS> is contradictory to <PREMISE>",
    "<PREMISE> contradicts <HYPOTHESIS>",
    "<HYPOTHESIS> contradicts <PREMISE>",
    "<PREMISE> cannot also be <HYPOTHESIS>",
    "<HYPOTHESIS> cannot also be <PREMISE>",
    # the shipped list intentionally repeats one frame
    "Either <PREMISE> or <HYPOTHESIS>",
    "Either <PREMISE> or <HYPOTHESIS> not both at the same time",
    "<PREMISE> or <HYPOTHESIS> not both at the same time.",
]

TEMPLATES: tuple[Template, ...] = tuple(
    [Template("general", p) for p in _GENERAL]
    + [Template("entailment", p) for p in _ENTAILMENT]
    + [Template("neutral", p) for p in _NEUTRAL]
    + [Template("contradiction", p) for p in _CONTRADICTION]
)

_WS_RUN = re.compile(r"\s+")
_OPTIONAL = re.compile(r"\(([^()]*)\)")


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace runs, strip one trailing period."""
    text = _WS_RUN.sub(" ", text.strip()).lower()
    if text.endswith("."):
        text = text[:-1].rstrip()
    return text


def edit_distance(a: str, b: str, limit: int | None = None) -> int:
    """Character-level Levenshtein distance with unit costs.

    With `limit`, any true distance >= limit is reported as `limit`
    (banded early exit; row minima never decrease, so bailing out once a
    full row sits at or above the limit is sound).
    """
    if a == b:
        return 0
    la, lb = len(a), len(b)
    if limit is not None and abs(la - lb) >= limit:
        return limit
    if lb > la:
        a, b, la, lb = b, a, lb, la
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        ca = a[i - 1]
        cur = [i] + [0] * lb
        row_min = i
        for j in range(1, lb + 1):
            cost = 0 if ca == b[j - 1] else 1
            v = prev[j] + 1
            w = cur[j - 1] + 1
            if w < v:
                v = w
            w = prev[j - 1] + cost
            if w < v:
                v = w
            cur[j] = v
            if v < row_min:
                row_min = v
        if limit is not None and row_min >= limit:
            return limit
        prev = cur
    d = prev[lb]
    if limit is not None and d > limit:
        return limit
    return d


def expand_pattern(pattern: str) -> list[str]:
    """Materialize template variants.

    Parenthesized subphrases are optional (expanded with and without);
    "/"-joined alternatives within a word expand one variant per option.
    Placeholder tokens are never split.
    """
    variants = [pattern]
    while True:
        nxt = []
        changed = False
        for v in variants:
            m = _OPTIONAL.search(v)
            if m is None:
                nxt.append(v)
                continue
            changed = True
            nxt.append(v[:m.start()] + m.group(1) + v[m.end():])
            nxt.append(v[:m.start()] + v[m.end():])
        variants = nxt
        if not changed:
            break
    out = []
    for v in variants:
        words = v.split(" ")
        choices = [w.split("/") if "/" in w and "<" not in w else [w]
                   for w in words]
        for combo in itertools.product(*choices):
            s = _WS_RUN.sub(" ", " ".join(combo)).strip()
            if s and s not in out:
                out.append(s)
    return out


def instantiate_templates(premise: str, hypothesis: str, label: str) -> list[str]:
    """All general templates plus the given label class's templates,
    expanded and with the placeholders replaced by the full sentences."""
    if label not in LABEL_CLASSES:
        raise ValueError(f"unknown label class {label!r}")
    out = []
    for tpl in TEMPLATES:
        if tpl.label_class not in ("general", label):
            continue
        for variant in expand_pattern(tpl.pattern):
            out.append(variant.replace(PREMISE_SLOT, premise)
                       .replace(HYPOTHESIS_SLOT, hypothesis))
    return out


@dataclass
class FilterResult:
    uninformative: bool
    nearest_template: str
    distance: int


def is_uninformative(explanation: str, premise: str, hypothesis: str,
                     label: str, threshold: int = FILTER_THRESHOLD) -> FilterResult:
    """True iff the normalized explanation sits strictly below
    `threshold` edits from some instantiated template."""
    norm_expl = normalize(explanation)
    best_d: int | None = None
    best_t = ""
    for candidate in instantiate_templates(premise, hypothesis, label):
        d = edit_distance(norm_expl, normalize(candidate), limit=best_d)
        if best_d is None or d < best_d:
            best_d, best_t = d, candidate
            if best_d == 0:
                break
    return FilterResult(uninformative=best_d < threshold,
                        nearest_template=best_t, distance=best_d)


# ---------------------------------------------------------------------------
# Annotation validation

TOO_SHORT = "too-short"
COPY_OF_PREMISE = "copy-of-premise"
COPY_OF_HYPOTHESIS = "copy-of-hypothesis"
MISSING_PREMISE_HIGHLIGHT = "missing-premise-highlight"
MISSING_HYPOTHESIS_HIGHLIGHT = "missing-hypothesis-highlight"
FORBIDDEN_PREMISE_HIGHLIGHT = "forbidden-premise-highlight"
HIGHLIGHTS_UNDERUSED = "highlights-underused"
NO_NON_HIGHLIGHTED_WORD = "no-non-highlighted-word"
INVALID_HIGHLIGHT_INDEX = "invalid-highlight-index"
UNVERIFIABLE_HIGHLIGHTS = "unverifiable-highlights"


@dataclass
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    example_id: str
    violations: list[Violation] = field(default_factory=list)
    unverifiable: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def _pick_words(tokens: list[str], indices: set[int], report, where: str, k: int):
    words = set()
    for i in sorted(indices):
        if 0 <= i < len(tokens):
            words.add(tokens[i])
        else:
            report.violations.append(Violation(
                INVALID_HIGHLIGHT_INDEX,
                f"explanation {k}: {where} highlight index {i} out of range"))
    return words


def validate_annotation(example) -> ValidationReport:
    """Check one Example against the annotation constraints.

    Rules per explanation: (1) at least 3 tokens; (2) not a copy of the
    premise or hypothesis; (3) label-specific highlight minima (and the
    neutral premise prohibition); (4) at least half the highlighted
    words appear in the explanation; (5) at least one explanation word
    is not highlighted. Explanations without any highlight annotation
    get an `unverifiable` marker for rules 3-5 instead of a failure.
    """
    report = ValidationReport(example_id=example.id)
    for k, tokens in enumerate(example.explanations):
        if len(tokens) < 3:
            report.violations.append(Violation(
                TOO_SHORT, f"explanation {k}: only {len(tokens)} tokens"))
        if tokens == example.premise:
            report.violations.append(Violation(
                COPY_OF_PREMISE, f"explanation {k}: copies the premise"))
        if tokens == example.hypothesis:
            report.violations.append(Violation(
                COPY_OF_HYPOTHESIS, f"explanation {k}: copies the hypothesis"))

        p_high = (example.premise_highlights[k]
                  if k < len(example.premise_highlights) else None)
        h_high = (example.hypothesis_highlights[k]
                  if k < len(example.hypothesis_highlights) else None)
        if p_high is None and h_high is None:
            report.unverifiable.append(UNVERIFIABLE_HIGHLIGHTS)
            continue
        p_high = p_high or set()
        h_high = h_high or set()

        if example.label == "entailment":
            if not p_high:
                report.violations.append(Violation(
                    MISSING_PREMISE_HIGHLIGHT,
                    f"explanation {k}: entailment requires a premise highlight"))
        elif example.label == "contradiction":
            if not p_high:
                report.violations.append(Violation(
                    MISSING_PREMISE_HIGHLIGHT,
                    f"explanation {k}: contradiction requires a premise highlight"))
            if not h_high:
                report.violations.append(Violation(
                    MISSING_HYPOTHESIS_HIGHLIGHT,
                    f"explanation {k}: contradiction requires a hypothesis highlight"))
        elif example.label == "neutral":
            if not h_high:
                report.violations.append(Violation(
                    MISSING_HYPOTHESIS_HIGHLIGHT,
                    f"explanation {k}: neutral requires a hypothesis highlight"))
            if p_high:
                report.violations.append(Violation(
                    FORBIDDEN_PREMISE_HIGHLIGHT,
                    f"explanation {k}: neutral must not highlight the premise"))

        words = _pick_words(example.premise, p_high, report, "premise", k)
        words |= _pick_words(example.hypothesis, h_high, report, "hypothesis", k)
        expl_words = set(tokens)
        if words:
            used = len(words & expl_words)
            if used * 2 < len(words):
                report.violations.append(Violation(
                    HIGHLIGHTS_UNDERUSED,
                    f"explanation {k}: uses {used}/{len(words)} highlighted words"))
        if tokens and not (expl_words - words):
            report.violations.append(Violation(
                NO_NON_HIGHLIGHTED_WORD,
                f"explanation {k}: contains only highlighted words"))
    return report


@dataclass
class FilterRow:
    """One explanation's filtering outcome, for the report CSV."""

    example_id: str
    explanation_index: int
    filtered: bool
    nearest_template: str
    distance: int


def filter_example(example, threshold: int = FILTER_THRESHOLD) -> list[FilterRow]:
    rows = []
    for k, text in enumerate(example.explanation_texts):
        res = is_uninformative(text, example.premise_text,
                               example.hypothesis_text, example.label,
                               threshold=threshold)
        rows.append(FilterRow(example.id, k, res.uninformative,
                              res.nearest_template, res.distance))
    return rows
