"""Content analysis of planning rationales: classify sentences into six
cognitive categories by marker phrases, count format errors, compare policy
variants, and export a random verification sample.

Classification is purely lexical. A category applies to a sentence when at
least one of its marker patterns matches (case-insensitive, word-bounded);
sentences can carry several categories. Patterns are literal phrases plus two
template forms: "..." for a bounded word gap ("If ... then") and X/Y for
short value slots ("increase from X to Y").
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TraceReadError

#: Maximum words allowed inside a "..." template gap.
TEMPLATE_GAP_WORDS = 12
#: Maximum tokens a value placeholder (X or Y) may span.
VALUE_SLOT_TOKENS = 3


class CognitiveCategory(str, Enum):
    PROBLEM_DECOMPOSITION = "ProblemDecomposition"
    PROSPECTIVE_VERIFICATION = "ProspectiveVerification"
    SELF_CORRECTION = "SelfCorrection"
    MATHEMATICAL_REASONING = "MathematicalReasoning"
    TRADE_OFF_DELIBERATION = "TradeOffDeliberation"
    FORWARD_SIMULATION = "ForwardSimulation"


#: Shipped marker lexicon. Each category lists its canonical marker phrases;
#: lexicon files may extend or replace these.
DEFAULT_LEXICON: dict[str, list[str]] = {
    CognitiveCategory.PROBLEM_DECOMPOSITION.value: [
        "First",
        "then",
        "next",
        "I will start by",
    ],
    CognitiveCategory.PROSPECTIVE_VERIFICATION.value: [
        "If ... then",
        "would exceed",
        "checking whether",
        "to make sure V12Gy stays under",
    ],
    CognitiveCategory.SELF_CORRECTION.value: [
        "reverting",
        "instead",
        "previous attempt",
        "I will revise",
        "This assumption was incorrect",
    ],
    CognitiveCategory.MATHEMATICAL_REASONING.value: [
        "delta",
        "fraction",
        "greater than",
        "increase from X to Y",
    ],
    CognitiveCategory.TRADE_OFF_DELIBERATION.value: [
        "balance",
        "prioritize",
        "versus",
        "at the cost of",
    ],
    CognitiveCategory.FORWARD_SIMULATION.value: [
        "will cause",
        "expected to",
        "will result in",
    ],
}


def _pattern_to_regex(pattern: str) -> re.Pattern:
    pattern = pattern.replace("...", " ... ")
    tokens = [t for t in pattern.split() if t]
    if not tokens:
        raise ValueError("empty marker pattern")
    body = ""
    for i, tok in enumerate(tokens):
        if tok == "...":
            body += r"(?:\W+\w+){0,%d}?\W+" % TEMPLATE_GAP_WORDS
        elif tok in ("X", "Y"):
            body += r"\S+(?:\s+\S+){0,%d}?" % (VALUE_SLOT_TOKENS - 1)
            if i < len(tokens) - 1:
                body += r"\s+"
        else:
            body += re.escape(tok)
            if i < len(tokens) - 1 and tokens[i + 1] != "...":
                body += r"\s+"
    return re.compile(r"\b" + body + r"\b", re.IGNORECASE)


@dataclass
class MarkerLexicon:
    patterns: dict[str, list[str]]
    _compiled: dict[str, list[re.Pattern]] = field(init=False, repr=False)

    def __post_init__(self):
        categories = {c.value for c in CognitiveCategory}
        unknown = set(self.patterns) - categories
        if unknown:
            raise ValueError(f"lexicon has unknown categories: {sorted(unknown)}")
        missing = categories - set(self.patterns)
        if missing:
            raise ValueError(f"lexicon is missing categories: {sorted(missing)}")
        for cat, plist in self.patterns.items():
            if not plist or any(not p.strip() for p in plist):
                raise ValueError(f"category {cat} needs at least one non-empty pattern")
        self._compiled = {cat: [_pattern_to_regex(p) for p in plist] for cat, plist in self.patterns.items()}

    @classmethod
    def default(cls) -> "MarkerLexicon":
        return cls({k: list(v) for k, v in DEFAULT_LEXICON.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "MarkerLexicon":
        return cls(json.loads(Path(path).read_text()))

    def to_file(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.patterns, indent=1, sort_keys=True))
        return path

    def matches(self, text: str) -> set[CognitiveCategory]:
        found = set()
        for cat, regexes in self._compiled.items():
            if any(r.search(text) for r in regexes):
                found.add(CognitiveCategory(cat))
        return found


def classify_utterance(text: str, lexicon: MarkerLexicon) -> set[CognitiveCategory]:
    """Categories whose markers appear in the sentence; empty text -> empty set."""
    if not text or not text.strip():
        return set()
    return lexicon.matches(text)


# ---------------------------------------------------------------------------
# Sentence splitting
# ---------------------------------------------------------------------------

_ABBREVIATIONS = ("e.g", "i.e", "vs", "etc", "cf", "dr", "fig", "no", "approx", "resp")
_SENTENCE_END = re.compile(r"[.!?]+(?=\s|$)")


def split_sentences(text: str) -> list[str]:
    """Terminal-punctuation splitting with abbreviation and decimal guards."""
    sentences = []
    for chunk in text.splitlines():
        chunk = chunk.strip()
        if not chunk:
            continue
        start = 0
        for m in _SENTENCE_END.finditer(chunk):
            prefix = chunk[start : m.start()]
            last_word = prefix.rsplit(None, 1)[-1].lower() if prefix.split() else ""
            if last_word.rstrip(".") in _ABBREVIATIONS:
                continue
            sentence = chunk[start : m.end()].strip()
            if sentence:
                sentences.append(sentence)
            start = m.end()
        tail = chunk[start:].strip()
        if tail:
            sentences.append(tail)
    return sentences


# ---------------------------------------------------------------------------
# Session analysis
# ---------------------------------------------------------------------------

@dataclass
class UtteranceAssignment:
    utterance_id: str
    session_id: str
    text: str
    categories: tuple[CognitiveCategory, ...]


@dataclass
class TraceAnalysis:
    session_id: str
    category_counts: dict[CognitiveCategory, int]
    format_error_count: int
    assignments: list[UtteranceAssignment]

    @property
    def total_instances(self) -> int:
        return sum(self.category_counts.values())


def analyze_rows(session_id: str, rows: Sequence[dict], lexicon: MarkerLexicon) -> TraceAnalysis:
    counts = {c: 0 for c in CognitiveCategory}
    assignments = []
    format_errors = 0
    for ordinal, row in enumerate(rows):
        if row.get("format_error"):
            format_errors += 1
        rationale = row.get("rationale") or ""
        for k, sentence in enumerate(split_sentences(rationale)):
            cats = tuple(sorted(classify_utterance(sentence, lexicon), key=lambda c: c.value))
            uid = f"{session_id}:r{row.get('round', 0)}:i{row.get('index', 0)}:u{ordinal}:{k}"
            assignments.append(UtteranceAssignment(uid, session_id, sentence, cats))
            for c in cats:
                counts[c] += 1
    return TraceAnalysis(
        session_id=session_id,
        category_counts=counts,
        format_error_count=format_errors,
        assignments=assignments,
    )


def read_trace_file(path: str | Path) -> list[dict]:
    path = Path(path)
    rows = []
    try:
        with path.open() as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise TraceReadError(f"{path}:{line_no}: {exc}") from exc
    except OSError as exc:
        raise TraceReadError(f"cannot read {path}: {exc}") from exc
    return rows


def analyze_session(path: str | Path, lexicon: MarkerLexicon | None = None) -> TraceAnalysis:
    """Analyze one trace log file (JSONL of iteration rows)."""
    path = Path(path)
    lexicon = lexicon or MarkerLexicon.default()
    rows = read_trace_file(path)
    session_id = rows[0]["session_id"] if rows else path.parent.name
    return analyze_rows(session_id, rows, lexicon)


def find_trace_files(root: str | Path) -> list[Path]:
    """Trace logs under a directory: session-store layout or loose JSONL."""
    root = Path(root)
    if root.is_file():
        return [root]
    files = sorted(root.glob("*/trace.jsonl")) + sorted(root.glob("*.jsonl"))
    return files


def analyze_logs(root: str | Path, lexicon: MarkerLexicon | None = None) -> list[TraceAnalysis]:
    lexicon = lexicon or MarkerLexicon.default()
    return [analyze_session(f, lexicon) for f in find_trace_files(root)]


# ---------------------------------------------------------------------------
# Verification sampling
# ---------------------------------------------------------------------------

def sample_for_review(
    analyses: Iterable[TraceAnalysis],
    fraction: float = 0.10,
    seed: int = 0,
) -> list[tuple[UtteranceAssignment, CognitiveCategory]]:
    """Uniform sample without replacement of ceil(fraction * N) of the
    (utterance, category) assignment pairs, deterministic per seed."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    pairs = [
        (assignment, category)
        for analysis in analyses
        for assignment in analysis.assignments
        for category in assignment.categories
    ]
    if not pairs or fraction == 0.0:
        return []
    k = math.ceil(fraction * len(pairs))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=k, replace=False)
    return [pairs[i] for i in sorted(int(i) for i in chosen)]


def write_review_sample(
    sample: list[tuple[UtteranceAssignment, CognitiveCategory]],
    path: str | Path,
) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "session_id", "category", "utterance", "reviewer_verdict"])
        for assignment, category in sample:
            writer.writerow([assignment.utterance_id, assignment.session_id, category.value, assignment.text, ""])
    return path


# ---------------------------------------------------------------------------
# Variant comparison
# ---------------------------------------------------------------------------

@dataclass
class CategoryComparison:
    category: CognitiveCategory
    count_a: int
    count_b: int
    share_a: float | None  # a / (a + b); None when both zero
    exclusive: str | None  # "a" or "b" when one side is zero and the other is not


@dataclass
class VariantComparison:
    rows: list[CategoryComparison]
    total_a: int
    total_b: int
    overall_share_a: float | None
    format_errors_a: list[int]  # per session, aligned with session_ids
    format_errors_b: list[int]
    median_format_errors_a: float
    median_format_errors_b: float
    session_ids: list[str]


def compare_variants(
    analyses_a: Sequence[TraceAnalysis],
    analyses_b: Sequence[TraceAnalysis],
) -> VariantComparison:
    """Category totals, instance shares, exclusivity flags, and per-session
    format-error medians for two variants over the same case set."""
    ids_a = sorted(a.session_id for a in analyses_a)
    ids_b = sorted(b.session_id for b in analyses_b)
    if len(ids_a) != len(ids_b):
        raise ValueError(f"variant analyses cover {len(ids_a)} vs {len(ids_b)} sessions")

    rows = []
    for cat in CognitiveCategory:
        a = sum(x.category_counts.get(cat, 0) for x in analyses_a)
        b = sum(x.category_counts.get(cat, 0) for x in analyses_b)
        share = a / (a + b) if (a + b) else None
        exclusive = None
        if a == 0 and b > 0:
            exclusive = "b"
        elif b == 0 and a > 0:
            exclusive = "a"
        rows.append(CategoryComparison(cat, a, b, share, exclusive))

    total_a = sum(r.count_a for r in rows)
    total_b = sum(r.count_b for r in rows)
    errors_a = [x.format_error_count for x in sorted(analyses_a, key=lambda x: x.session_id)]
    errors_b = [x.format_error_count for x in sorted(analyses_b, key=lambda x: x.session_id)]
    return VariantComparison(
        rows=rows,
        total_a=total_a,
        total_b=total_b,
        overall_share_a=total_a / (total_a + total_b) if (total_a + total_b) else None,
        format_errors_a=errors_a,
        format_errors_b=errors_b,
        median_format_errors_a=float(np.median(errors_a)) if errors_a else 0.0,
        median_format_errors_b=float(np.median(errors_b)) if errors_b else 0.0,
        session_ids=ids_a,
    )


def write_comparison_csv(comparison: VariantComparison, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "count_a", "count_b", "share_a", "exclusive"])
        for r in comparison.rows:
            writer.writerow(
                [
                    r.category.value,
                    r.count_a,
                    r.count_b,
                    "" if r.share_a is None else f"{r.share_a:.4f}",
                    r.exclusive or "",
                ]
            )
        writer.writerow(
            [
                "TOTAL",
                comparison.total_a,
                comparison.total_b,
                "" if comparison.overall_share_a is None else f"{comparison.overall_share_a:.4f}",
                "",
            ]
        )
        writer.writerow([])
        writer.writerow(["median_format_errors_a", comparison.median_format_errors_a])
        writer.writerow(["median_format_errors_b", comparison.median_format_errors_b])
    return path


def write_counts_csv(analyses: Sequence[TraceAnalysis], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session_id"] + [c.value for c in CognitiveCategory] + ["format_errors"])
        for a in sorted(analyses, key=lambda x: x.session_id):
            writer.writerow(
                [a.session_id]
                + [a.category_counts.get(c, 0) for c in CognitiveCategory]
                + [a.format_error_count]
            )
    return path
