"""Essay corpus model: records, tokenisation, spans and IO labels.

Readers cover the three input shapes this project consumes: the scored-essay
TSV, the raw/segmented document pair used for discourse-unit training, and
character-span annotation files used for argument-component training.
"""

from __future__ import annotations

import csv
import io
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Optional

from .errors import AlignmentError, ContractError, FormatError, ValidationError

SPECIAL_TOKENS = ("[PROMPT]", "[ESSAY]", "[EDU]", "[AC]", "[PAD]", "[UNK]")
UNK = "[UNK]"

# sentinel char offset carried by inserted special tokens
NO_OFFSET = (-1, -1)

LABEL_O = 0
LABEL_I = 1


@dataclass(frozen=True)
class ScoreRange:
    essay_set: int
    min_score: int
    max_score: int

    def __post_init__(self):
        if self.min_score >= self.max_score:
            raise ValidationError(
                f"score range for set {self.essay_set}: min {self.min_score} must be below max {self.max_score}"
            )

    def __contains__(self, score: int) -> bool:
        return self.min_score <= score <= self.max_score

    @property
    def n_categories(self) -> int:
        return self.max_score - self.min_score + 1


# per-set resolved-score ranges of the eight essay sets
DEFAULT_SCORE_RANGES: dict[int, ScoreRange] = {
    1: ScoreRange(1, 2, 12),
    2: ScoreRange(2, 1, 6),
    3: ScoreRange(3, 0, 3),
    4: ScoreRange(4, 0, 3),
    5: ScoreRange(5, 0, 3),
    6: ScoreRange(6, 0, 3),
    7: ScoreRange(7, 0, 3),
    8: ScoreRange(8, 0, 3),
}


@dataclass
class EssayRecord:
    essay_id: int
    essay_set: int
    text: str
    resolved_score: int
    rater_scores: Optional[list[int]] = None

    def __post_init__(self):
        if self.essay_id <= 0:
            raise ValidationError(f"essay_id must be positive, got {self.essay_id}")
        if not 1 <= self.essay_set <= 8:
            raise ValidationError(f"essay_set must lie in 1..8, got {self.essay_set}")
        if not self.text:
            raise ValidationError(f"essay {self.essay_id}: empty text")


class SpanKind(str, Enum):
    EDU = "edu"
    AC = "ac"

    @classmethod
    def parse(cls, s: str) -> "SpanKind":
        try:
            return cls(s.strip().lower())
        except ValueError:
            raise ValidationError(f"unknown span kind {s!r}") from None


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    kind: SpanKind

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValidationError(f"span [{self.start},{self.end}) is empty or negative")

    def shifted(self, delta: int) -> "Span":
        return Span(self.start + delta, self.end + delta, self.kind)


def check_spans(spans: Iterable[Span], length: int) -> None:
    """Spans of one kind must be sorted, in bounds and pairwise disjoint."""
    last_end: dict[SpanKind, int] = {}
    for sp in spans:
        if sp.end > length:
            raise ValidationError(f"span [{sp.start},{sp.end}) exceeds sequence length {length}")
        if sp.start < last_end.get(sp.kind, 0):
            raise ValidationError(f"{sp.kind.value} spans overlap or are unsorted at [{sp.start},{sp.end})")
        last_end[sp.kind] = sp.end


class Token(NamedTuple):
    surface: str
    vocab_id: int
    is_special: bool


@dataclass
class TokenSequence:
    tokens: list[Token]
    offsets: list[tuple[int, int]]

    def __post_init__(self):
        if len(self.tokens) != len(self.offsets):
            raise ContractError("token/offset lists differ in length")
        prev_end = -1
        for tok, (s, e) in zip(self.tokens, self.offsets):
            if (s, e) == NO_OFFSET:
                continue  # specials, and assembled tokens from another source string
            if s < 0 or e <= s or s < prev_end:
                raise ContractError(f"token {tok.surface!r} has bad offsets ({s},{e})")
            prev_end = e

    def __len__(self) -> int:
        return len(self.tokens)

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    def ids(self) -> list[int]:
        return [t.vocab_id for t in self.tokens]


@dataclass
class IOSequence:
    """Inside/Outside labels, one per token (0 = outside, 1 = inside)."""

    labels: list[int]

    def __post_init__(self):
        if any(l not in (LABEL_O, LABEL_I) for l in self.labels):
            raise ValidationError("IO labels must be 0 (O) or 1 (I)")

    def __len__(self) -> int:
        return len(self.labels)

    def as_string(self) -> str:
        return "".join("I" if l == LABEL_I else "O" for l in self.labels)


class Vocabulary:
    """Surface-to-id map, pre-seeded with the special tokens.

    Growth only happens through plain-token lookups while unfrozen; frozen
    vocabularies map unseen surfaces to [UNK]. Not safe for concurrent
    mutation.
    """

    def __init__(self):
        self._surfaces: list[str] = []
        self._special: list[bool] = []
        self._index: dict[str, int] = {}
        self.frozen = False
        for s in SPECIAL_TOKENS:
            self._push(s, True)

    def _push(self, surface: str, special: bool) -> int:
        idx = len(self._surfaces)
        self._surfaces.append(surface)
        self._special.append(special)
        self._index[surface] = idx
        return idx

    def __len__(self) -> int:
        return len(self._surfaces)

    def special_id(self, surface: str) -> int:
        idx = self._index.get(surface)
        if idx is None or not self._special[idx]:
            raise ContractError(f"vocabulary is missing special token {surface}")
        return idx

    def lookup_plain(self, surface: str) -> int:
        idx = self._index.get(surface)
        if idx is not None and not self._special[idx]:
            return idx
        if idx is not None and self._special[idx]:
            # a plain surface that collides with a special is never a special
            return self._index[UNK]
        if self.frozen:
            return self._index[UNK]
        return self._push(surface, False)

    def surface_of(self, idx: int) -> str:
        return self._surfaces[idx]

    def is_special(self, idx: int) -> bool:
        return self._special[idx]

    def snapshot(self) -> list[tuple[str, bool]]:
        return list(zip(self._surfaces, self._special))

    @classmethod
    def from_snapshot(cls, entries: list) -> "Vocabulary":
        v = cls.__new__(cls)
        v._surfaces, v._special, v._index = [], [], {}
        v.frozen = True
        for surface, special in entries:
            v._push(str(surface), bool(special))
        for s in SPECIAL_TOKENS:
            v.special_id(s)
        return v

    def special_token(self, surface: str) -> Token:
        return Token(surface, self.special_id(surface), True)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def split_surfaces(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    """Whitespace split, then peel leading/trailing punctuation characters
    off each word as single-character tokens; cores are lowercased."""
    surfaces: list[str] = []
    offsets: list[tuple[int, int]] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        start = pos
        while pos < n and not text[pos].isspace():
            pos += 1
        word = text[start:pos]
        i, j = 0, len(word)
        while i < j and _is_punct(word[i]):
            surfaces.append(word[i])
            offsets.append((start + i, start + i + 1))
            i += 1
        k = j
        while k > i and _is_punct(word[k - 1]):
            k -= 1
        if i < k:
            surfaces.append(word[i:k].lower())
            offsets.append((start + i, start + k))
        for t in range(k, j):
            surfaces.append(word[t])
            offsets.append((start + t, start + t + 1))
    return surfaces, offsets


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Tokenise raw text; special-token surfaces in input stay plain text.

    The bracket characters of a literal "[EDU]" etc. are punctuation and get
    detached, so input text can never smuggle a special token into the
    stream; specials only enter via explicit assembly.
    """
    surfaces, offsets = split_surfaces(text)
    toks = [Token(s, vocab.lookup_plain(s), False) for s in surfaces]
    return TokenSequence(toks, offsets)


@dataclass
class RowError:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


def parse_asap_tsv(content, ranges: dict[int, ScoreRange]) -> tuple[list[EssayRecord], list[RowError]]:
    """Read a scored-essay TSV; bad rows are collected, not fatal.

    The header must name essay_id, essay_set, essay and domain1_score.
    Optional rater1_domain1..rater3_domain1 columns become rater_scores.
    """
    if isinstance(content, str):
        content = io.StringIO(content)
    reader = csv.reader(content, delimiter="\t", quoting=csv.QUOTE_NONE)
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty stream: missing header row") from None
    cols = {name.strip(): i for i, name in enumerate(header)}
    required = ("essay_id", "essay_set", "essay", "domain1_score")
    missing = [c for c in required if c not in cols]
    if missing:
        raise FormatError(f"header is missing column(s): {', '.join(missing)}")
    rater_cols = [cols[c] for c in ("rater1_domain1", "rater2_domain1", "rater3_domain1") if c in cols]

    records: list[EssayRecord] = []
    errors: list[RowError] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            essay_id = int(row[cols["essay_id"]])
            essay_set = int(row[cols["essay_set"]])
            score = int(row[cols["domain1_score"]])
            text = row[cols["essay"]]
        except (ValueError, IndexError) as exc:
            errors.append(RowError(lineno, f"unparseable row: {exc}"))
            continue
        if not 1 <= essay_set <= 8:
            errors.append(RowError(lineno, f"essay_set {essay_set} outside 1..8"))
            continue
        rng = ranges.get(essay_set)
        if rng is None:
            errors.append(RowError(lineno, f"no score range registered for set {essay_set}"))
            continue
        if score not in rng:
            errors.append(RowError(lineno, f"score {score} outside range {rng.min_score}..{rng.max_score} of set {essay_set}"))
            continue
        rater_scores = None
        if rater_cols:
            vals = []
            for ci in rater_cols:
                cell = row[ci].strip() if ci < len(row) else ""
                if cell:
                    try:
                        vals.append(int(cell))
                    except ValueError:
                        errors.append(RowError(lineno, f"bad rater score {cell!r}"))
                        vals = None
                        break
            if vals is None:
                continue
            rater_scores = vals or None
        try:
            records.append(EssayRecord(essay_id, essay_set, text, score, rater_scores))
        except ValidationError as exc:
            errors.append(RowError(lineno, str(exc)))
    return records, errors


def parse_segmented_document(raw: str, segmented: str, vocab: Vocabulary) -> tuple[TokenSequence, list[Span]]:
    """Align a raw document with its newline-segmented version.

    Each non-empty line of `segmented` becomes one discourse-unit span over
    the tokenisation of `raw`; the spans tile the document.
    """
    seq = tokenize(raw, vocab)
    raw_surfaces = seq.surfaces()
    lines = [ln for ln in segmented.split("\n") if ln.strip()]
    seg_surfaces: list[str] = []
    counts: list[int] = []
    for ln in lines:
        s, _ = split_surfaces(ln)
        seg_surfaces.extend(s)
        counts.append(len(s))
    limit = min(len(raw_surfaces), len(seg_surfaces))
    for i in range(limit):
        if raw_surfaces[i] != seg_surfaces[i]:
            raise AlignmentError(
                f"token {i}: raw has {raw_surfaces[i]!r} but segmented has {seg_surfaces[i]!r}"
            )
    if len(raw_surfaces) != len(seg_surfaces):
        longer = "raw" if len(raw_surfaces) > len(seg_surfaces) else "segmented"
        extra = (raw_surfaces + seg_surfaces)[limit]
        raise AlignmentError(f"token {limit}: {longer} stream continues with {extra!r}")
    spans: list[Span] = []
    cursor = 0
    for c in counts:
        spans.append(Span(cursor, cursor + c, SpanKind.EDU))
        cursor += c
    return seq, spans


def parse_char_spans(
    text: str, char_spans: list[tuple[int, int, "SpanKind | str"]], vocab: Vocabulary
) -> tuple[TokenSequence, list[Span]]:
    """Map character-interval annotations onto token spans.

    A token belongs to a span iff their character intervals overlap; each
    annotation therefore covers one contiguous token run.
    """
    n = len(text)
    parsed: list[tuple[int, int, SpanKind]] = []
    for s, e, kind in char_spans:
        if not 0 <= s < e <= n:
            raise ContractError(f"char span ({s},{e}) out of bounds for text of length {n}")
        parsed.append((s, e, kind if isinstance(kind, SpanKind) else SpanKind.parse(kind)))
    by_kind: dict[SpanKind, list[tuple[int, int]]] = {}
    for s, e, kind in parsed:
        by_kind.setdefault(kind, []).append((s, e))
    for kind, intervals in by_kind.items():
        intervals.sort()
        for (s1, e1), (s2, e2) in zip(intervals, intervals[1:]):
            if s2 < e1:
                raise ValidationError(f"{kind.value} char spans ({s1},{e1}) and ({s2},{e2}) overlap")

    seq = tokenize(text, vocab)
    spans: list[Span] = []
    for s, e, kind in parsed:
        hit = [t for t, (ts, te) in enumerate(seq.offsets) if ts < e and s < te]
        if not hit:
            raise ValidationError(f"char span ({s},{e}) covers no tokens")
        spans.append(Span(hit[0], hit[-1] + 1, kind))
    spans.sort(key=lambda sp: (sp.kind.value, sp.start))
    check_spans(spans, len(seq))  # annotations finer than the tokenisation collide here
    spans.sort(key=lambda sp: (sp.start, sp.end, sp.kind.value))
    return seq, spans


def spans_to_io(seq: TokenSequence, spans: list[Span]) -> IOSequence:
    """label[t] = I iff token t lies inside some span."""
    check_spans(sorted(spans, key=lambda sp: (sp.kind.value, sp.start)), len(seq))
    labels = [LABEL_O] * len(seq)
    for sp in spans:
        for t in range(sp.start, sp.end):
            labels[t] = LABEL_I
    return IOSequence(labels)


def io_to_spans(io_seq: IOSequence, kind: SpanKind) -> list[Span]:
    """Maximal runs of I become spans; touching source spans merge (an
    accepted limitation of the two-label scheme)."""
    spans: list[Span] = []
    start = None
    for t, lab in enumerate(io_seq.labels):
        if lab == LABEL_I and start is None:
            start = t
        elif lab == LABEL_O and start is not None:
            spans.append(Span(start, t, kind))
            start = None
    if start is not None:
        spans.append(Span(start, len(io_seq.labels), kind))
    return spans


def slice_tokens(seq: TokenSequence, start: int, end: int) -> TokenSequence:
    if not 0 <= start <= end <= len(seq):
        raise ContractError(f"token slice [{start},{end}) out of bounds for length {len(seq)}")
    return TokenSequence(seq.tokens[start:end], seq.offsets[start:end])


def insert_span_markers(
    seq: TokenSequence, spans: list[Span], marker: str, vocab: Vocabulary
) -> tuple[TokenSequence, list[int]]:
    """Insert a special marker token immediately before each span start.

    Returns the decorated sequence and an origin map: new index -> original
    index, -1 for inserted markers. Offsets of original tokens are kept.
    """
    check_spans(sorted(spans, key=lambda sp: (sp.kind.value, sp.start)), len(seq))
    starts = sorted(sp.start for sp in spans)
    tok = vocab.special_token(marker)
    tokens: list[Token] = []
    offsets: list[tuple[int, int]] = []
    origin: list[int] = []
    si = 0
    for t in range(len(seq) + 1):
        while si < len(starts) and starts[si] == t:
            tokens.append(tok)
            offsets.append(NO_OFFSET)
            origin.append(-1)
            si += 1
        if t < len(seq):
            tokens.append(seq.tokens[t])
            offsets.append(seq.offsets[t])
            origin.append(t)
    return TokenSequence(tokens, offsets), origin


def spans_to_char_ranges(seq: TokenSequence, spans: list[Span]) -> list[tuple[int, int, SpanKind]]:
    """Project token spans back onto character intervals of the source text.

    Inserted specials carry no offsets and are skipped; a span made only of
    specials has no character footprint and is dropped.
    """
    out = []
    for sp in spans:
        real = [seq.offsets[t] for t in range(sp.start, sp.end) if not seq.tokens[t].is_special]
        if not real:
            continue
        out.append((real[0][0], real[-1][1], sp.kind))
    return out
