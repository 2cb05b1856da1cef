"""Context assembly, feature extraction and per-set score normalisation.

Input layouts, all built from the same undecorated essay tokenisation:

  prompt only      [PROMPT] <prompt tokens> [ESSAY] <essay tokens>
  spans only       [EDU] <unit> [EDU] <unit> ...   (or [AC] markers)
  prompt + spans   [PROMPT] <prompt tokens> [AC] <...> [AC] <...>

Markers precede each span start; removing them recovers the original
tokenisation exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corpus import (
    NO_OFFSET,
    EssayRecord,
    Span,
    TokenSequence,
    Vocabulary,
    insert_span_markers,
    tokenize,
)
from .errors import ContractError, ValidationError


@dataclass
class SetStats:
    mean: float
    std: float

    @property
    def degenerate(self) -> bool:
        return self.std == 0.0


@dataclass
class PromptScaler:
    """Per-essay-set z-score transform of resolved scores (population std)."""

    stats: dict[int, SetStats] = field(default_factory=dict)

    def _get(self, essay_set: int) -> SetStats:
        st = self.stats.get(essay_set)
        if st is None:
            raise ContractError(f"scaler was not fitted for essay set {essay_set}")
        return st

    def scale(self, essay_set: int, score: float) -> float:
        st = self._get(essay_set)
        if st.degenerate:
            return 0.0
        return (score - st.mean) / st.std

    def inverse(self, essay_set: int, z: float) -> float:
        st = self._get(essay_set)
        if st.degenerate:
            return st.mean
        return z * st.std + st.mean

    def snapshot(self) -> dict:
        return {str(k): [v.mean, v.std] for k, v in sorted(self.stats.items())}

    @classmethod
    def from_snapshot(cls, snap: dict) -> "PromptScaler":
        return cls(stats={int(k): SetStats(float(m), float(s)) for k, (m, s) in snap.items()})


def fit_prompt_scaler(records: list[EssayRecord]) -> PromptScaler:
    if not records:
        raise ContractError("cannot fit a score scaler on zero records")
    by_set: dict[int, list[float]] = {}
    for r in records:
        by_set.setdefault(r.essay_set, []).append(float(r.resolved_score))
    scaler = PromptScaler()
    for s, vals in sorted(by_set.items()):
        arr = np.asarray(vals)
        scaler.stats[s] = SetStats(float(arr.mean()), float(arr.std()))  # population divisor
    return scaler


def scale_score(scaler: PromptScaler, essay_set: int, score: float) -> float:
    return scaler.scale(essay_set, score)


def inverse_scale(scaler: PromptScaler, essay_set: int, z: float) -> float:
    return scaler.inverse(essay_set, z)


@dataclass(frozen=True)
class FeatureVector:
    """Essay-level count features, in their fixed serialisation order."""

    word_count: int
    char_length: int
    ac_count: int
    edu_count: int

    def __post_init__(self):
        for name in ("word_count", "char_length", "ac_count", "edu_count"):
            if getattr(self, name) < 0:
                raise ValidationError(f"feature {name} must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.word_count, self.char_length, self.ac_count, self.edu_count], dtype=np.float64
        )


def extract_features(text: str, ac_spans: list[Span], edu_spans: list[Span]) -> FeatureVector:
    """word count = whitespace-delimited words; char length = unicode scalars."""
    return FeatureVector(
        word_count=len(text.split()),
        char_length=len(text),
        ac_count=len(ac_spans),
        edu_count=len(edu_spans),
    )


@dataclass
class FeatureStats:
    """Training-fold feature normalisation (population std; 0 when degenerate)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: list[FeatureVector]) -> "FeatureStats":
        if not features:
            raise ContractError("cannot fit feature stats on zero vectors")
        mat = np.stack([f.as_array() for f in features])
        return cls(mean=mat.mean(axis=0), std=mat.std(axis=0))

    def transform(self, f: FeatureVector) -> np.ndarray:
        x = f.as_array() - self.mean
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, x / safe, 0.0)


@dataclass
class AugmentedInput:
    tokens: TokenSequence
    features: FeatureVector
    essay_set: Optional[int] = None
    scaled_score: Optional[float] = None


def assemble_context(
    essay: str,
    vocab: Vocabulary,
    prompt: Optional[str] = None,
    edu_spans: Optional[list[Span]] = None,
    ac_spans: Optional[list[Span]] = None,
    features: Optional[FeatureVector] = None,
    essay_set: Optional[int] = None,
) -> AugmentedInput:
    """Build the model input for one essay under a context configuration.

    At most one span kind may decorate the text. The [ESSAY] separator is
    used only in the prompt-plus-raw layout; span markers replace it.
    """
    if edu_spans is not None and ac_spans is not None:
        raise ContractError("decorate with discourse-unit spans or argument spans, not both")
    essay_seq = tokenize(essay, vocab)
    if edu_spans is not None:
        body, _ = insert_span_markers(essay_seq, edu_spans, "[EDU]", vocab)
    elif ac_spans is not None:
        body, _ = insert_span_markers(essay_seq, ac_spans, "[AC]", vocab)
    else:
        body = essay_seq

    if prompt is not None:
        prompt_seq = tokenize(prompt, vocab)
        tokens = [vocab.special_token("[PROMPT]")]
        offsets = [NO_OFFSET]
        tokens.extend(prompt_seq.tokens)
        # prompt offsets address the prompt string, not the essay; carry the
        # sentinel so the assembled sequence has one consistent offset frame
        offsets.extend(NO_OFFSET for _ in prompt_seq.tokens)
        if edu_spans is None and ac_spans is None:
            tokens.append(vocab.special_token("[ESSAY]"))
            offsets.append(NO_OFFSET)
        tokens.extend(body.tokens)
        offsets.extend(body.offsets)
        seq = TokenSequence(tokens, offsets)
    else:
        seq = body

    if features is None:
        features = extract_features(essay, ac_spans or [], edu_spans or [])
    return AugmentedInput(tokens=seq, features=features, essay_set=essay_set)


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("pearson needs two equal-length vectors of at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float((xc * xc).sum())
    syy = float((yc * yc).sum())
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("correlation undefined: an argument has zero variance")
    r = float((xc * yc).sum() / np.sqrt(sxx * syy))
    return max(-1.0, min(1.0, r))


CORRELATION_VARIABLES = (
    "AC Count",
    "EDU Count",
    "Essay Set",
    "Length of Essay",
    "Word Count",
    "Score",
    "Scaled Score",
)


def correlation_matrix(columns: dict[str, list[float]]) -> list[list[float]]:
    """Pairwise Pearson matrix over CORRELATION_VARIABLES; nan when undefined."""
    names = CORRELATION_VARIABLES
    missing = [n for n in names if n not in columns]
    if missing:
        raise ContractError(f"missing variable column(s): {', '.join(missing)}")
    out = []
    for a in names:
        row = []
        for b in names:
            try:
                row.append(pearson(columns[a], columns[b]))
            except ValidationError:
                row.append(math.nan)
        out.append(row)
    return out
