"""Span labellers for discourse units (EDU) and argument components (AC).

One architecture serves both kinds: the shared encoder feeds a linear-chain
CRF per sentence. AC models additionally see [EDU] marker tokens inserted at
discourse-unit starts, normally predicted by a frozen EDU model (gold markers
are available behind a config switch for ablations). Training follows the
span-labelling recipe: per-sentence NLL plus an L2 penalty, Adam with global
gradient clipping, and an exponential moving average of the weights that is
used for all evaluation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import crf as crf_mod
from . import tensor as T
from .corpus import (
    IOSequence,
    LABEL_O,
    Span,
    SpanKind,
    TokenSequence,
    Token,
    Vocabulary,
    insert_span_markers,
    io_to_spans,
    slice_tokens,
    spans_to_io,
    tokenize,
)
from .encoder import DropoutCtx, EncoderConfig, EncoderParams, encode
from .errors import CheckpointError, ContractError
from .optim import AdamState, EmaState, adam_step, clip_gradients, ema_update, l2_penalty, use_ema_weights

SENTENCE_FINAL = {".", "!", "?"}


@dataclass
class SpanMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "SpanMetrics":
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1, tp, fp, fn)


def span_prf(predicted: list[Span], gold: list[Span]) -> SpanMetrics:
    """Exact-match span scoring: a hit needs identical (start, end, kind)."""
    pset, gset = set(predicted), set(gold)
    tp = len(pset & gset)
    return SpanMetrics.from_counts(tp, len(pset) - tp, len(gset) - tp)


def corpus_prf(pairs: list[tuple[list[Span], list[Span]]]) -> SpanMetrics:
    """Micro-averaged exact-match scores over (predicted, gold) documents."""
    tp = fp = fn = 0
    for predicted, gold in pairs:
        m = span_prf(predicted, gold)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return SpanMetrics.from_counts(tp, fp, fn)


@dataclass
class SegmenterConfig:
    learning_rate: float = 0.001
    weight_decay: float = 1e-4
    dropout_keep: float = 0.9
    ema_decay: float = 0.9999
    max_grad_norm: float = 5.0
    batch_size: int = 32
    epochs: int = 50
    window_size: int = 5
    embed_dim: int = 32
    hidden: int = 32
    val_fraction: float = 0.1
    edu_decoration: str = "model"  # AC models: model | gold | none


@dataclass
class TrainingDocument:
    text: str
    tokens: TokenSequence
    spans: list[Span]
    edu_spans: Optional[list[Span]] = None  # gold EDUs, for gold-decorated AC runs


def sentence_bounds(seq: TokenSequence) -> list[tuple[int, int]]:
    """Token ranges of sentences: a ./!/? token followed by a gap (or the
    end of text) closes a sentence."""
    bounds: list[tuple[int, int]] = []
    start = 0
    n = len(seq)
    for t in range(n):
        tok = seq.tokens[t]
        if tok.is_special or tok.surface not in SENTENCE_FINAL:
            continue
        end_here = t == n - 1
        if not end_here:
            ns, _ = seq.offsets[t + 1]
            _, e = seq.offsets[t]
            end_here = ns > e >= 0
        if end_here and t + 1 > start:
            bounds.append((start, t + 1))
            start = t + 1
    if start < n:
        bounds.append((start, n))
    return bounds


@dataclass
class DecoratedSequence:
    tokens: TokenSequence
    origin: list[int]  # decorated index -> source index, -1 for markers

    def realign_labels(self, labels: IOSequence) -> IOSequence:
        return IOSequence([labels.labels[o] if o >= 0 else LABEL_O for o in self.origin])

    def map_span_back(self, span: Span) -> Optional[Span]:
        real = [self.origin[t] for t in range(span.start, span.end) if self.origin[t] >= 0]
        if not real:
            return None
        return Span(real[0], real[-1] + 1, span.kind)


def mark_edu_boundaries(
    seq: TokenSequence, edu_spans: list[Span], vocab: Optional[Vocabulary] = None
) -> DecoratedSequence:
    """Insert an [EDU] marker immediately before each span start.

    Special-token ids are positionally fixed across vocabularies, so a fresh
    vocabulary serves when the sequence's own is not at hand.
    """
    decorated, origin = insert_span_markers(seq, edu_spans, "[EDU]", vocab or Vocabulary())
    return DecoratedSequence(decorated, origin)


@dataclass
class SegmenterModel:
    kind: SpanKind
    encoder: EncoderParams
    crf: crf_mod.CrfParams
    vocab: Vocabulary
    config: SegmenterConfig

    @property
    def params(self) -> dict:
        return {**self.encoder.tensors, **self.crf.tensors}

    @classmethod
    def create(cls, kind: SpanKind, vocab: Vocabulary, config: SegmenterConfig, seed: int) -> "SegmenterModel":
        enc_cfg = EncoderConfig(
            embed_dim=config.embed_dim,
            hidden=config.hidden,
            window=config.window_size,
            dropout_keep=config.dropout_keep,
        )
        enc = EncoderParams.create(len(vocab), enc_cfg, seed, prefix="encoder")
        head = crf_mod.CrfParams.create(2 * config.hidden, seed)
        return cls(kind=kind, encoder=enc, crf=head, vocab=vocab, config=config)

    def save(self, path) -> None:
        entries = {name: t.data for name, t in sorted(self.params.items())}
        entries["__meta__"] = T.meta_to_array(
            {
                "format": "segmenter",
                "kind": self.kind.value,
                "config": dataclasses.asdict(self.config),
                "vocab": self.vocab.snapshot(),
            }
        )
        T.save_checkpoint(path, entries)

    @classmethod
    def load(cls, path) -> "SegmenterModel":
        entries = T.load_checkpoint(path)
        if "__meta__" not in entries:
            raise CheckpointError("checkpoint has no metadata entry")
        meta = T.array_to_meta(entries.pop("__meta__"))
        if meta.get("format") != "segmenter":
            raise CheckpointError(f"not a segmenter checkpoint (format={meta.get('format')!r})")
        config = SegmenterConfig(**meta["config"])
        vocab = Vocabulary.from_snapshot(meta["vocab"])
        enc_cfg = EncoderConfig(config.embed_dim, config.hidden, config.window_size, config.dropout_keep)
        enc_tensors = {k: T.Tensor(v) for k, v in entries.items() if k.startswith("encoder/")}
        crf_tensors = {k: T.Tensor(v) for k, v in entries.items() if k.startswith("crf/")}
        if not enc_tensors or not crf_tensors:
            raise CheckpointError("checkpoint is missing encoder or crf weights")
        return cls(
            kind=SpanKind.parse(meta["kind"]),
            encoder=EncoderParams(enc_cfg, enc_tensors),
            crf=crf_mod.CrfParams(crf_tensors),
            vocab=vocab,
            config=config,
        )


def _remap_ids(seq: TokenSequence, vocab: Vocabulary) -> TokenSequence:
    """Re-key token ids into another model's vocabulary (surfaces unchanged)."""
    toks = [
        Token(t.surface, vocab.special_id(t.surface) if t.is_special else vocab.lookup_plain(t.surface), t.is_special)
        for t in seq.tokens
    ]
    return TokenSequence(toks, list(seq.offsets))


def _decode_sentence(model: SegmenterModel, sent: TokenSequence) -> list[Span]:
    feats = encode(sent, model.encoder)
    unary = crf_mod.unary_scores(feats, model.crf)
    labels, _ = crf_mod.viterbi_decode(unary, model.crf["transition"])
    return io_to_spans(labels, model.kind)


def _sentence_edu_spans(edu_model: SegmenterModel, sent: TokenSequence) -> list[Span]:
    remapped = _remap_ids(sent, edu_model.vocab)
    return _decode_sentence(edu_model, remapped)


def _clip_to_window(spans, start: int, end: int) -> list[Span]:
    out = []
    for sp in spans or []:
        s, e = max(sp.start, start), min(sp.end, end)
        if s < e:
            out.append(Span(s - start, e - start, sp.kind))
    return out


def _decorated_sentence(
    model: SegmenterModel,
    sent: TokenSequence,
    sent_edus: Optional[list[Span]],
) -> DecoratedSequence:
    spans = sent_edus or []
    decorated, origin = insert_span_markers(sent, spans, "[EDU]", model.vocab)
    return DecoratedSequence(decorated, origin)


def _document_predictions(
    model: SegmenterModel,
    seq: TokenSequence,
    edu_source,  # None | SegmenterModel | list[Span] over document indices
) -> list[Span]:
    out: list[Span] = []
    for s, e in sentence_bounds(seq):
        sent = slice_tokens(seq, s, e)
        if model.kind is SpanKind.AC and model.config.edu_decoration != "none":
            if isinstance(edu_source, SegmenterModel):
                sent_edus = _sentence_edu_spans(edu_source, sent)
            elif edu_source is not None:
                sent_edus = _clip_to_window(edu_source, s, e)
            else:
                raise ContractError(
                    "AC model decorated with EDU signals needs an EDU model or explicit spans"
                )
            dec = _decorated_sentence(model, sent, sent_edus)
            for sp in _decode_sentence(model, dec.tokens):
                back = dec.map_span_back(sp)
                if back is not None:
                    out.append(back.shifted(s))
        else:
            out.extend(sp.shifted(s) for sp in _decode_sentence(model, sent))
    return out


def segment(
    model: SegmenterModel,
    text: str,
    edu_model: Optional[SegmenterModel] = None,
    edu_spans: Optional[list[Span]] = None,
) -> list[Span]:
    """Predict spans for raw text; AC models take their EDU signals from
    `edu_model` (or pre-computed `edu_spans` over this text's tokens)."""
    seq = tokenize(text, model.vocab)
    if len(seq) == 0:
        return []
    source = edu_spans if edu_spans is not None else edu_model
    return _document_predictions(model, seq, source)


@dataclass
class _Sentence:
    tokens: TokenSequence
    labels: IOSequence


def _doc_sentences(model: SegmenterModel, doc: TrainingDocument, edu_model) -> list[_Sentence]:
    doc_io = spans_to_io(doc.tokens, doc.spans)
    sents = []
    for s, e in sentence_bounds(doc.tokens):
        sent = slice_tokens(doc.tokens, s, e)
        labels = IOSequence(doc_io.labels[s:e])
        if model.kind is SpanKind.AC and model.config.edu_decoration != "none":
            if model.config.edu_decoration == "gold":
                if doc.edu_spans is None:
                    raise ContractError("gold EDU decoration requested but document has no gold EDU spans")
                sent_edus = _clip_to_window(doc.edu_spans, s, e)
            else:
                if edu_model is None:
                    raise ContractError("model EDU decoration requested but no EDU model supplied")
                sent_edus = _sentence_edu_spans(edu_model, sent)
            dec = _decorated_sentence(model, sent, sent_edus)
            sents.append(_Sentence(dec.tokens, dec.realign_labels(labels)))
        else:
            sents.append(_Sentence(sent, labels))
    return sents


def _edu_source_for_eval(model: SegmenterModel, doc: TrainingDocument, edu_model):
    if model.kind is not SpanKind.AC or model.config.edu_decoration == "none":
        return None
    if model.config.edu_decoration == "gold":
        return doc.edu_spans or []
    return edu_model


def evaluate_documents(model: SegmenterModel, docs: list[TrainingDocument], edu_model=None) -> SpanMetrics:
    pairs = []
    for doc in docs:
        predicted = _document_predictions(model, doc.tokens, _edu_source_for_eval(model, doc, edu_model))
        pairs.append((predicted, doc.spans))
    return corpus_prf(pairs)


def train_segmenter(
    docs: list[TrainingDocument],
    kind: SpanKind,
    vocab: Vocabulary,
    config: SegmenterConfig,
    seed: int,
    edu_model: Optional[SegmenterModel] = None,
) -> tuple[SegmenterModel, list[dict]]:
    """Train a span labeller; returns the best-validation-F1 model (under its
    averaged weights) and the per-epoch history."""
    if not docs:
        raise ContractError("cannot train a segmenter on an empty corpus")
    vocab.frozen = True
    model = SegmenterModel.create(kind, vocab, config, seed)
    params = model.params

    order = T.derive_rng(seed, "valsplit").permutation(len(docs))
    n_val = int(len(docs) * config.val_fraction)
    val_docs = [docs[i] for i in order[:n_val]]
    train_docs = [docs[i] for i in order[n_val:]]
    if not train_docs:
        train_docs, val_docs = val_docs, []
    eval_docs = val_docs if val_docs else train_docs

    sentences: list[_Sentence] = []
    for doc in train_docs:
        sentences.extend(_doc_sentences(model, doc, edu_model))
    sentences = [s for s in sentences if len(s.tokens) > 0]
    if not sentences:
        raise ContractError("corpus contains no non-empty sentences")

    adam = AdamState.for_params(params, lr=config.learning_rate)
    ema = EmaState.zeros(params, config.ema_decay)
    history: list[dict] = []
    best_f1 = -1.0
    best_weights = {k: p.data.copy() for k, p in params.items()}
    step = 0

    for epoch in range(1, config.epochs + 1):
        perm = T.derive_rng(seed, "shuffle", epoch).permutation(len(sentences))
        epoch_losses = []
        for ofs in range(0, len(perm), config.batch_size):
            batch = perm[ofs : ofs + config.batch_size]
            with T.Graph() as g:
                terms = []
                for bi, si in enumerate(batch):
                    sent = sentences[si]
                    ctx = DropoutCtx(seed, step, config.dropout_keep, scope=bi)
                    feats = encode(sent.tokens, model.encoder, dropout=ctx)
                    unary = crf_mod.unary_scores(feats, model.crf)
                    terms.append(T.reshape(crf_mod.crf_nll(unary, model.crf["transition"], sent.labels), (1,)))
                loss = T.add(T.tmean(T.concat(terms, axis=0)), l2_penalty(params, config.weight_decay))
                T.backward(g, loss)
            grads = {k: p.grad for k, p in params.items()}
            clip_gradients(grads, config.max_grad_norm)
            adam_step(adam, params, grads)
            ema_update(ema, params)
            step += 1
            epoch_losses.append(loss.item())
        with use_ema_weights(ema, params):
            metrics = evaluate_documents(model, eval_docs, edu_model)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_f1": metrics.f1,
                "val_precision": metrics.precision,
                "val_recall": metrics.recall,
            }
        )
        if metrics.f1 > best_f1:
            best_f1 = metrics.f1
            with use_ema_weights(ema, params):
                best_weights = {k: p.data.copy() for k, p in params.items()}

    # the returned model carries the averaged weights of its best epoch
    for k, p in params.items():
        p.data = best_weights[k]
    return model, history
