"""The essay scorer: backbone encoder, composite head, losses and training.

The head mirrors the dual BiLSTM/FFN design: a first BiLSTM/FFN pair reduces
each position's feature vector to one value (the dimension-reduction step),
count features are projected to extra leading positions of the resulting
scalar sequence, and a second BiLSTM/FFN pair consumes that sequence down to
a single predicted scaled score.

Training runs set-stratified k-fold cross-validation with RMSProp on a
weighted sum of MSE and margin-ranking losses, early-stopping on validation
agreement (quadratic weighted kappa) and keeping the best epoch's weights.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .augment import (
    FeatureStats,
    FeatureVector,
    PromptScaler,
    assemble_context,
    extract_features,
    fit_prompt_scaler,
    inverse_scale,
)
from .corpus import EssayRecord, ScoreRange, SpanKind, TokenSequence, Vocabulary
from .encoder import DropoutCtx, EncoderConfig, EncoderParams, bilstm, encode, init_lstm_block
from .errors import CheckpointError, ConfigError, ContractError
from .optim import RmspropState, clip_gradients, collect_grads, rmsprop_step, zero_grads
from .segmenter import SegmenterModel, segment

# ---------------------------------------------------------------------------
# losses


@dataclass
class ScoreBatch:
    """Aligned predicted/gold scores plus their essay sets, for evaluation."""

    predicted: list
    gold: list
    essay_sets: list

    def __post_init__(self):
        if not (len(self.predicted) == len(self.gold) == len(self.essay_sets)) or not self.predicted:
            raise ContractError("score batch needs equal-length non-empty columns")


def mse_loss(pred: T.Tensor, gold) -> T.Tensor:
    """Mean squared difference, differentiable w.r.t. predictions."""
    g = np.asarray(gold, dtype=np.float64).reshape(-1)
    if pred.data.ndim != 1 or pred.shape[0] != g.size:
        raise ContractError(f"mse_loss: {pred.shape} predictions vs {g.size} targets")
    if g.size == 0:
        raise ContractError("mse_loss on an empty batch")
    d = T.sub(pred, T.Tensor(g))
    return T.tmean(T.mul(d, d))


def ranking_signs(pred_values: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Pairwise ordering targets r[i,j] derived from gold scores.

    +1 when gold_i > gold_j, -1 when gold_i < gold_j; on gold ties the sign
    of the predicted difference is flipped so any difference is penalised.
    """
    r = np.sign(gold[:, None] - gold[None, :])
    ties = r == 0
    return np.where(ties, -np.sign(pred_values[:, None] - pred_values[None, :]), r)


def margin_ranking_loss(pred: T.Tensor, gold, margin: float = 0.0) -> T.Tensor:
    """Hinge on mis-ordered pairs, averaged over the n(n-1)/2 unordered pairs."""
    g = np.asarray(gold, dtype=np.float64).reshape(-1)
    if pred.data.ndim != 1 or pred.shape[0] != g.size:
        raise ContractError(f"margin_ranking_loss: {pred.shape} predictions vs {g.size} targets")
    n = g.size
    if n == 0:
        raise ContractError("margin_ranking_loss on an empty batch")
    if n == 1:
        return T.Tensor(0.0)
    r = ranking_signs(pred.data, g)
    col = T.reshape(pred, (n, 1))
    diff = T.sub(col, T.transpose(col))  # diff[i, j] = y_i - y_j
    terms = T.hinge(T.add(T.mul(diff, T.Tensor(-r)), margin))
    upper = np.triu(np.ones((n, n)), k=1)
    return T.mul(T.tsum(T.mul(terms, T.Tensor(upper))), 2.0 / (n * (n - 1)))


def combined_loss(pred: T.Tensor, gold, alpha: float = 0.9, beta: float = 0.1, margin: float = 0.0) -> T.Tensor:
    """alpha * MSE + beta * margin ranking; the weights must sum to one."""
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ConfigError(f"loss weights must lie in [0,1], got alpha={alpha} beta={beta}")
    if abs(alpha + beta - 1.0) > 1e-12:
        raise ConfigError(f"loss weights must sum to 1, got alpha={alpha} beta={beta}")
    return T.add(T.mul(mse_loss(pred, gold), alpha), T.mul(margin_ranking_loss(pred, gold, margin), beta))


# ---------------------------------------------------------------------------
# agreement metric


def qwk(predicted, gold, score_range: ScoreRange) -> float:
    """Quadratic weighted kappa: 1 - sum(w*O) / sum(w*E).

    O holds contingency counts, E the outer product of the two marginal
    histograms scaled to the same total, and w[i,j] = (i-j)^2 / (C-1)^2.
    """
    p = np.asarray(predicted, dtype=np.int64).reshape(-1)
    g = np.asarray(gold, dtype=np.int64).reshape(-1)
    if p.size != g.size or p.size == 0:
        raise ContractError("qwk needs equal-length non-empty score vectors")
    lo, hi = score_range.min_score, score_range.max_score
    if p.min() < lo or p.max() > hi or g.min() < lo or g.max() > hi:
        raise ContractError(f"qwk: scores outside range {lo}..{hi}")
    n_cat = score_range.n_categories
    observed = np.zeros((n_cat, n_cat))
    np.add.at(observed, (p - lo, g - lo), 1.0)
    hist_p = observed.sum(axis=1)
    hist_g = observed.sum(axis=0)
    expected = np.outer(hist_p, hist_g) / p.size
    idx = np.arange(n_cat, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (n_cat - 1) ** 2
    denom = float((weights * expected).sum())
    if denom == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


# ---------------------------------------------------------------------------
# model


@dataclass
class ScorerConfig:
    alpha: float = 0.9
    beta: float = 0.1
    epochs: int = 150
    learning_rate: float = 3e-5
    dropout_rate: float = 0.4
    batch_size: int = 128
    patience: int = 15
    folds: int = 10
    margin: float = 0.0
    embed_dim: int = 32
    hidden: int = 32
    window_size: int = 5
    head_hidden: int = 32
    feature_positions: int = 4
    normalize_features: bool = True
    early_stop: bool = True
    max_grad_norm: Optional[float] = None
    n_seeds: int = 1


@dataclass(frozen=True)
class ContextConfig:
    """Which context signals a run feeds the model."""

    name: str
    use_margin_ranking: bool
    use_prompt: bool
    decoration: Optional[SpanKind]
    use_features: bool


CONTEXTS: dict[str, ContextConfig] = {
    c.name: c
    for c in (
        ContextConfig("none", False, False, None, False),
        ContextConfig("mr", True, False, None, False),
        ContextConfig("mr+prompt", True, True, None, False),
        ContextConfig("mr+edu", True, False, SpanKind.EDU, False),
        ContextConfig("mr+ac", True, False, SpanKind.AC, False),
        ContextConfig("mr+ac+prompt", True, True, SpanKind.AC, False),
        ContextConfig("mr+ac+prompt+features", True, True, SpanKind.AC, True),
    )
}


def parse_context(name: str) -> ContextConfig:
    ctx = CONTEXTS.get(name)
    if ctx is None:
        raise ConfigError(f"unknown context {name!r}; choose from {', '.join(sorted(CONTEXTS))}")
    return ctx


def _init_ffn(tensors: dict, key: str, in_dim: int, hidden: int, seed: int) -> None:
    dims = [in_dim, hidden, max(hidden // 2, 1), 1]
    for li in range(3):
        rng = T.derive_rng(seed, "init", key, li)
        s = 1.0 / np.sqrt(dims[li])
        tensors[f"{key}/w{li}"] = T.Tensor(rng.uniform(-s, s, size=(dims[li], dims[li + 1])))
        tensors[f"{key}/b{li}"] = T.Tensor(np.zeros(dims[li + 1]))


def _ffn(x: T.Tensor, tensors: dict, key: str, dropout: Optional[DropoutCtx]) -> T.Tensor:
    for li in range(3):
        x = T.add(T.matmul(x, tensors[f"{key}/w{li}"]), tensors[f"{key}/b{li}"])
        if li < 2:
            x = T.relu(x)
            if dropout is not None:
                x = dropout.apply(x, f"{key}/{li}")
    return x


def create_head_tensors(config: ScorerConfig, seed: int) -> dict:
    hh = config.head_hidden
    t: dict[str, T.Tensor] = {}
    init_lstm_block(t, "head/la", 2 * config.hidden, hh, seed)
    _init_ffn(t, "head/ffa", 2 * hh, hh, seed)
    rng = T.derive_rng(seed, "init", "head/featproj")
    t["head/featproj/w"] = T.Tensor(rng.uniform(-0.5, 0.5, size=(config.feature_positions, 4)))
    t["head/featproj/b"] = T.Tensor(np.zeros((config.feature_positions, 1)))
    init_lstm_block(t, "head/lb", 1, hh, seed)
    _init_ffn(t, "head/ffb", 2 * hh, hh, seed)
    return t


def head_forward(
    encoded: T.Tensor,
    features: Optional[np.ndarray],
    tensors: dict,
    head_hidden: int,
    dropout: Optional[DropoutCtx] = None,
) -> T.Tensor:
    """Reduce a T x 2h encoding (plus optional count features) to one score."""
    if encoded.shape[0] < 1:
        raise ContractError("head_forward needs at least one encoded position")
    a = bilstm(encoded, tensors, "head/la", head_hidden)
    per_pos = _ffn(a, tensors, "head/ffa", dropout)  # (n, 1): the dimension reduction
    if features is not None:
        fcol = T.Tensor(np.asarray(features, dtype=np.float64).reshape(-1, 1))
        proj = T.add(T.matmul(tensors["head/featproj/w"], fcol), tensors["head/featproj/b"])
        per_pos = T.concat([proj, per_pos], axis=0)
    b = bilstm(per_pos, tensors, "head/lb", head_hidden)
    pooled = T.reshape(T.tmean(b, axis=0), (1, 2 * head_hidden))
    return T.reshape(_ffn(pooled, tensors, "head/ffb", dropout), ())


@dataclass
class ScoringExample:
    """One prepared training/evaluation item: assembled tokens + features."""

    record: EssayRecord
    tokens: TokenSequence
    features: FeatureVector


@dataclass
class ScorerModel:
    backbone: EncoderParams
    head: dict
    vocab: Vocabulary
    config: ScorerConfig
    context: ContextConfig
    ranges: dict[int, ScoreRange]
    scaler: Optional[PromptScaler] = None
    feature_stats: Optional[FeatureStats] = None

    @property
    def params(self) -> dict:
        return {**self.backbone.tensors, **self.head}

    @classmethod
    def create(
        cls,
        vocab: Vocabulary,
        config: ScorerConfig,
        context: ContextConfig,
        ranges: dict[int, ScoreRange],
        seed: int,
    ) -> "ScorerModel":
        enc_cfg = EncoderConfig(config.embed_dim, config.hidden, config.window_size, 1.0)
        backbone = EncoderParams.create(len(vocab), enc_cfg, seed, prefix="backbone")
        return cls(
            backbone=backbone,
            head=create_head_tensors(config, seed),
            vocab=vocab,
            config=config,
            context=context,
            ranges=dict(ranges),
        )

    def forward(self, ex: ScoringExample, dropout: Optional[DropoutCtx] = None) -> T.Tensor:
        encoded = encode(ex.tokens, self.backbone)
        feats = None
        if self.context.use_features:
            if self.feature_stats is not None:
                feats = self.feature_stats.transform(ex.features)
            else:
                feats = ex.features.as_array()
        return head_forward(encoded, feats, self.head, self.config.head_hidden, dropout)

    def save(self, path) -> None:
        entries = {name: t.data for name, t in sorted(self.params.items())}
        entries["__meta__"] = T.meta_to_array(
            {
                "format": "scorer",
                "config": dataclasses.asdict(self.config),
                "context": self.context.name,
                "vocab": self.vocab.snapshot(),
                "ranges": {str(s): [r.min_score, r.max_score] for s, r in sorted(self.ranges.items())},
                "scaler": self.scaler.snapshot() if self.scaler else None,
                "feature_stats": (
                    {"mean": self.feature_stats.mean.tolist(), "std": self.feature_stats.std.tolist()}
                    if self.feature_stats
                    else None
                ),
            }
        )
        T.save_checkpoint(path, entries)

    @classmethod
    def load(cls, path) -> "ScorerModel":
        entries = T.load_checkpoint(path)
        if "__meta__" not in entries:
            raise CheckpointError("checkpoint has no metadata entry")
        meta = T.array_to_meta(entries.pop("__meta__"))
        if meta.get("format") != "scorer":
            raise CheckpointError(f"not a scorer checkpoint (format={meta.get('format')!r})")
        config = ScorerConfig(**meta["config"])
        enc_cfg = EncoderConfig(config.embed_dim, config.hidden, config.window_size, 1.0)
        backbone = EncoderParams(
            enc_cfg, {k: T.Tensor(v) for k, v in entries.items() if k.startswith("backbone/")}
        )
        head = {k: T.Tensor(v) for k, v in entries.items() if k.startswith("head/")}
        fs = meta.get("feature_stats")
        return cls(
            backbone=backbone,
            head=head,
            vocab=Vocabulary.from_snapshot(meta["vocab"]),
            config=config,
            context=parse_context(meta["context"]),
            ranges={int(s): ScoreRange(int(s), mn, mx) for s, (mn, mx) in meta["ranges"].items()},
            scaler=PromptScaler.from_snapshot(meta["scaler"]) if meta.get("scaler") else None,
            feature_stats=FeatureStats(np.asarray(fs["mean"]), np.asarray(fs["std"])) if fs else None,
        )


def predict_score(model: ScorerModel, ex: ScoringExample) -> int:
    """Continuous head output -> de-normalised, rounded, clamped integer."""
    if model.scaler is None:
        raise ContractError("model has no fitted score scaler")
    essay_set = ex.record.essay_set
    rng = model.ranges.get(essay_set)
    if rng is None:
        raise ContractError(f"no score range known for essay set {essay_set}")
    z = model.forward(ex).item()
    raw = inverse_scale(model.scaler, essay_set, z)
    return max(rng.min_score, min(rng.max_score, round_half_away(raw)))


# ---------------------------------------------------------------------------
# preparation


def prepare_examples(
    records: list[EssayRecord],
    context: ContextConfig,
    vocab: Vocabulary,
    prompts: Optional[dict[int, str]] = None,
    edu_model: Optional[SegmenterModel] = None,
    ac_model: Optional[SegmenterModel] = None,
) -> list[ScoringExample]:
    """Assemble model inputs for a context configuration.

    Span-derived counts use whatever labellers are supplied; a missing
    labeller simply yields zero counts (and is an error only when the
    context needs its spans for decoration).
    """
    if context.decoration is SpanKind.AC and ac_model is None:
        raise ConfigError(f"context {context.name!r} needs an argument-span labeller")
    if context.decoration is SpanKind.EDU and edu_model is None:
        raise ConfigError(f"context {context.name!r} needs a discourse-unit labeller")
    out = []
    for r in records:
        edu_spans = segment(edu_model, r.text) if edu_model is not None else []
        ac_spans = segment(ac_model, r.text, edu_model=edu_model) if ac_model is not None else []
        features = extract_features(r.text, ac_spans, edu_spans)
        prompt = None
        if context.use_prompt:
            if prompts is None or r.essay_set not in prompts:
                raise ConfigError(f"context {context.name!r} needs a prompt for essay set {r.essay_set}")
            prompt = prompts[r.essay_set]
        aug = assemble_context(
            r.text,
            vocab,
            prompt=prompt,
            edu_spans=edu_spans if context.decoration is SpanKind.EDU else None,
            ac_spans=ac_spans if context.decoration is SpanKind.AC else None,
            features=features,
            essay_set=r.essay_set,
        )
        out.append(ScoringExample(r, aug.tokens, features))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "max_epochs"


@dataclass
class FoldResult:
    fold: int
    seed: int
    history: TrainHistory
    val_essay_ids: list[int]
    predictions: list[tuple[int, int, int, int]]  # (essay_id, essay_set, predicted, gold)
    model: ScorerModel


@dataclass
class AesRunReport:
    folds: list[FoldResult]
    per_set_qwk: dict[int, float]
    mean_qwk: float


def stratified_folds(examples: list[ScoringExample], k: int, seed: int) -> list[list[int]]:
    """Deal each essay set's examples round-robin into k folds."""
    if k <= 1:
        return [list(range(len(examples)))]
    if k > len(examples):
        raise ConfigError(f"{k} folds for {len(examples)} examples")
    folds: list[list[int]] = [[] for _ in range(k)]
    by_set: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_set.setdefault(ex.record.essay_set, []).append(i)
    for s in sorted(by_set):
        idx = by_set[s]
        perm = T.derive_rng(seed, "folds", s).permutation(len(idx))
        for j, pi in enumerate(perm):
            folds[j % k].append(idx[pi])
    return [sorted(f) for f in folds]


def _evaluate_qwk(model: ScorerModel, examples: list[ScoringExample]) -> float:
    """Pooled-per-set QWK, averaged over the sets present."""
    per_set: dict[int, tuple[list, list]] = {}
    for ex in examples:
        pred = predict_score(model, ex)
        bucket = per_set.setdefault(ex.record.essay_set, ([], []))
        bucket[0].append(pred)
        bucket[1].append(ex.record.resolved_score)
    vals = [qwk(p, g, model.ranges[s]) for s, (p, g) in sorted(per_set.items())]
    return float(np.mean(vals))


def train_aes(
    examples: list[ScoringExample],
    vocab: Vocabulary,
    ranges: dict[int, ScoreRange],
    config: ScorerConfig,
    context: ContextConfig,
    seed: int,
    prompt_specific: bool = False,
) -> AesRunReport:
    """Cross-validated training; optionally one model per essay set."""
    if not examples:
        raise ContractError("cannot train on an empty dataset")
    vocab.frozen = True
    if prompt_specific:
        sets = sorted({ex.record.essay_set for ex in examples})
        all_folds: list[FoldResult] = []
        for s in sets:
            subset = [ex for ex in examples if ex.record.essay_set == s]
            report = _train_cv(subset, vocab, ranges, config, context, seed, tag=s)
            all_folds.extend(report.folds)
        return _summarise(all_folds, ranges)
    return _train_cv(examples, vocab, ranges, config, context, seed, tag=0)


def _train_cv(
    examples: list[ScoringExample],
    vocab: Vocabulary,
    ranges: dict[int, ScoreRange],
    config: ScorerConfig,
    context: ContextConfig,
    seed: int,
    tag: int,
) -> AesRunReport:
    folds = stratified_folds(examples, config.folds, seed + tag)
    index_sets = [set(f) for f in folds]
    results: list[FoldResult] = []
    seeds = [seed + i for i in range(config.n_seeds)]
    for fi, val_idx in enumerate(folds):
        if len(folds) == 1:
            train_idx = list(range(len(examples)))
        else:
            train_idx = [i for i in range(len(examples)) if i not in index_sets[fi]]
        train_ex = [examples[i] for i in train_idx]
        val_ex = [examples[i] for i in val_idx]
        val_sets = {ex.record.essay_set for ex in val_ex}
        train_sets = {ex.record.essay_set for ex in train_ex}
        if not val_sets <= train_sets:
            raise ContractError(
                f"stratification failed: fold {fi} validates sets {sorted(val_sets - train_sets)} "
                "absent from its training part"
            )
        for run_seed in seeds:
            model, history = _train_single_with_vocab(
                train_ex, val_ex, vocab, ranges, config, context, run_seed
            )
            preds = [
                (ex.record.essay_id, ex.record.essay_set, predict_score(model, ex), ex.record.resolved_score)
                for ex in val_ex
            ]
            results.append(
                FoldResult(
                    fold=fi,
                    seed=run_seed,
                    history=history,
                    val_essay_ids=[ex.record.essay_id for ex in val_ex],
                    predictions=preds,
                    model=model,
                )
            )
    return _summarise(results, ranges)


def _train_single_with_vocab(train_ex, val_ex, vocab, ranges, config, context, seed):
    model = ScorerModel.create(vocab, config, context, ranges, seed)
    model.scaler = fit_prompt_scaler([ex.record for ex in train_ex])
    if context.use_features and config.normalize_features:
        model.feature_stats = FeatureStats.fit([ex.features for ex in train_ex])
    return _fit(model, train_ex, val_ex, config, context, seed)


def _fit(model, train_ex, val_ex, config, context, seed):
    params = model.params
    targets = np.array(
        [model.scaler.scale(ex.record.essay_set, ex.record.resolved_score) for ex in train_ex]
    )
    opt = RmspropState.for_params(params, lr=config.learning_rate)
    keep_p = 1.0 - config.dropout_rate
    history = TrainHistory()
    best_qwk = -np.inf
    best_weights = {k: p.data.copy() for k, p in params.items()}
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = T.derive_rng(seed, "shuffle", epoch).permutation(len(train_ex))
        losses = []
        for ofs in range(0, len(perm), config.batch_size):
            batch = perm[ofs : ofs + config.batch_size]
            zero_grads(params)
            with T.Graph() as g:
                preds = []
                for bi, i in enumerate(batch):
                    ctx = DropoutCtx(seed, step, keep_p, scope=bi)
                    preds.append(T.reshape(model.forward(train_ex[i], dropout=ctx), (1,)))
                pred_vec = T.concat(preds, axis=0)
                gold_vec = targets[batch]
                if context.use_margin_ranking:
                    loss = combined_loss(pred_vec, gold_vec, config.alpha, config.beta, config.margin)
                else:
                    loss = mse_loss(pred_vec, gold_vec)
                T.backward(g, loss)
            grads = collect_grads(params)
            if config.max_grad_norm is not None:
                clip_gradients(grads, config.max_grad_norm)
            rmsprop_step(opt, params, grads)
            step += 1
            losses.append(loss.item())
        val_qwk = _evaluate_qwk(model, val_ex)
        history.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_qwk": val_qwk})
        if val_qwk > best_qwk:
            best_qwk = val_qwk
            history.best_epoch = epoch
            best_weights = {k: p.data.copy() for k, p in params.items()}
        elif config.early_stop and epoch - history.best_epoch >= config.patience:
            history.stop_reason = "early_stop"
            break
    for k, p in params.items():
        p.data = best_weights[k]
    return model, history


def _summarise(results: list[FoldResult], ranges: dict[int, ScoreRange]) -> AesRunReport:
    pooled: dict[int, tuple[list, list]] = {}
    for fr in results:
        for _, essay_set, pred, gold in fr.predictions:
            bucket = pooled.setdefault(essay_set, ([], []))
            bucket[0].append(pred)
            bucket[1].append(gold)
    per_set = {s: qwk(p, g, ranges[s]) for s, (p, g) in sorted(pooled.items())}
    mean = float(np.mean(list(per_set.values()))) if per_set else 0.0
    return AesRunReport(folds=results, per_set_qwk=per_set, mean_qwk=mean)
