"""Trainable sequence backbone: embeddings, BiLSTMs and windowed attention.

The stack is embed -> BiLSTM -> window-restricted self-attention -> second
BiLSTM over the concatenation of hidden states and attention vectors. The
attention at position i scores each j in the clipped window [i-K, i+K] as
w_attn . [h_i, h_j, h_i*h_j], normalises over the window with a softmax and
sums the window's hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import TokenSequence
from .errors import ContractError

NEG_INF = -1e30


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    hidden: int = 32
    window: int = 5
    dropout_keep: float = 0.9


@dataclass
class DropoutCtx:
    """Per-step dropout masks derived by hashing (seed, step, scope, site tag).

    `scope` distinguishes parallel sequences inside one optimisation step so
    they draw independent masks.
    """

    seed: int
    step: int
    keep_p: float
    scope: int = 0

    def apply(self, x: T.Tensor, tag: str) -> T.Tensor:
        if self.keep_p >= 1.0 or x.data.size == 0:
            return x
        rng = T.derive_rng(self.seed, "dropout", self.step, self.scope, tag)
        return T.dropout(x, T.bernoulli_mask(rng, x.shape, self.keep_p), self.keep_p)


def _uniform(rng, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape)


def init_lstm_block(tensors: dict, key: str, in_dim: int, hidden: int, seed: int) -> None:
    """Add fwd/bwd LSTM weight triples under `key` to a tensor dict."""
    for direction in ("fwd", "bwd"):
        sub = f"{key}/{direction}"
        rng = T.derive_rng(seed, "init", sub)
        tensors[f"{sub}/W"] = T.Tensor(_uniform(rng, (4 * hidden, in_dim), in_dim))
        tensors[f"{sub}/U"] = T.Tensor(_uniform(rng, (4 * hidden, hidden), hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget-gate bias
        tensors[f"{sub}/b"] = T.Tensor(b)


@dataclass
class EncoderParams:
    """All encoder weights, addressable by name for checkpointing."""

    cfg: EncoderConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def create(cls, vocab_size: int, cfg: EncoderConfig, seed: int, prefix: str = "encoder") -> "EncoderParams":
        if cfg.window < 1:
            raise ContractError(f"attention window must be >= 1, got {cfg.window}")
        d, h = cfg.embed_dim, cfg.hidden
        t: dict[str, T.Tensor] = {}
        rng = T.derive_rng(seed, "init", prefix, "embedding")
        t[f"{prefix}/embedding"] = T.Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, d)))
        init_lstm_block(t, f"{prefix}/l1", d, h, seed)
        init_lstm_block(t, f"{prefix}/l2", 4 * h, h, seed)
        rng = T.derive_rng(seed, "init", prefix, "w_attn")
        t[f"{prefix}/w_attn"] = T.Tensor(_uniform(rng, (6 * h, 1), 6 * h))
        return cls(cfg=cfg, tensors=t)

    @property
    def prefix(self) -> str:
        return next(iter(self.tensors)).split("/")[0]

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[f"{self.prefix}/{name}"]

    @property
    def vocab_size(self) -> int:
        return self["embedding"].shape[0]


def embed(seq: TokenSequence, params: EncoderParams) -> T.Tensor:
    table = params["embedding"]
    ids = seq.ids()
    if any(i >= table.shape[0] or i < 0 for i in ids):
        raise ContractError("token id out of range for embedding table")
    if not ids:
        return T.Tensor(np.zeros((0, table.shape[1])))
    return T.gather_rows(table, ids)


def lstm_pass(x: T.Tensor, W: T.Tensor, U: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Unidirectional LSTM with zero initial state; returns all hidden rows."""
    h = U.shape[1]
    n = x.shape[0]
    if n == 0:
        return T.Tensor(np.zeros((0, h)))
    xw = T.matmul(x, T.transpose(W))
    Ut = T.transpose(U)
    hprev = T.Tensor(np.zeros((1, h)))
    c = T.Tensor(np.zeros((1, h)))
    rows = []
    for t in range(n):
        z = T.add(T.add(T.slice_axis(xw, 0, t, t + 1), T.matmul(hprev, Ut)), b)
        gi = T.sigmoid(T.slice_axis(z, 1, 0, h))
        gf = T.sigmoid(T.slice_axis(z, 1, h, 2 * h))
        go = T.sigmoid(T.slice_axis(z, 1, 2 * h, 3 * h))
        gc = T.tanh(T.slice_axis(z, 1, 3 * h, 4 * h))
        c = T.add(T.mul(gf, c), T.mul(gi, gc))
        hprev = T.mul(go, T.tanh(c))
        rows.append(hprev)
    return T.concat(rows, axis=0)


def bilstm(x: T.Tensor, tensors: dict, key: str, hidden: int) -> T.Tensor:
    """Concatenate a left-to-right and a right-to-left pass along features."""
    if x.shape[0] == 0:
        return T.Tensor(np.zeros((0, 2 * hidden)))
    fwd = lstm_pass(x, tensors[f"{key}/fwd/W"], tensors[f"{key}/fwd/U"], tensors[f"{key}/fwd/b"])
    rev = lstm_pass(T.flip0(x), tensors[f"{key}/bwd/W"], tensors[f"{key}/bwd/U"], tensors[f"{key}/bwd/b"])
    return T.concat([fwd, T.flip0(rev)], axis=1)


def window_mask(n: int, window: int) -> np.ndarray:
    """Additive mask: 0 inside the clipped +-window band, -inf outside."""
    idx = np.arange(n)
    band = np.abs(idx[:, None] - idx[None, :]) <= window
    return np.where(band, 0.0, NEG_INF)


def rsa_attend(h: T.Tensor, w_attn: T.Tensor, window: int) -> T.Tensor:
    """Similarity-scored attention restricted to a +-window band.

    The pair score decomposes as h_i.w1 + h_j.w2 + (h_i*h_j).w3, which lets
    the whole band be scored with three matmuls instead of a pair loop.
    """
    if window < 1:
        raise ContractError(f"attention window must be >= 1, got {window}")
    n, width = h.shape
    if n == 0:
        return h
    if w_attn.shape != (3 * width, 1):
        raise ContractError(f"w_attn shape {w_attn.shape} does not match 3*{width} features")
    w1 = T.slice_axis(w_attn, 0, 0, width)
    w2 = T.slice_axis(w_attn, 0, width, 2 * width)
    w3 = T.slice_axis(w_attn, 0, 2 * width, 3 * width)
    left = T.matmul(h, w1)                       # (n, 1)
    right = T.transpose(T.matmul(h, w2))         # (1, n)
    pair = T.matmul(T.mul(h, T.transpose(w3)), T.transpose(h))  # (n, n)
    scores = T.add(T.add(pair, left), right)
    masked = T.add(scores, T.Tensor(window_mask(n, window)))
    alpha = T.softmax(masked, axis=1)
    return T.matmul(alpha, h)


def encode(seq: TokenSequence, params: EncoderParams, dropout: "DropoutCtx | None" = None) -> T.Tensor:
    """Full backbone pass; rows are per-token representations of width 2h."""
    h = params.cfg.hidden
    if len(seq) == 0:
        return T.Tensor(np.zeros((0, 2 * h)))
    x = embed(seq, params)
    if dropout is not None:
        x = dropout.apply(x, "embed")
    prefix = params.prefix
    h1 = bilstm(x, params.tensors, f"{prefix}/l1", h)
    a = rsa_attend(h1, params["w_attn"], params.cfg.window)
    ha = T.concat([h1, a], axis=1)
    if dropout is not None:
        ha = dropout.apply(ha, "between_layers")
    return bilstm(ha, params.tensors, f"{prefix}/l2", h)
