"""Optimizers and regularisation for the trainable models.

Span labellers train with Adam + L2 weight penalty + gradient clipping and
keep an exponential moving average of their weights for evaluation; the
scorer trains with RMSProp. All state lives in plain dicts keyed by
parameter name so it can be serialised into checkpoints under reserved
prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError

Params = "dict[str, T.Tensor]"
Grads = "dict[str, np.ndarray]"


def _check_aligned(state_arrays: dict, params: dict, what: str) -> None:
    for name, p in params.items():
        s = state_arrays.get(name)
        if s is None or s.shape != p.data.shape:
            raise ContractError(f"{what}: state/parameter shape mismatch for '{name}'")


@dataclass
class AdamState:
    """First/second moment accumulators with bias correction."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            t=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def checkpoint_entries(self) -> dict:
        out = {"optim/adam/t": np.array(float(self.t))}
        for k in sorted(self.m):
            out[f"optim/adam/m/{k}"] = self.m[k]
        for k in sorted(self.v):
            out[f"optim/adam/v/{k}"] = self.v[k]
        return out

    def load_checkpoint_entries(self, entries: dict) -> None:
        self.t = int(entries["optim/adam/t"])
        for k in self.m:
            self.m[k] = entries[f"optim/adam/m/{k}"].copy()
            self.v[k] = entries[f"optim/adam/v/{k}"].copy()


def adam_step(state: AdamState, params, grads=None) -> None:
    """One Adam update, in place on the parameter tensors.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  hats divide out the
    decay bias; params move by lr * m_hat / (sqrt(v_hat) + eps).
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    _check_aligned(state.m, params, "adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g is None or g.shape != p.data.shape:
            raise ContractError(f"adam_step: gradient missing or misshapen for '{name}'")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class RmspropState:
    """Moving average of squared gradients."""

    lr: float = 3e-5
    beta: float = 0.9
    eps: float = 1e-8
    eg2: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr: float = 3e-5, beta: float = 0.9, eps: float = 1e-8):
        return cls(lr=lr, beta=beta, eps=eps, eg2={k: np.zeros_like(p.data) for k, p in params.items()})

    def checkpoint_entries(self) -> dict:
        return {f"optim/rmsprop/eg2/{k}": self.eg2[k] for k in sorted(self.eg2)}

    def load_checkpoint_entries(self, entries: dict) -> None:
        for k in self.eg2:
            self.eg2[k] = entries[f"optim/rmsprop/eg2/{k}"].copy()


def rmsprop_step(state: RmspropState, params, grads=None) -> None:
    """One RMSProp update, in place.

    eg2 <- beta eg2 + (1-beta) g^2; params move by lr * g / sqrt(eg2 + eps).
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    _check_aligned(state.eg2, params, "rmsprop_step")
    for name, p in params.items():
        g = grads[name]
        if g is None or g.shape != p.data.shape:
            raise ContractError(f"rmsprop_step: gradient missing or misshapen for '{name}'")
        eg2 = state.eg2[name] = state.beta * state.eg2[name] + (1.0 - state.beta) * g * g
        p.data = p.data - state.lr * g / np.sqrt(eg2 + state.eps)


def zero_grads(params) -> None:
    for p in params.values():
        p.grad = None


def collect_grads(params) -> dict:
    """Gradients after a backward pass; parameters a loss never touched get zeros."""
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def l2_penalty(params, lam: float) -> T.Tensor:
    """lam * sum of squared parameter values, recorded on the active graph."""
    if lam < 0:
        raise ContractError(f"l2_penalty: negative coefficient {lam}")
    if lam == 0.0 or not params:
        return T.Tensor(0.0)
    total = None
    for name in sorted(params):
        p = params[name]
        term = T.tsum(T.mul(p, p))
        total = term if total is None else T.add(total, term)
    return T.mul(total, lam)


def clip_gradients(grads, max_norm: float):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (grads, pre-clip norm); scaling happens in place.
    """
    if max_norm <= 0:
        raise ContractError(f"clip_gradients: max_norm must be positive, got {max_norm}")
    sq = 0.0
    items = grads.values() if isinstance(grads, dict) else grads
    arrays = [g for g in items if g is not None]
    for g in arrays:
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for g in arrays:
            g *= scale
    return grads, norm


@dataclass
class EmaState:
    """Shadow copy of parameters, exponentially averaged.

    A shadow started from zeros is biased toward zero for the first
    1/(1-decay) updates; evaluation corrects it by 1 - decay^t (the same
    debiasing Adam applies to its moments). Shadows seeded from the live
    parameters carry no such bias and are used as-is.
    """

    decay: float
    shadow: dict = field(default_factory=dict)
    updates: int = 0
    zero_debias: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ContractError(f"EMA decay must lie in (0,1), got {self.decay}")

    @classmethod
    def from_params(cls, params, decay: float):
        return cls(decay=decay, shadow={k: p.data.copy() for k, p in params.items()})

    @classmethod
    def zeros(cls, params, decay: float):
        return cls(
            decay=decay,
            shadow={k: np.zeros_like(p.data) for k, p in params.items()},
            zero_debias=True,
        )

    def evaluation_weights(self) -> dict:
        if self.zero_debias:
            if self.updates == 0:
                raise ContractError("zero-initialised EMA has no usable weights before any update")
            corr = 1.0 - self.decay**self.updates
            return {k: v / corr for k, v in self.shadow.items()}
        return {k: v.copy() for k, v in self.shadow.items()}

    def checkpoint_entries(self) -> dict:
        out = {
            "optim/ema/updates": np.array(float(self.updates)),
            "optim/ema/zero_debias": np.array(1.0 if self.zero_debias else 0.0),
        }
        for k in sorted(self.shadow):
            out[f"optim/ema/shadow/{k}"] = self.shadow[k]
        return out

    def load_checkpoint_entries(self, entries: dict) -> None:
        self.updates = int(entries["optim/ema/updates"])
        self.zero_debias = bool(entries["optim/ema/zero_debias"])
        for k in self.shadow:
            self.shadow[k] = entries[f"optim/ema/shadow/{k}"].copy()


def ema_update(state: EmaState, params) -> None:
    """shadow <- decay * shadow + (1 - decay) * params."""
    _check_aligned(state.shadow, params, "ema_update")
    d = state.decay
    for name, p in params.items():
        state.shadow[name] = d * state.shadow[name] + (1.0 - d) * p.data
    state.updates += 1


class use_ema_weights:
    """Context manager: evaluate with (debiased) shadow weights, then restore."""

    def __init__(self, state: EmaState, params):
        self.state = state
        self.params = params
        self._saved = None

    def __enter__(self):
        weights = self.state.evaluation_weights()
        self._saved = {k: p.data for k, p in self.params.items()}
        for k, p in self.params.items():
            p.data = weights[k]
        return self

    def __exit__(self, *exc):
        for k, p in self.params.items():
            p.data = self._saved[k]
        return False
