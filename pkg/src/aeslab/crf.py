"""Linear-chain CRF over Inside/Outside labels, entirely in log space.

Unary scores come from a learned linear projection of encoder features;
the transition matrix scores adjacent label pairs starting at the second
position (no begin/end boundary terms). The partition function uses the
forward algorithm with log-sum-exp; decoding is exact Viterbi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import IOSequence
from .errors import ContractError

N_LABELS = 2  # O = 0, I = 1


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class CrfParams:
    """Emission projection and label-transition weights."""

    tensors: dict = field(default_factory=dict)

    @classmethod
    def create(cls, feature_dim: int, seed: int, n_labels: int = N_LABELS, prefix: str = "crf") -> "CrfParams":
        rng = T.derive_rng(seed, "init", prefix)
        s = 1.0 / np.sqrt(feature_dim)
        return cls(
            tensors={
                f"{prefix}/emission_w": T.Tensor(rng.uniform(-s, s, size=(n_labels, feature_dim))),
                f"{prefix}/emission_b": T.Tensor(np.zeros(n_labels)),
                f"{prefix}/transition": T.Tensor(np.zeros((n_labels, n_labels))),
            }
        )

    @property
    def prefix(self) -> str:
        return next(iter(self.tensors)).split("/")[0]

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[f"{self.prefix}/{name}"]

    @property
    def n_labels(self) -> int:
        return self["transition"].shape[0]


def unary_scores(features: T.Tensor, params: CrfParams) -> T.Tensor:
    """Per-(position, label) log-potentials; never exponentiated."""
    if features.shape[0] == 0:
        raise ContractError("a CRF needs at least one position")
    return T.add(T.matmul(features, T.transpose(params["emission_w"])), params["emission_b"])


def log_partition(unary: T.Tensor, transition: T.Tensor) -> T.Tensor:
    """log Z by the forward algorithm; differentiable w.r.t. both inputs."""
    n, n_labels = unary.shape
    if n == 0:
        raise ContractError("a CRF needs at least one position")
    alpha = T.slice_axis(unary, 0, 0, 1)  # (1, L)
    for t in range(1, n):
        prev = T.reshape(alpha, (n_labels, 1))
        alpha = T.add(
            T.logsumexp(T.add(prev, transition), axis=0, keepdims=True),
            T.slice_axis(unary, 0, t, t + 1),
        )
    return T.reshape(T.logsumexp(alpha, axis=1), ())


def path_score(unary: T.Tensor, transition: T.Tensor, labels: list[int]) -> T.Tensor:
    """Sum of unary scores along a path plus its transition scores."""
    n, n_labels = unary.shape
    if len(labels) != n:
        raise ContractError(f"label path length {len(labels)} != sequence length {n}")
    onehot = np.zeros((n, n_labels))
    onehot[np.arange(n), labels] = 1.0
    score = T.tsum(T.mul(unary, T.Tensor(onehot)))
    if n > 1:
        counts = np.zeros((n_labels, n_labels))
        for a, b in zip(labels, labels[1:]):
            counts[a, b] += 1.0
        score = T.add(score, T.tsum(T.mul(transition, T.Tensor(counts))))
    return score


def crf_nll(unary: T.Tensor, transition: T.Tensor, gold: IOSequence) -> T.Tensor:
    """Negative log-likelihood of the gold path: log Z - score(gold)."""
    if len(gold) != unary.shape[0]:
        raise ContractError(f"gold length {len(gold)} != sequence length {unary.shape[0]}")
    return T.sub(log_partition(unary, transition), path_score(unary, transition, gold.labels))


def viterbi_decode(unary, transition) -> tuple[IOSequence, float]:
    """Best-scoring label path; ties prefer the lower label index."""
    u = _as_array(unary)
    tr = _as_array(transition)
    n, n_labels = u.shape
    if n == 0:
        raise ContractError("a CRF needs at least one position")
    delta = u[0].copy()
    back = np.zeros((n, n_labels), dtype=np.intp)
    for t in range(1, n):
        cand = delta[:, None] + tr  # cand[prev, cur]
        best_prev = np.argmax(cand, axis=0)  # first max = lowest index
        delta = cand[best_prev, np.arange(n_labels)] + u[t]
        back[t] = best_prev
    last = int(np.argmax(delta))
    score = float(delta[last])
    path = [last]
    for t in range(n - 1, 0, -1):
        last = int(back[t, last])
        path.append(last)
    path.reverse()
    return IOSequence(path), score
