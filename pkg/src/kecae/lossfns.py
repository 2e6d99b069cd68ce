"""Hybrid loss terms and their weighted combination.

Batch-mean conventions, since the symbols are easy to overload:

* reconstruction error averages over every element (batch entries and
  pixels), which keeps magnitudes comparable across image sizes;
* cross-entropy averages over batch entries;
* the variance-ratio separation loss works per sample over the elements of
  each flattened latent vector (population 1/N variance), then averages over
  the batch.

The reported total is j_mse + j_ce1 + lambda1*j_ce2 + lambda2*j_lda. Only
j_mse, j_ce2 and j_lda drive the generator update; j_ce1 belongs to the
discriminator's own phase and is reported, not re-backpropagated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .errors import DimensionError
from .netlib import DiscOutput, flatten_latent

LDA_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Weights for the exchanged-output CE term and the separation term.

    Grid searches sweep [1e-5, 1] per axis; zero is legal as a degenerate
    setting (pure reconstruction + discriminator loss).
    """

    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    j_mse: float
    j_ce1: float
    j_ce2: float
    j_lda: float
    j_total: float

    def as_row(self) -> list[float]:
        return [self.j_mse, self.j_ce1, self.j_ce2, self.j_lda, self.j_total]


def _mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"MSE operands differ in shape: {a.shape} vs {b.shape}")
    return ((a - b) ** 2).mean()


def j_mse(x1: Tensor, xh1: Tensor, x2: Tensor, xh2: Tensor) -> Tensor:
    """Per-element reconstruction error, summed over the two pair slots."""
    return _mse(x1, xh1) + _mse(x2, xh2)


def j_ce(output: DiscOutput, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy against one-hot targets, computed in logit space.

    ``labels`` holds class indices in {0, 1}. Probabilities never touch 0 or
    1 because the log-softmax goes through a log-sum-exp.
    """
    logits = output.logits
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be class indices in {0, 1}")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    centered = logits - shift
    log_norm = centered.exp().sum(axis=1, keepdims=True).log()
    log_probs = centered - log_norm
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(log_probs * onehot).sum(axis=1).mean()


def j_ce1(d1: DiscOutput, d2: DiscOutput, y1: np.ndarray, y2: np.ndarray) -> Tensor:
    """Discriminator learning loss on the two real batches."""
    return j_ce(d1, y1) + j_ce(d2, y2)


def j_ce2(d1p: DiscOutput, d2p: DiscOutput, y1: np.ndarray, y2: np.ndarray) -> Tensor:
    """Supervision of the exchanged outputs under exchanged labels.

    ``y1``/``y2`` are the ORIGINAL labels of the pair; the first exchanged
    output is scored against y2 and the second against y1. Keeping the swap
    in here means callers apply it exactly once.
    """
    return j_ce(d1p, y2) + j_ce(d2p, y1)


def j_lda(hU: Tensor, hK: Tensor, eps: float = LDA_EPS) -> Tensor:
    """Variance-to-separation ratio between the two latent maps.

    Per sample over flattened vectors: (var_U + var_K) / (|mean_U - mean_K|^2
    + eps) with population (1/N) variances, averaged over the batch. With
    eps=0 a zero mean gap raises ZeroDivisionError instead of returning inf.
    """
    u = flatten_latent(hU)
    k = flatten_latent(hK)
    if u.shape != k.shape:
        raise DimensionError(
            f"latent vectors differ in shape after flattening: {u.shape} vs {k.shape}"
        )
    mu_u = u.mean(axis=1, keepdims=True)
    mu_k = k.mean(axis=1, keepdims=True)
    var_u = ((u - mu_u) ** 2).mean(axis=1, keepdims=True)
    var_k = ((k - mu_k) ** 2).mean(axis=1, keepdims=True)
    gap = (mu_u - mu_k) ** 2
    if eps == 0.0 and np.any(gap.data == 0.0):
        raise ZeroDivisionError(
            "latent means coincide and eps=0; separation ratio undefined"
        )
    return ((var_u + var_k) / (gap + eps)).mean()


def j_total(
    mse: float,
    ce1: float,
    ce2: float,
    lda: float,
    weights: LossWeights,
) -> LossReport:
    """Assemble the per-step report; total is linear in both weights."""
    total = mse + ce1 + weights.lambda1 * ce2 + weights.lambda2 * lda
    return LossReport(j_mse=mse, j_ce1=ce1, j_ce2=ce2, j_lda=lda, j_total=total)
