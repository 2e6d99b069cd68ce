"""Parameter bookkeeping, Adam updates and Kaiming initialization."""

from __future__ import annotations

import logging

import numpy as np

from ..rng import Rng
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ParamGroup:
    """Named trainable tensors with shared freeze state and Adam moments.

    While ``frozen`` is set, :func:`adam_step` leaves every value bit
    identical; gradients still flow through operations that use the
    parameters, they just never get applied.
    """

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.frozen = False
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r} in group {self.name!r}")
        tensor.requires_grad = True
        self.params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        return tensor

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def moment_items(self):
        """(name, m, v) triples in insertion order, for checkpointing."""
        for name in self.params:
            yield name, self._m[name], self._v[name]


def adam_step(
    group: ParamGroup,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter in the group.

    Frozen groups are skipped entirely (values, moments and step counter all
    unchanged); that is a warning, not an error. Parameters without a grad
    are treated as zero-gradient.
    """
    if group.frozen:
        logger.warning("adam_step skipped: group %r is frozen", group.name)
        return
    group.step_count += 1
    t = group.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in group.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = group._m[name]
        v = group._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def kaiming_init(shape: tuple[int, ...], fan_in: int, rng: Rng) -> Tensor:
    """Normal draws with std sqrt(2/fan_in), reproducible from the stream."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    n = 1
    for extent in shape:
        n *= extent
    values = np.fromiter(rng.normals(n), dtype=np.float64, count=n)
    return Tensor(values.reshape(shape) * std)
