"""Central-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import RankError
from .tensor import Tensor, concat


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor. The relative error per
    element uses denominator max(|analytic|, |numeric|, 1e-8). Meant for
    small shapes; cost is two evaluations of ``f`` per element.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step size h must lie in [1e-6, 1e-3], got {h}")
    x.requires_grad = True
    x.zero_grad()
    loss = f(x)
    if loss.data.size != 1:
        raise RankError(f"gradcheck needs a scalar-valued f, got shape {loss.shape}")
    loss.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        hi = f(Tensor(x.data)).item()
        flat[idx] = orig - h
        lo = f(Tensor(x.data)).item()
        flat[idx] = orig
        nflat[idx] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck_suite() -> list[tuple[str, float]]:
    """Finite-difference check of every layer primitive at small shapes.

    Returns (name, max relative error) per check; the whole sweep stays well
    under a minute. Inputs are fixed so reruns report identical numbers.
    """
    from . import layers

    rng = np.random.default_rng(20240916)

    def t(*shape):
        return Tensor(rng.normal(size=shape))

    x_conv = t(2, 2, 6, 6)
    w_conv = t(3, 2, 3, 3)
    b_conv = t(3)
    x_dec = t(2, 3, 3, 3)
    w_dec = t(3, 2, 4, 4)
    b_dec = t(2)
    gamma = Tensor(np.array([1.2, 0.8]))
    beta = Tensor(np.array([0.1, -0.2]))
    w_fc = t(8, 3)
    b_fc = t(3)
    bn_weights = t(2, 2, 4, 4)

    def bn_train(x):
        return layers.batchnorm2d(
            x, gamma, beta, training=True,
            running_mean=np.zeros(2), running_var=np.ones(2),
        )

    def bn_eval(x):
        return layers.batchnorm2d(
            x, gamma, beta, training=False,
            running_mean=np.array([0.1, -0.3]), running_var=np.array([1.4, 0.6]),
        )

    checks: list[tuple[str, Callable[[Tensor], Tensor], Tensor]] = [
        ("conv2d/input",
         lambda x: (layers.conv2d(x, w_conv, b_conv, 2, 1) ** 2).mean(), t(2, 2, 6, 6)),
        ("conv2d/weight",
         lambda w: (layers.conv2d(x_conv, w, b_conv, 2, 1) ** 2).mean(), t(3, 2, 3, 3)),
        ("conv2d/bias",
         lambda b: (layers.conv2d(x_conv, w_conv, b, 2, 1) ** 2).mean(), t(3)),
        ("deconv2d/input",
         lambda x: (layers.deconv2d(x, w_dec, b_dec, 2, 1) ** 2).mean(), t(2, 3, 3, 3)),
        ("deconv2d/weight",
         lambda w: (layers.deconv2d(x_dec, w, b_dec, 2, 1) ** 2).mean(), t(3, 2, 4, 4)),
        ("deconv2d/bias",
         lambda b: (layers.deconv2d(x_dec, w_dec, b, 2, 1) ** 2).mean(), t(2)),
        ("batchnorm2d/train",
         lambda x: (bn_train(x) * bn_weights).mean(), t(2, 2, 4, 4)),
        ("batchnorm2d/eval",
         lambda x: (bn_eval(x) ** 2).mean(), t(2, 2, 4, 4)),
        ("leaky_relu",
         lambda x: (layers.leaky_relu(x, 0.2) ** 2).mean(), t(3, 5)),
        ("global_avg_pool",
         lambda x: (layers.global_avg_pool(x) ** 2).sum(), t(2, 3, 4, 4)),
        ("linear",
         lambda x: (layers.linear(x, w_fc, b_fc) ** 2).mean(), t(4, 8)),
        ("elementwise-chain",
         lambda x: ((x * x + x * 0.5 + 2.0).exp().log() ** 2).mean(), t(3, 4)),
        ("reduce-reshape",
         lambda x: (x.reshape(2, 6).sum(axis=1) ** 2).mean(), t(3, 4)),
        ("concat-flip-slice",
         lambda x: (concat([x[:, :2], x.flip(axis=1)], axis=1) ** 2).mean(), t(3, 4)),
        ("division",
         lambda x: (x / (x * x + 2.0)).mean(), t(3, 3)),
    ]
    return [(name, finite_diff_gradcheck(fn, x0)) for name, fn, x0 in checks]
