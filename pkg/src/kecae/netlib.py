"""Network definitions: strided-conv encoder with dual latent heads, mirrored
deconv decoder, and a two-branch shared-weight patch classifier fused through
per-block global average pooling.

The encoder trunk halves the spatial extent once per block, so a model built
from ``n`` blocks maps ``side`` to ``side / 2**n``; two parallel 1x1
projection heads then emit the unrelated and key feature maps (equal shapes,
so their element-wise sum is always defined). The decoder mirrors the trunk
with stride-2 k=4 deconvolutions and finishes with a plain deconvolution to
one channel (identity output; clamping to [0, 1] happens only at image
export).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datakit import patch_geometry
from .diffcore import (
    ParamGroup,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    deconv2d,
    global_avg_pool,
    kaiming_init,
    leaky_relu,
    linear,
)
from .errors import DimensionError
from .rng import Rng, derive_seed

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ArchConfig:
    """Geometry of the encoder/decoder/discriminator stack."""

    input_side: int
    block_channels: tuple[int, ...]
    latent_depth: int
    enc_kernel: int = 3
    dec_kernel: int = 4
    leaky_slope: float = 0.2
    disc_channels: tuple[int, ...] = (16, 32, 64, 128)
    preset: str = "custom"

    def __post_init__(self):
        halvings = 2 ** len(self.block_channels)
        if self.input_side % halvings != 0 or self.input_side // halvings < 1:
            raise DimensionError(
                f"input side {self.input_side} is not divisible by "
                f"2^{len(self.block_channels)} block halvings"
            )

    @property
    def latent_side(self) -> int:
        return self.input_side // 2 ** len(self.block_channels)

    @staticmethod
    def desk() -> "ArchConfig":
        return ArchConfig(
            input_side=64,
            block_channels=(16, 32, 64, 64, 128, 128),
            latent_depth=64,
            preset="desk",
        )

    @staticmethod
    def paper() -> "ArchConfig":
        return ArchConfig(
            input_side=128,
            block_channels=(32, 64, 128, 256, 512, 1024, 2048),
            latent_depth=2048,
            disc_channels=(32, 64, 128, 256),
            preset="paper",
        )

    @staticmethod
    def from_preset(name: str) -> "ArchConfig":
        presets = {"desk": ArchConfig.desk, "paper": ArchConfig.paper}
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(presets)}")
        return presets[name]()


@dataclass
class LatentPair:
    """Per-image pair of unrelated (hU) and key (hK) feature maps."""

    hU: Tensor
    hK: Tensor

    def __post_init__(self):
        if self.hU.shape != self.hK.shape:
            raise DimensionError(
                f"latent maps must share a shape, got {self.hU.shape} vs {self.hK.shape}"
            )


@dataclass
class DiscOutput:
    """Classifier logits plus their softmax, one row per sample."""

    logits: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        z = self.logits.data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def fuse(pair: LatentPair) -> Tensor:
    """Element-wise sum of the unrelated and key maps."""
    return pair.hU + pair.hK


def exchange(p1: LatentPair, p2: LatentPair) -> tuple[Tensor, Tensor]:
    """Swap key maps across the pair: (h1U + h2K, h2U + h1K)."""
    if p1.hU.shape != p2.hU.shape:
        raise DimensionError(
            f"latent pairs must share a shape, got {p1.hU.shape} vs {p2.hU.shape}"
        )
    return p1.hU + p2.hK, p2.hU + p1.hK


def flatten_latent(h: Tensor) -> Tensor:
    """(N, D, h, w) -> (N, D*h*w) per-sample vectors."""
    n = h.shape[0]
    return h.reshape(n, -1)


class _ConvBlock:
    """conv/deconv -> batch norm -> leaky ReLU, with owned running stats."""

    def __init__(
        self,
        group: ParamGroup,
        buffers: dict[str, np.ndarray],
        prefix: str,
        cin: int,
        cout: int,
        k: int,
        stride: int,
        pad: int,
        slope: float,
        rng: Rng,
        transposed: bool = False,
        normalized: bool = True,
    ):
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        self.w = group.add(f"{prefix}.w", kaiming_init(shape, fan_in=cin * k * k, rng=rng))
        self.b = group.add(f"{prefix}.b", Tensor(np.zeros(cout)))
        self.stride = stride
        self.pad = pad
        self.slope = slope
        self.transposed = transposed
        self.normalized = normalized
        if normalized:
            self.gamma = group.add(f"{prefix}.gamma", Tensor(np.ones(cout)))
            self.beta = group.add(f"{prefix}.beta", Tensor(np.zeros(cout)))
            self.running_mean = np.zeros(cout)
            self.running_var = np.ones(cout)
            buffers[f"{prefix}.running_mean"] = self.running_mean
            buffers[f"{prefix}.running_var"] = self.running_var

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        op = deconv2d if self.transposed else conv2d
        y = op(x, self.w, self.b, self.stride, self.pad)
        if not self.normalized:
            return y
        y = batchnorm2d(
            y,
            self.gamma,
            self.beta,
            training=training,
            running_mean=self.running_mean,
            running_var=self.running_var,
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
        )
        return leaky_relu(y, self.slope)


class PatchClassifier:
    """Two-branch shared-weight conv net over a lateral/medial patch pair.

    Each branch runs the same block stack; a global-average-pool vector is
    taken after every block, all pooled vectors from both branches are
    concatenated (fixed order: lateral then medial) and mapped by one linear
    layer to two logits. Serves as the training-time supervisor and,
    reinitialized from scratch, as the reference downstream classifier.
    """

    def __init__(
        self,
        channels: tuple[int, ...],
        slope: float,
        rng: Rng,
        group: ParamGroup | None = None,
        buffers: dict[str, np.ndarray] | None = None,
        prefix: str = "disc",
    ):
        self.group = ParamGroup("classifier") if group is None else group
        self.buffers = {} if buffers is None else buffers
        self._blocks = []
        cin = 1
        for i, cout in enumerate(channels, start=1):
            self._blocks.append(
                _ConvBlock(
                    self.group, self.buffers, f"{prefix}.b{i}", cin, cout, 3, 2, 1, slope, rng
                )
            )
            cin = cout
        gap_width = 2 * sum(channels)
        self._fc_w = self.group.add(
            f"{prefix}.fc.w", kaiming_init((gap_width, 2), fan_in=gap_width, rng=rng)
        )
        self._fc_b = self.group.add(f"{prefix}.fc.b", Tensor(np.zeros(2)))

    def forward(self, patches: Tensor, training: bool) -> DiscOutput:
        if patches.data.ndim != 4 or patches.shape[1] != 2:
            raise DimensionError(
                f"patch classifier expects (N, 2, p, p) input, got {patches.shape}"
            )
        branch_feats = []
        for idx in (0, 1):  # fixed order: lateral then medial
            h = patches[:, idx : idx + 1]
            gaps = []
            for block in self._blocks:
                h = block(h, training)
                gaps.append(global_avg_pool(h))
            branch_feats.append(concat(gaps, axis=1))
        fused = concat(branch_feats, axis=1)
        return DiscOutput(logits=linear(fused, self._fc_w, self._fc_b))


class KeCaeModel:
    """Encoder, decoder and discriminator with their parameter groups.

    All encoder/decoder parameters live in the ``gen`` group and all
    discriminator parameters in ``disc``, so freezing ``disc`` can never pin
    anything in the generator path. The model is safe to share for read-only
    inference; training mutates parameters and batch-norm buffers.
    """

    def __init__(self, arch: ArchConfig, seed: int):
        self.arch = arch
        self.training = True
        self.gen = ParamGroup("gen")
        self.disc = ParamGroup("disc")
        self.buffers: dict[str, np.ndarray] = {}
        rng = Rng(derive_seed(seed, 0x1A17))

        slope = arch.leaky_slope
        ke, kd = arch.enc_kernel, arch.dec_kernel

        self._enc_blocks = []
        cin = 1
        for i, cout in enumerate(arch.block_channels, start=1):
            self._enc_blocks.append(
                _ConvBlock(
                    self.gen, self.buffers, f"enc.b{i}", cin, cout, ke, 2, 1, slope, rng
                )
            )
            cin = cout
        trunk_depth = cin
        d = arch.latent_depth
        self._head_u_w = self.gen.add(
            "enc.headU.w", kaiming_init((d, trunk_depth, 1, 1), fan_in=trunk_depth, rng=rng)
        )
        self._head_u_b = self.gen.add("enc.headU.b", Tensor(np.zeros(d)))
        self._head_k_w = self.gen.add(
            "enc.headK.w", kaiming_init((d, trunk_depth, 1, 1), fan_in=trunk_depth, rng=rng)
        )
        self._head_k_b = self.gen.add("enc.headK.b", Tensor(np.zeros(d)))

        # mirrored channel ladder; the latent head replaces the trunk's top
        # width, so the ladder starts one step below the reversed list
        dec_outs = list(reversed(arch.block_channels))[1:] + [1]
        self._dec_blocks = []
        cin = d
        for i, cout in enumerate(dec_outs, start=1):
            last = i == len(dec_outs)
            self._dec_blocks.append(
                _ConvBlock(
                    self.gen,
                    self.buffers,
                    f"dec.b{i}",
                    cin,
                    cout,
                    kd,
                    2,
                    1,
                    slope,
                    rng,
                    transposed=True,
                    normalized=not last,
                )
            )
            cin = cout

        self._disc_net = PatchClassifier(
            arch.disc_channels,
            slope,
            rng,
            group=self.disc,
            buffers=self.buffers,
            prefix="disc",
        )

    def train_mode(self) -> None:
        self.training = True

    def eval_mode(self) -> None:
        self.training = False

    # -- forward passes ------------------------------------------------------

    def encode(self, x: Tensor) -> LatentPair:
        """Run the shared trunk and project into (unrelated, key) maps."""
        side = self.arch.input_side
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (side, side):
            raise DimensionError(
                f"encoder expects (N, 1, {side}, {side}) input, got {x.shape}"
            )
        h = x
        for block in self._enc_blocks:
            h = block(h, self.training)
        hu = conv2d(h, self._head_u_w, self._head_u_b, 1, 0)
        hk = conv2d(h, self._head_k_w, self._head_k_b, 1, 0)
        return LatentPair(hU=hu, hK=hk)

    def decode(self, h: Tensor) -> Tensor:
        """Latent map -> image-shaped tensor (unclamped)."""
        ls = self.arch.latent_side
        expected = (self.arch.latent_depth, ls, ls)
        if h.data.ndim != 4 or h.shape[1:] != expected:
            raise DimensionError(
                f"decoder expects (N, {expected[0]}, {ls}, {ls}) latent, got {h.shape}"
            )
        y = h
        for block in self._dec_blocks:
            y = block(y, self.training)
        return y

    def discriminate(self, patches: Tensor) -> DiscOutput:
        """Score a (N, 2, p, p) lateral/medial patch pair batch."""
        return self._disc_net.forward(patches, self.training)

    # -- state access ----------------------------------------------------------

    def state_items(self):
        """All persistent arrays as (name, array) in a fixed order."""
        for name, p in self.gen.params.items():
            yield f"gen.{name}", p.data
        for name, p in self.disc.params.items():
            yield f"disc.{name}", p.data
        for name, buf in self.buffers.items():
            yield f"buf.{name}", buf


def patch_pair_tensor(images: Tensor) -> Tensor:
    """Differentiable lateral/medial patch extraction from (N, 1, S, S).

    Matches the numpy-side extraction geometry; the medial crop is mirrored
    so symptom sides align across the two channels.
    """
    if images.data.ndim != 4 or images.shape[1] != 1:
        raise DimensionError(f"expected (N, 1, S, S) images, got {images.shape}")
    side = images.shape[2]
    q, row0, col_lat, col_med = patch_geometry(side)
    lateral = images[:, :, row0 : row0 + q, col_lat : col_lat + q]
    medial = images[:, :, row0 : row0 + q, col_med : col_med + q].flip(axis=3)
    return concat([lateral, medial], axis=1)
