"""Training loop: alternating discriminator/generator updates with the
discriminator frozen while the generator learns, plus checkpointing,
metrics and post-training synthesis.

One step runs, in order: (1) cross-entropy update of the discriminator on
real (augmented) patch pairs; (2) freeze; (3) encode both inputs, fuse and
decode the reconstructions; (4) reconstruction loss; (5) swap key maps and
decode the exchanged outputs; (6) score the exchanged outputs under
exchanged labels; (7) latent separation loss on both pairs; (8) Adam step of
the generator on mse + lambda1*ce2 + lambda2*lda; (9) unfreeze.

Determinism: every random choice (epoch shuffles, per-batch augmentation)
comes from a stream derived from (seed, epoch, batch), so a resumed run
replays exactly the same draws as an uninterrupted one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datakit import KL0, KL2, augment_image, extract_patches, label_index
from .diffcore import Tensor, adam_step, concat
from .errors import DataError, DimensionError, DivergenceError
from .lossfns import LossReport, LossWeights, j_ce1, j_ce2, j_lda, j_mse, j_total
from .netlib import (
    ArchConfig,
    DiscOutput,
    KeCaeModel,
    LatentPair,
    exchange,
    fuse,
    patch_pair_tensor,
)
from .rng import Rng, derive_seed

_MODEL_TAG = 0x30DE1
_EPOCH_TAG = 0xE70C
_AUG_TAG = 0xA06
METRICS_HEADER = ["epoch", "j_mse", "j_ce1", "j_ce2", "j_lda", "j_total"]


@dataclass(frozen=True)
class TrainConfig:
    """Run settings; field defaults are the desk-scale working point."""

    arch: ArchConfig = field(default_factory=ArchConfig.desk)
    epochs: int = 50
    batch_size: int = 30
    lr_gen: float = 1e-4
    lr_disc: float = 1e-5
    weights: LossWeights = field(default_factory=lambda: LossWeights(1e-2, 1e-3))
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    pair_sample_n: int = 2000
    lda_eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainData:
    """Images plus the sampled (class-0 id, class-2 id) pair list."""

    images: dict[str, np.ndarray]
    grades: dict[str, int]
    pairs: list[tuple[str, str]]

    def __post_init__(self):
        if not self.pairs:
            raise DataError("training needs a non-empty pair list")
        for a, b in self.pairs:
            if a not in self.images or b not in self.images:
                raise DataError(f"pair ({a}, {b}) references unknown image ids")
            if self.grades[a] != KL0 or self.grades[b] != KL2:
                raise DataError(
                    f"pair ({a}, {b}) violates the (KL-0, KL-2) ordering: "
                    f"grades ({self.grades[a]}, {self.grades[b]})"
                )


def train_data_from_split(split, pairs: list[tuple[str, str]]) -> TrainData:
    """Adapt a datakit SplitData plus a sampled pair list."""
    grades = {image_id: grade for image_id, grade in split.records}
    return TrainData(images=split.images, grades=grades, pairs=pairs)


def build_model(config: TrainConfig) -> KeCaeModel:
    return KeCaeModel(config.arch, derive_seed(config.seed, _MODEL_TAG))


# ---------------------------------------------------------------------------
# single step
# ---------------------------------------------------------------------------


def _patch_batch(images: np.ndarray) -> np.ndarray:
    """(B, S, S) numpy images -> (B, 2, q, q) lateral/medial patch stacks."""
    stacks = []
    for img in images:
        lateral, medial = extract_patches(img)
        stacks.append(np.stack([lateral, medial]))
    return np.stack(stacks)


def train_step(
    model: KeCaeModel,
    x1: np.ndarray,
    x2: np.ndarray,
    config: TrainConfig,
    aug_rng: Rng,
) -> LossReport:
    """One pass of the learning algorithm over a (class-0, class-2) batch."""
    if x1.shape != x2.shape:
        raise DataError(f"batch halves differ in shape: {x1.shape} vs {x2.shape}")
    n = x1.shape[0]
    y1 = np.full(n, label_index(KL0))
    y2 = np.full(n, label_index(KL2))

    # Both halves of the pair ride through every network as one batch (the
    # dual-input formulation); [:n] is always the class-0 half.

    # (1) discriminator update on real patches, optionally augmented
    if config.augment:
        d_in = np.stack(
            [augment_image(img, aug_rng) for img in x1]
            + [augment_image(img, aug_rng) for img in x2]
        )
    else:
        d_in = np.concatenate([x1, x2])
    d_real = model.discriminate(Tensor(_patch_batch(d_in)))
    d1 = DiscOutput(d_real.logits[:n])
    d2 = DiscOutput(d_real.logits[n:])
    ce1 = j_ce1(d1, d2, y1, y2)
    ce1.backward()
    adam_step(model.disc, config.lr_disc)
    model.disc.zero_grad()

    # (2) freeze: values must stay bit-identical until (9)
    model.disc.freeze()
    try:
        # (3) reconstruction path
        xt = Tensor(np.concatenate([x1, x2])[:, None, :, :])
        latents = model.encode(xt)
        p1 = LatentPair(latents.hU[:n], latents.hK[:n])
        p2 = LatentPair(latents.hU[n:], latents.hK[n:])
        recon = model.decode(concat([fuse(p1), fuse(p2)]))
        # (4)
        mse = j_mse(xt[:n], recon[:n], xt[n:], recon[n:])
        # (5) exchange path
        h1p, h2p = exchange(p1, p2)
        exchanged = model.decode(concat([h1p, h2p]))
        # (6) exchanged outputs under exchanged labels; gradients flow into
        # the generator through the frozen discriminator's operations
        d_fake = model.discriminate(patch_pair_tensor(exchanged))
        ce2 = j_ce2(DiscOutput(d_fake.logits[:n]), DiscOutput(d_fake.logits[n:]), y1, y2)
        # (7)
        lda = j_lda(p1.hU, p1.hK, config.lda_eps) + j_lda(p2.hU, p2.hK, config.lda_eps)
        # (8)
        gen_loss = mse + config.weights.lambda1 * ce2 + config.weights.lambda2 * lda
        gen_loss.backward()
        adam_step(model.gen, config.lr_gen)
        model.gen.zero_grad()
        model.disc.zero_grad()
    finally:
        # (9)
        model.disc.unfreeze()

    report = j_total(mse.item(), ce1.item(), ce2.item(), lda.item(), config.weights)
    if not all(math.isfinite(v) for v in report.as_row()):
        raise DivergenceError(f"non-finite loss encountered: {report}")
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0  # epoch currently in progress
    next_batch: int = 0  # first batch of `epoch` not yet executed
    global_step: int = 0
    loss_sums: list[float] = field(default_factory=lambda: [0.0] * 5)


def _arch_to_pairs(arch: ArchConfig) -> list[tuple[str, str]]:
    return [
        ("arch.input_side", str(arch.input_side)),
        ("arch.block_channels", ",".join(map(str, arch.block_channels))),
        ("arch.latent_depth", str(arch.latent_depth)),
        ("arch.enc_kernel", str(arch.enc_kernel)),
        ("arch.dec_kernel", str(arch.dec_kernel)),
        ("arch.leaky_slope", repr(arch.leaky_slope)),
        ("arch.disc_channels", ",".join(map(str, arch.disc_channels))),
        ("arch.preset", arch.preset),
    ]


def config_to_text(config: TrainConfig) -> str:
    pairs = _arch_to_pairs(config.arch) + [
        ("epochs", str(config.epochs)),
        ("batch_size", str(config.batch_size)),
        ("lr_gen", repr(config.lr_gen)),
        ("lr_disc", repr(config.lr_disc)),
        ("lambda1", repr(config.weights.lambda1)),
        ("lambda2", repr(config.weights.lambda2)),
        ("seed", str(config.seed)),
        ("checkpoint_every", str(config.checkpoint_every)),
        ("pair_sample_n", str(config.pair_sample_n)),
        ("lda_eps", repr(config.lda_eps)),
        ("augment", "1" if config.augment else "0"),
    ]
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def config_from_text(text: str) -> TrainConfig:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    arch = ArchConfig(
        input_side=int(kv["arch.input_side"]),
        block_channels=tuple(int(c) for c in kv["arch.block_channels"].split(",")),
        latent_depth=int(kv["arch.latent_depth"]),
        enc_kernel=int(kv["arch.enc_kernel"]),
        dec_kernel=int(kv["arch.dec_kernel"]),
        leaky_slope=float(kv["arch.leaky_slope"]),
        disc_channels=tuple(int(c) for c in kv["arch.disc_channels"].split(",")),
        preset=kv["arch.preset"],
    )
    return TrainConfig(
        arch=arch,
        epochs=int(kv["epochs"]),
        batch_size=int(kv["batch_size"]),
        lr_gen=float(kv["lr_gen"]),
        lr_disc=float(kv["lr_disc"]),
        weights=LossWeights(float(kv["lambda1"]), float(kv["lambda2"])),
        seed=int(kv["seed"]),
        checkpoint_every=int(kv["checkpoint_every"]),
        pair_sample_n=int(kv["pair_sample_n"]),
        lda_eps=float(kv["lda_eps"]),
        augment=kv["augment"] == "1",
    )


def _checkpoint_arrays(model: KeCaeModel) -> list[tuple[str, np.ndarray]]:
    arrays = list(model.state_items())
    for group in (model.gen, model.disc):
        for name, m, v in group.moment_items():
            arrays.append((f"adam.{group.name}.{name}.m", m))
            arrays.append((f"adam.{group.name}.{name}.v", v))
    return arrays


def save_checkpoint(
    ckpt_dir: str | Path,
    model: KeCaeModel,
    config: TrainConfig,
    state: TrainState,
) -> None:
    """Write manifest.tsv + weights.bin + config.txt + rng.txt."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    arrays = _checkpoint_arrays(model)
    offset = 0
    manifest_rows = []
    with open(ckpt_dir / "weights.bin", "wb") as blob:
        for name, arr in arrays:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            shape = "x".join(map(str, arr.shape)) or "1"
            manifest_rows.append((name, "<f8", shape, offset, len(raw)))
            blob.write(raw)
            offset += len(raw)
    with open(ckpt_dir / "manifest.tsv", "w") as fh:
        for row in manifest_rows:
            fh.write("\t".join(map(str, row)) + "\n")
    (ckpt_dir / "config.txt").write_text(config_to_text(config))
    rng_lines = [
        f"seed = {config.seed}",
        f"epoch = {state.epoch}",
        f"next_batch = {state.next_batch}",
        f"global_step = {state.global_step}",
        f"adam_t_gen = {model.gen.step_count}",
        f"adam_t_disc = {model.disc.step_count}",
        f"loss_sums = {','.join(repr(v) for v in state.loss_sums)}",
    ]
    (ckpt_dir / "rng.txt").write_text("".join(line + "\n" for line in rng_lines))


def load_checkpoint(ckpt_dir: str | Path) -> tuple[KeCaeModel, TrainConfig, TrainState]:
    ckpt_dir = Path(ckpt_dir)
    config = config_from_text((ckpt_dir / "config.txt").read_text())
    model = build_model(config)

    blob = (ckpt_dir / "weights.bin").read_bytes()
    loaded: dict[str, np.ndarray] = {}
    for line in (ckpt_dir / "manifest.tsv").read_text().splitlines():
        name, dtype, shape_s, offset_s, length_s = line.split("\t")
        shape = tuple(int(s) for s in shape_s.split("x"))
        offset, length = int(offset_s), int(length_s)
        arr = np.frombuffer(blob[offset : offset + length], dtype=dtype).reshape(shape)
        loaded[name] = arr.astype(np.float64)

    targets = dict(_checkpoint_arrays(model))
    if set(targets) != set(loaded):
        missing = set(targets) ^ set(loaded)
        raise DimensionError(f"checkpoint/model structure mismatch on: {sorted(missing)[:5]}")
    for name, arr in loaded.items():
        if targets[name].shape != arr.shape:
            raise DimensionError(
                f"checkpoint array {name} has shape {arr.shape}, model expects "
                f"{targets[name].shape}"
            )
        targets[name][...] = arr

    kv = {}
    for line in (ckpt_dir / "rng.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    model.gen.step_count = int(kv["adam_t_gen"])
    model.disc.step_count = int(kv["adam_t_disc"])
    state = TrainState(
        epoch=int(kv["epoch"]),
        next_batch=int(kv["next_batch"]),
        global_step=int(kv["global_step"]),
        loss_sums=[float(v) for v in kv["loss_sums"].split(",")],
    )
    return model, config, state


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    epoch_reports: list[LossReport]
    model: KeCaeModel


def _epoch_batches(
    config: TrainConfig, n_pairs: int, epoch: int
) -> list[list[int]]:
    """Deterministic pair order for an epoch, chunked into batches.

    A trailing chunk smaller than 2 cannot pass batch norm and is dropped.
    """
    order = list(range(n_pairs))
    Rng(derive_seed(config.seed, _EPOCH_TAG, epoch)).shuffle(order)
    batches = [
        order[i : i + config.batch_size] for i in range(0, n_pairs, config.batch_size)
    ]
    return [b for b in batches if len(b) >= 2]


def _assemble(data: TrainData, pair_ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    x1 = np.stack([data.images[data.pairs[i][0]] for i in pair_ids])
    x2 = np.stack([data.images[data.pairs[i][1]] for i in pair_ids])
    return x1, x2


def train(
    config: TrainConfig,
    data: TrainData,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the training loop, writing metrics.csv and checkpoint/ under out_dir.

    With ``resume_from`` pointing at a checkpoint directory, the loop picks
    up at the saved (epoch, batch) position and reproduces exactly the losses
    an uninterrupted run would have seen.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"

    if resume_from is not None:
        # everything but the loop bounds must come from the checkpoint, or
        # the derived random streams would no longer line up
        model, saved, state = load_checkpoint(resume_from)
        config = replace(
            saved, epochs=config.epochs, checkpoint_every=config.checkpoint_every
        )
        mode = "a"
    else:
        model = build_model(config)
        state = TrainState()
        mode = "w"
    model.train_mode()

    n_pairs = len(data.pairs)
    if config.batch_size > n_pairs:
        raise DataError(
            f"batch size {config.batch_size} exceeds the {n_pairs} sampled pairs"
        )

    epoch_reports: list[LossReport] = []
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        while state.epoch < config.epochs:
            batches = _epoch_batches(config, n_pairs, state.epoch)
            while state.next_batch < len(batches):
                pair_ids = batches[state.next_batch]
                aug_rng = Rng(
                    derive_seed(config.seed, _AUG_TAG, state.epoch, state.next_batch)
                )
                x1, x2 = _assemble(data, pair_ids)
                try:
                    report = train_step(model, x1, x2, config, aug_rng)
                except DivergenceError as err:
                    raise DivergenceError(
                        f"epoch {state.epoch}, step {state.global_step}: {err}"
                    ) from None
                for i, v in enumerate(report.as_row()):
                    state.loss_sums[i] += v
                state.next_batch += 1
                state.global_step += 1
                if (
                    config.checkpoint_every
                    and state.global_step % config.checkpoint_every == 0
                ):
                    save_checkpoint(
                        out_dir / f"ckpt_step{state.global_step:06d}",
                        model,
                        config,
                        state,
                    )
            means = [s / len(batches) for s in state.loss_sums]
            epoch_reports.append(LossReport(*means))
            writer.writerow([state.epoch] + [repr(v) for v in means])
            fh.flush()
            state.epoch += 1
            state.next_batch = 0
            state.loss_sums = [0.0] * 5

    ckpt_dir = out_dir / "checkpoint"
    save_checkpoint(ckpt_dir, model, config, state)
    return TrainResult(
        checkpoint_dir=ckpt_dir,
        metrics_path=metrics_path,
        epoch_reports=epoch_reports,
        model=model,
    )


# ---------------------------------------------------------------------------
# post-training synthesis
# ---------------------------------------------------------------------------


@dataclass
class GeneratedImage:
    pixels: np.ndarray  # clamped to [0, 1]
    kl_grade: int
    kind: str  # "recon" | "exchanged"
    source_id: str
    partner_id: str


def generate(
    model: KeCaeModel,
    pairs: list[tuple[str, str]],
    images: dict[str, np.ndarray],
    grades: dict[str, int],
    batch: int = 64,
) -> list[GeneratedImage]:
    """Reconstructions with original labels + exchanged outputs with swapped
    labels, four images per input pair, batch-norm in eval mode."""
    for a, b in pairs:
        if grades[a] != KL0 or grades[b] != KL2:
            raise DataError(f"pair ({a}, {b}) violates the (KL-0, KL-2) ordering")
    model.eval_mode()
    out: list[GeneratedImage] = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        x1 = Tensor(np.stack([images[a] for a, _ in chunk])[:, None])
        x2 = Tensor(np.stack([images[b] for _, b in chunk])[:, None])
        p1 = model.encode(x1)
        p2 = model.encode(x2)
        xh1 = np.clip(model.decode(fuse(p1)).data, 0.0, 1.0)
        xh2 = np.clip(model.decode(fuse(p2)).data, 0.0, 1.0)
        h1p, h2p = exchange(p1, p2)
        x1p = np.clip(model.decode(h1p).data, 0.0, 1.0)
        x2p = np.clip(model.decode(h2p).data, 0.0, 1.0)
        for i, (a, b) in enumerate(chunk):
            out.append(GeneratedImage(xh1[i, 0], KL0, "recon", a, b))
            out.append(GeneratedImage(xh2[i, 0], KL2, "recon", b, a))
            # exchanged outputs carry the partner's label
            out.append(GeneratedImage(x1p[i, 0], KL2, "exchanged", a, b))
            out.append(GeneratedImage(x2p[i, 0], KL0, "exchanged", b, a))
    return out


def latent_features(
    model: KeCaeModel,
    ids: list[str],
    images: dict[str, np.ndarray],
    batch: int = 128,
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (hU, hK) features flattened to one vector per image."""
    model.eval_mode()
    us, ks = [], []
    for start in range(0, len(ids), batch):
        chunk = ids[start : start + batch]
        x = Tensor(np.stack([images[i] for i in chunk])[:, None])
        pair = model.encode(x)
        n = len(chunk)
        us.append(pair.hU.data.reshape(n, -1))
        ks.append(pair.hK.data.reshape(n, -1))
    return np.concatenate(us), np.concatenate(ks)
