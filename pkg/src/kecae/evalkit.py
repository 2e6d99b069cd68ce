"""Evaluation machinery: RBF-kernel SVM probe (SMO-trained, in-repo), weight
grid search, sample-size study, augmentation benefit protocol and the
non-learned joint-gap oracle.

Grid cells and seed replicates are independent jobs; ``KECAE_THREADS``
(default 1, which keeps runs exactly serial) caps the worker pool. Every job
derives its own random stream from (cell, seed) so results do not depend on
scheduling order.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datakit import KL2_GAP_RANGE, extract_patches, label_index, sample_pairs
from .diffcore import (
    ParamGroup,
    Tensor,
    adam_step,
    conv2d,
    global_avg_pool,
    kaiming_init,
    leaky_relu,
    linear,
)
from .errors import DataError, DivergenceError
from .lossfns import LossWeights, j_ce
from .netlib import DiscOutput, KeCaeModel, PatchClassifier
from .rng import Rng, derive_seed
from .trainer import (
    TrainConfig,
    TrainData,
    generate,
    latent_features,
    train,
)

DECADE_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
INPUT_SETS = ("x", "x+xhat", "x+xprime", "x+xhat+xprime")


def worker_count() -> int:
    """Worker cap from KECAE_THREADS; default 1 for strictly serial runs."""
    try:
        return max(1, int(os.environ.get("KECAE_THREADS", "1")))
    except ValueError:
        return 1


def run_jobs(jobs):
    """Run callables, serially or on the capped pool; results keep order."""
    workers = worker_count()
    if workers == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: j(), jobs))


# ---------------------------------------------------------------------------
# SVM probe (sequential minimal optimization, RBF kernel)
# ---------------------------------------------------------------------------


@dataclass
class ProbeModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i over support vectors
    bias: float
    gamma: float
    C: float

    def decision(self, features: np.ndarray) -> np.ndarray:
        k = _rbf_kernel(features, self.support_vectors, self.gamma)
        return k @ self.dual_coef + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.decision(features) >= 0.0).astype(int)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(features) == np.asarray(labels)).mean())


def _rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (
        (a * a).sum(axis=1)[:, None]
        - 2.0 * (a @ b.T)
        + (b * b).sum(axis=1)[None, :]
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


def probe_train(
    features: np.ndarray,
    labels: np.ndarray,
    C: float = 1.0,
    gamma: float | None = None,
    tol: float = 1e-3,
    max_passes: int = 5,
    max_iter: int = 200,
) -> ProbeModel:
    """Fit a binary RBF-kernel SVM with a deterministic SMO sweep.

    ``labels`` are {0, 1} class indices. The second working-set index is
    chosen by the largest |E_i - E_j| step heuristic with smallest-index tie
    breaking, so identical inputs always give identical models.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = features.shape
    classes = np.unique(labels)
    if classes.size < 2:
        raise DataError("probe needs samples from both classes")
    if n < 4:
        raise DataError(f"probe needs >= 2 samples per class, got {n} total")
    y = np.where(labels == classes.max(), 1.0, -1.0)
    if gamma is None:
        var = features.var()
        gamma = 1.0 / (d * var) if var > 0 else 1.0

    kernel = _rbf_kernel(features, features, gamma)
    alpha = np.zeros(n)
    bias = 0.0
    # decision values cache: f_i = sum_j alpha_j y_j K_ij + b
    fcache = np.full(n, bias)

    passes = 0
    iters = 0
    while passes < max_passes and iters < max_iter:
        iters += 1
        changed = 0
        for i in range(n):
            err_i = fcache[i] - y[i]
            if not (
                (y[i] * err_i < -tol and alpha[i] < C)
                or (y[i] * err_i > tol and alpha[i] > 0)
            ):
                continue
            errs = fcache - y
            gaps = np.abs(err_i - errs)
            gaps[i] = -1.0
            j = int(np.argmax(gaps))  # ties -> smallest index
            if i == j:
                continue
            err_j = fcache[j] - y[j]
            ai_old, aj_old = alpha[i], alpha[j]
            if y[i] != y[j]:
                low = max(0.0, aj_old - ai_old)
                high = min(C, C + aj_old - ai_old)
            else:
                low = max(0.0, ai_old + aj_old - C)
                high = min(C, ai_old + aj_old)
            if low >= high:
                continue
            eta = 2.0 * kernel[i, j] - kernel[i, i] - kernel[j, j]
            if eta >= 0.0:
                continue
            aj = aj_old - y[j] * (err_i - err_j) / eta
            aj = min(high, max(low, aj))
            if abs(aj - aj_old) < 1e-7:
                continue
            ai = ai_old + y[i] * y[j] * (aj_old - aj)
            alpha[i], alpha[j] = ai, aj

            b1 = (
                bias
                - err_i
                - y[i] * (ai - ai_old) * kernel[i, i]
                - y[j] * (aj - aj_old) * kernel[i, j]
            )
            b2 = (
                bias
                - err_j
                - y[i] * (ai - ai_old) * kernel[i, j]
                - y[j] * (aj - aj_old) * kernel[j, j]
            )
            if 0.0 < ai < C:
                new_bias = b1
            elif 0.0 < aj < C:
                new_bias = b2
            else:
                new_bias = 0.5 * (b1 + b2)
            fcache += (
                y[i] * (ai - ai_old) * kernel[:, i]
                + y[j] * (aj - aj_old) * kernel[:, j]
                + (new_bias - bias)
            )
            bias = new_bias
            changed += 1
        passes = passes + 1 if changed == 0 else 0

    keep = alpha > 1e-7
    return ProbeModel(
        support_vectors=features[keep].copy(),
        dual_coef=(alpha * y)[keep].copy(),
        bias=bias,
        gamma=gamma,
        C=C,
    )


# ---------------------------------------------------------------------------
# joint-gap oracle
# ---------------------------------------------------------------------------


def otsu_threshold(values: np.ndarray) -> float | None:
    """Bimodal threshold maximizing between-class variance; None if flat."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.size
    if n < 2 or values[0] == values[-1]:
        return None
    best_score, best_thr = -1.0, None
    total_mean = values.mean()
    cum = np.cumsum(values)
    for split in range(1, n):
        if values[split] == values[split - 1]:
            continue
        w0 = split / n
        w1 = 1.0 - w0
        mu0 = cum[split - 1] / split
        mu1 = (cum[-1] - cum[split - 1]) / (n - split)
        score = w0 * w1 * (mu0 - mu1) ** 2
        if score > best_score:
            best_score = score
            best_thr = 0.5 * (values[split - 1] + values[split])
    if best_score <= 0.0:
        return None
    return best_thr


def gap_width_estimate(image: np.ndarray) -> float | None:
    """Joint-gap width in pixels from the row-mean intensity profile.

    Rows darker than the bimodal threshold form candidate gap runs; the run
    containing the darkest row is the estimate (the gap is the darkest
    region by construction, which keeps shaded bone bands from being picked
    up). Returns None when no gap is detectable (flat image, or nothing
    below threshold).
    """
    rows = np.asarray(image, dtype=np.float64).mean(axis=1)
    thr = otsu_threshold(rows)
    if thr is None:
        return None
    below = rows < thr
    if not below.any() or below.all():
        return None
    darkest = int(np.argmin(rows))
    if not below[darkest]:
        return None
    start = darkest
    while start > 0 and below[start - 1]:
        start -= 1
    stop = darkest
    while stop + 1 < rows.size and below[stop + 1]:
        stop += 1
    return float(stop - start + 1)


def _range_distance(value: float | None, lo: float, hi: float) -> float:
    if value is None:
        return float("inf")
    return max(lo - value, 0.0, value - hi)


def exchange_semantics(
    model: KeCaeModel,
    pairs: list[tuple[str, str]],
    images: dict[str, np.ndarray],
    grades: dict[str, int],
) -> tuple[float, list[dict]]:
    """Fraction of pairs where the exchanged class-0 image lands nearer the
    class-2 gap range than its plain reconstruction does."""
    side = next(iter(images.values())).shape[0]
    lo = KL2_GAP_RANGE[0] * side
    hi = KL2_GAP_RANGE[1] * side
    outputs = generate(model, pairs, images, grades)
    rows = []
    hits = 0
    # generate() emits 4 outputs per pair in order: recon of the class-0
    # input, recon of the class-2 input, then the two exchanged outputs
    for offset, (a, b) in enumerate(pairs):
        group = outputs[4 * offset : 4 * offset + 4]
        recon0 = next(g for g in group if g.kind == "recon" and g.source_id == a)
        exch0 = next(g for g in group if g.kind == "exchanged" and g.source_id == a)
        est_recon = gap_width_estimate(recon0.pixels)
        est_exch = gap_width_estimate(exch0.pixels)
        nearer = _range_distance(est_exch, lo, hi) < _range_distance(est_recon, lo, hi)
        hits += nearer
        rows.append(
            {
                "kl0_id": a,
                "kl2_id": b,
                "recon_gap": est_recon,
                "exchanged_gap": est_exch,
                "nearer": nearer,
            }
        )
    return hits / len(rows), rows


# ---------------------------------------------------------------------------
# latent probes on a trained model
# ---------------------------------------------------------------------------


def probe_latents(
    model: KeCaeModel,
    train_ids: list[str],
    train_grades: list[int],
    eval_ids: list[str],
    eval_grades: list[int],
    images: dict[str, np.ndarray],
    max_train: int = 400,
) -> dict[str, float]:
    """SVM accuracies on the key and unrelated latent vectors.

    The probe's training set is capped per class (not per list prefix), so a
    class-sorted id list still yields a balanced probe.
    """
    cap = max(1, max_train // 2)
    taken: dict[int, int] = {}
    kept_ids, kept_grades = [], []
    for image_id, grade in zip(train_ids, train_grades):
        if taken.get(grade, 0) < cap:
            taken[grade] = taken.get(grade, 0) + 1
            kept_ids.append(image_id)
            kept_grades.append(grade)
    train_ids, train_grades = kept_ids, kept_grades
    hu_tr, hk_tr = latent_features(model, train_ids, images)
    hu_ev, hk_ev = latent_features(model, eval_ids, images)
    y_tr = np.array([label_index(g) for g in train_grades])
    y_ev = np.array([label_index(g) for g in eval_grades])
    acc = {}
    for name, tr, ev in (("hK", hk_tr, hk_ev), ("hU", hu_tr, hu_ev)):
        probe = probe_train(tr, y_tr)
        acc[name] = probe.accuracy(ev, y_ev)
    return acc


# ---------------------------------------------------------------------------
# grid search over the loss weights
# ---------------------------------------------------------------------------


@dataclass
class GridResult:
    lambda1: float
    lambda2: float
    acc_hK: float
    acc_hU: float
    best: bool = False


def grid_search(
    base_config: TrainConfig,
    data: TrainData,
    eval_ids: list[str],
    eval_grades: list[int],
    eval_images: dict[str, np.ndarray],
    out_dir: str | Path,
    lambda1_grid: tuple[float, ...] = DECADE_GRID,
    lambda2_grid: tuple[float, ...] = DECADE_GRID,
    budget_epochs: int = 10,
) -> list[GridResult]:
    """Train one short-budget model per weight cell and probe its latents.

    A diverging cell records NaN accuracies instead of crashing the sweep.
    The arg-max cell over key-latent accuracy is flagged ``best``.
    """
    out_dir = Path(out_dir)
    train_ids = [i for pair in data.pairs for i in pair]
    seen = set()
    train_ids = [i for i in train_ids if not (i in seen or seen.add(i))]
    train_grades = [data.grades[i] for i in train_ids]

    def make_job(idx: int, l1: float, l2: float):
        def job() -> GridResult:
            config = replace(
                base_config,
                weights=LossWeights(l1, l2),
                epochs=budget_epochs,
                seed=derive_seed(base_config.seed, 0x617D, idx),
            )
            cell_dir = out_dir / f"cell_{idx:02d}"
            try:
                result = train(config, data, cell_dir)
            except DivergenceError:
                return GridResult(l1, l2, float("nan"), float("nan"))
            acc = probe_latents(
                result.model,
                train_ids,
                train_grades,
                eval_ids,
                eval_grades,
                {**data.images, **eval_images},
            )
            return GridResult(l1, l2, acc["hK"], acc["hU"])

        return job

    jobs = [
        make_job(idx, l1, l2)
        for idx, (l1, l2) in enumerate(
            (l1, l2) for l1 in lambda1_grid for l2 in lambda2_grid
        )
    ]
    results = run_jobs(jobs)
    scores = [r.acc_hK if np.isfinite(r.acc_hK) else -1.0 for r in results]
    results[int(np.argmax(scores))].best = True
    return results


def write_grid_csv(path: str | Path, results: list[GridResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda1", "lambda2", "acc_hK", "acc_hU"])
        for r in results:
            writer.writerow([r.lambda1, r.lambda2, r.acc_hK, r.acc_hU])


# ---------------------------------------------------------------------------
# sample-size study
# ---------------------------------------------------------------------------


@dataclass
class SizeResult:
    n: int
    final_loss: float
    acc: float


def sample_size_study(
    base_config: TrainConfig,
    split_images: dict[str, np.ndarray],
    grades: dict[str, int],
    pair_index,
    eval_ids: list[str],
    eval_grades: list[int],
    eval_images: dict[str, np.ndarray],
    n_list: list[int],
    out_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    budget_epochs: int = 5,
) -> list[SizeResult]:
    """Final training loss and probe accuracy per pair-sample size N,
    averaged over seeds."""
    out_dir = Path(out_dir)
    results = []
    for n in n_list:
        if n > len(pair_index):
            raise DataError(f"N={n} exceeds the pair index ({len(pair_index)})")
        losses, accs = [], []
        for seed in seeds:
            pairs = sample_pairs(pair_index, n, seed=derive_seed(base_config.seed, n, seed))
            data = TrainData(images=split_images, grades=grades, pairs=pairs)
            config = replace(
                base_config, seed=derive_seed(base_config.seed, 0x512E, n, seed)
            )
            result = train(config, data, out_dir / f"n{n}_s{seed}")
            losses.append(result.epoch_reports[-1].j_total)
            train_ids = sorted({i for pair in pairs for i in pair})
            acc = probe_latents(
                result.model,
                train_ids,
                [grades[i] for i in train_ids],
                eval_ids,
                eval_grades,
                {**split_images, **eval_images},
            )
            accs.append(acc["hK"])
        results.append(SizeResult(n, float(np.mean(losses)), float(np.mean(accs))))
    return results


def write_sizes_csv(path: str | Path, results: list[SizeResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "final_loss", "acc"])
        for r in results:
            writer.writerow([r.n, r.final_loss, r.acc])


# ---------------------------------------------------------------------------
# downstream classifiers + augmentation protocol
# ---------------------------------------------------------------------------


class SmallCnnClassifier:
    """Generic small CNN over whole images: conv blocks, GAP, linear head."""

    def __init__(self, seed: int, channels: tuple[int, ...] = (8, 16, 32)):
        rng = Rng(derive_seed(seed, 0x5C11))
        self.group = ParamGroup("small_cnn")
        self._convs = []
        cin = 1
        for i, cout in enumerate(channels, start=1):
            w = self.group.add(
                f"b{i}.w", kaiming_init((cout, cin, 3, 3), fan_in=cin * 9, rng=rng)
            )
            b = self.group.add(f"b{i}.b", Tensor(np.zeros(cout)))
            self._convs.append((w, b))
            cin = cout
        self._fc_w = self.group.add("fc.w", kaiming_init((cin, 2), fan_in=cin, rng=rng))
        self._fc_b = self.group.add("fc.b", Tensor(np.zeros(2)))

    def forward(self, x: Tensor, training: bool) -> DiscOutput:
        h = x
        for w, b in self._convs:
            h = leaky_relu(conv2d(h, w, b, 2, 1), 0.2)
        return DiscOutput(logits=linear(global_avg_pool(h), self._fc_w, self._fc_b))


def _prepare_classifier_input(kind: str, images: np.ndarray) -> Tensor:
    if kind == "siamese_gap":
        stacks = [np.stack(extract_patches(img)) for img in images]
        return Tensor(np.stack(stacks))
    return Tensor(images[:, None, :, :])


def train_classifier(
    kind: str,
    train_items: list[tuple[np.ndarray, int]],
    seed: int,
    arch_channels: tuple[int, ...] = (16, 32, 64, 128),
    epochs: int = 8,
    batch_size: int = 30,
    lr: float = 1e-3,
):
    """Train a fresh desk-scale classifier; returns a predict(images) fn."""
    if kind == "siamese_gap":
        net = PatchClassifier(arch_channels, 0.2, Rng(derive_seed(seed, 0xC1A)))
        group = net.group
    elif kind == "small_cnn":
        net = SmallCnnClassifier(seed)
        group = net.group
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")

    rng = Rng(derive_seed(seed, 0x7A1))
    order = list(range(len(train_items)))
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            chunk = [train_items[i] for i in order[start : start + batch_size]]
            if len(chunk) < 2:
                continue
            imgs = np.stack([c[0] for c in chunk])
            labels = np.array([c[1] for c in chunk])
            out = net.forward(_prepare_classifier_input(kind, imgs), training=True)
            loss = j_ce(out, labels)
            loss.backward()
            adam_step(group, lr)
            group.zero_grad()

    def predict(images: np.ndarray) -> np.ndarray:
        preds = []
        for start in range(0, len(images), 256):
            chunk = images[start : start + 256]
            out = net.forward(_prepare_classifier_input(kind, chunk), training=False)
            preds.append(np.argmax(out.logits.data, axis=1))
        return np.concatenate(preds)

    return predict


def build_augmented_sets(
    model: KeCaeModel,
    train_items: list[tuple[np.ndarray, int]],
    pairs: list[tuple[str, str]],
    images: dict[str, np.ndarray],
    grades: dict[str, int],
) -> dict[str, list[tuple[np.ndarray, int]]]:
    """The four training-input variants of the augmentation protocol."""
    outputs = generate(model, pairs, images, grades)
    xhat: list[tuple[np.ndarray, int]] = []
    seen_recon: set[str] = set()
    xprime: list[tuple[np.ndarray, int]] = []
    for g in outputs:
        label = label_index(g.kl_grade)
        if g.kind == "recon":
            if g.source_id not in seen_recon:
                seen_recon.add(g.source_id)
                xhat.append((g.pixels, label))
        else:
            xprime.append((g.pixels, label))
    return {
        "x": list(train_items),
        "x+xhat": list(train_items) + xhat,
        "x+xprime": list(train_items) + xprime,
        "x+xhat+xprime": list(train_items) + xhat + xprime,
    }


@dataclass
class AugmentResult:
    classifier: str
    input_set: str
    seed: int
    acc: float


def augmentation_eval(
    model: KeCaeModel,
    train_items: list[tuple[np.ndarray, int]],
    pairs: list[tuple[str, str]],
    images: dict[str, np.ndarray],
    grades: dict[str, int],
    test_images: np.ndarray,
    test_labels: np.ndarray,
    seeds: tuple[int, ...] = (0, 1, 2),
    classifiers: tuple[str, ...] = ("siamese_gap",),
    epochs: int = 8,
) -> list[AugmentResult]:
    """Train fresh classifiers on each input variant; report test accuracy."""
    variants = build_augmented_sets(model, train_items, pairs, images, grades)

    def make_job(kind: str, name: str, seed: int):
        def job() -> AugmentResult:
            predict = train_classifier(
                kind, variants[name], seed=derive_seed(seed, hash(name) & 0xFFFF), epochs=epochs
            )
            acc = float((predict(test_images) == test_labels).mean())
            return AugmentResult(kind, name, seed, acc)

        return job

    jobs = [
        make_job(kind, name, seed)
        for kind in classifiers
        for name in INPUT_SETS
        for seed in seeds
    ]
    return run_jobs(jobs)


def write_augment_csv(path: str | Path, results: list[AugmentResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["classifier", "input_set", "seed", "acc"])
        for r in results:
            writer.writerow([r.classifier, r.input_set, r.seed, r.acc])


def mean_accuracy(results: list[AugmentResult], classifier: str, input_set: str) -> float:
    vals = [r.acc for r in results if r.classifier == classifier and r.input_set == input_set]
    return float(np.mean(vals))
