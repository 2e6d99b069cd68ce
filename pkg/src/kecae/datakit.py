"""Data pipeline: procedural pseudo-radiographs with ground-truth attributes,
split/oversampling, global-permutation pairing, patch extraction and PGM I/O.

Images are grayscale squares in [0, 1]: two textured "bone" bands separated
by a horizontal gap whose width is the class-0/class-2 discriminant. Class 2
additionally grows edge bumps ("osteophytes") at the lateral/medial margins.
Every image records the attributes it was drawn from, so estimator oracles
can be replayed against ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, PgmParseError
from .rng import Rng, derive_seed

KL0 = 0
KL2 = 2
GRADES = (KL0, KL2)

NOISE_SIGMA = 0.02
PATCH_RATIO = 0.43  # 128/299 generalized to any image side

# gap-width / bump-amplitude draws per class, as fractions of the image side
KL0_GAP_RANGE = (0.18, 0.28)
KL2_GAP_RANGE = (0.06, 0.12)
KL2_OSTEO_RANGE = (0.02, 0.05)

SPLIT_RATIOS = {"train": 0.7, "val": 0.1, "test": 0.2}
SPLIT_NAMES = ("train", "val", "test")


def label_index(kl_grade: int) -> int:
    """Map a KL grade (0 or 2) onto the classifier's {0, 1} index."""
    if kl_grade not in GRADES:
        raise DataError(f"unsupported KL grade {kl_grade}; expected one of {GRADES}")
    return 0 if kl_grade == KL0 else 1


@dataclass
class SynthImage:
    image_id: str
    kl_grade: int
    pixels: np.ndarray  # (side, side) float64 in [0, 1]
    gap_width: float  # ground truth, pixels
    osteo_amp: float  # ground truth, pixels (0 for class 0)
    seed: int


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _contour(rng: Rng, side: int) -> np.ndarray:
    """Smooth zero-mean column-wise wiggle, a fraction of a pixel in size."""
    cols = np.arange(side)
    wiggle = np.zeros(side)
    for k in (1, 2, 3):
        amp = rng.uniform(0.002 * side, 0.006 * side)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wiggle += amp * np.sin(2.0 * math.pi * k * cols / side + phase)
    return wiggle


def _texture(rng: Rng, side: int, components: int = 6) -> np.ndarray:
    """Low-frequency intensity field that makes the bone bands non-uniform.

    Deliberately entropy-rich: the unrelated (background) content of an image
    has to carry real per-image information, otherwise there is nothing for
    the background latent to encode.
    """
    rows = np.arange(side)[:, None]
    cols = np.arange(side)[None, :]
    field = np.zeros((side, side))
    for _ in range(components):
        amp = rng.uniform(0.015, 0.05)
        fr = rng.uniform(0.5, 5.0)
        fc = rng.uniform(0.5, 5.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        field += amp * np.sin(2.0 * math.pi * (fr * rows + fc * cols) / side + phase)
    return field


def _illumination(rng: Rng, side: int) -> np.ndarray:
    """Smooth global field: linear ramps plus one broad radial component."""
    rows = np.arange(side)[:, None] / side
    cols = np.arange(side)[None, :] / side
    gr = rng.uniform(-0.06, 0.06)
    gc = rng.uniform(-0.06, 0.06)
    cr = rng.uniform(0.25, 0.75)
    cc = rng.uniform(0.25, 0.75)
    amp = rng.uniform(-0.06, 0.06)
    radial = amp * np.exp(-(((rows - cr) ** 2 + (cols - cc) ** 2) / 0.35))
    return gr * (rows - 0.5) + gc * (cols - 0.5) + radial


def synth_generate(
    kl_grade: int,
    seed: int,
    side: int,
    noise_sigma: float = NOISE_SIGMA,
    image_id: str | None = None,
) -> SynthImage:
    """Render one pseudo-radiograph; all randomness comes from ``seed``."""
    if side < 32:
        raise DataError(f"synthetic images need side >= 32, got {side}")
    if kl_grade not in GRADES:
        raise DataError(f"unsupported KL grade {kl_grade}")
    rng = Rng(seed)

    if kl_grade == KL0:
        gap = rng.uniform(KL0_GAP_RANGE[0] * side, KL0_GAP_RANGE[1] * side)
        amp = 0.0
    else:
        gap = rng.uniform(KL2_GAP_RANGE[0] * side, KL2_GAP_RANGE[1] * side)
        amp = rng.uniform(KL2_OSTEO_RANGE[0] * side, KL2_OSTEO_RANGE[1] * side)

    center = side / 2.0 + rng.uniform(-0.03 * side, 0.03 * side)
    top_edge = center - gap / 2.0 + _contour(rng, side)
    bot_edge = center + gap / 2.0 + _contour(rng, side)

    if amp > 0.0:
        cols = np.arange(side)
        width = 0.05 * side
        for x0 in (0.08 * side, side - 1 - 0.08 * side):
            bump = np.exp(-(((cols - x0) / width) ** 2))
            top_edge += 0.5 * amp * bump
            bot_edge -= 0.5 * amp * bump

    rows = np.arange(side)[:, None]
    cov_top = np.clip(top_edge[None, :] - rows, 0.0, 1.0)
    cov_bot = np.clip(rows + 1.0 - bot_edge[None, :], 0.0, 1.0)
    cov_gap = np.clip(1.0 - cov_top - cov_bot, 0.0, 1.0)

    base_top = rng.uniform(0.58, 0.82)
    base_bot = rng.uniform(0.58, 0.82)
    gap_level = rng.uniform(0.08, 0.20)
    texture_top = _texture(rng, side)
    texture_bot = _texture(rng, side)
    illumination = _illumination(rng, side)

    img = (
        cov_top * (base_top + texture_top)
        + cov_bot * (base_bot + texture_bot)
        + cov_gap * gap_level
        + illumination
    )
    if noise_sigma > 0.0:
        noise = np.fromiter(
            rng.normals(side * side), dtype=np.float64, count=side * side
        ).reshape(side, side)
        img += noise_sigma * noise
    img = np.clip(img, 0.0, 1.0)

    if image_id is None:
        image_id = f"kl{kl_grade}_{seed & 0xFFFFFFFFFFFFFFFF:016x}"
    return SynthImage(
        image_id=image_id,
        kl_grade=kl_grade,
        pixels=img,
        gap_width=gap,
        osteo_amp=amp,
        seed=seed,
    )


def build_pool(
    n_kl0: int,
    n_kl2: int,
    side: int,
    seed: int,
    noise_sigma: float = NOISE_SIGMA,
) -> list[SynthImage]:
    """Generate the raw (unsplit) image pool, ids numbered per class."""
    images = []
    for grade, count in ((KL0, n_kl0), (KL2, n_kl2)):
        for i in range(count):
            img_seed = derive_seed(seed, grade, i)
            images.append(
                synth_generate(
                    grade,
                    img_seed,
                    side,
                    noise_sigma,
                    image_id=f"kl{grade}_{i:05d}",
                )
            )
    return images


# ---------------------------------------------------------------------------
# split + oversampling
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, ratios: tuple[float, ...]) -> list[int]:
    """Integer apportionment with each part within 1 of its exact share."""
    exact = [total * r for r in ratios]
    floors = [int(math.floor(e)) for e in exact]
    leftover = total - sum(floors)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


def split_oversample(
    ids_by_class: dict[int, list[str]],
    seed: int,
) -> dict[str, list[tuple[str, int]]]:
    """Balance classes by bootstrap, then partition 7:1:2 per class.

    The minority class keeps all originals and draws extra copies with
    replacement until both classes match. Copies are tracked by source id:
    val and test receive only never-duplicated sources, so no duplicate of a
    held-out item can appear in train.
    """
    for grade, ids in ids_by_class.items():
        if not ids:
            raise DataError(f"class kl{grade} is empty")
        if len(ids) < 10:
            raise DataError(f"class kl{grade} has {len(ids)} items; need >= 10")
        if len(set(ids)) != len(ids):
            raise DataError(f"class kl{grade} contains duplicate ids")

    majority = max(len(ids) for ids in ids_by_class.values())
    rng = Rng(derive_seed(seed, 0x59711))
    splits: dict[str, list[tuple[str, int]]] = {name: [] for name in SPLIT_NAMES}

    for grade in sorted(ids_by_class):
        ids = list(ids_by_class[grade])
        rng.shuffle(ids)
        n_train, n_val, n_test = _largest_remainder(
            majority, (SPLIT_RATIOS["train"], SPLIT_RATIOS["val"], SPLIT_RATIOS["test"])
        )
        extra = majority - len(ids)
        if len(ids) < n_val + n_test + (1 if extra else 0):
            raise DataError(
                f"class kl{grade}: {len(ids)} items cannot fill val+test "
                f"({n_val}+{n_test}) and still leave a train source to bootstrap"
            )
        val_ids = ids[:n_val]
        test_ids = ids[n_val : n_val + n_test]
        train_pool = ids[n_val + n_test :]
        multiplicity = {i: 1 for i in train_pool}
        for _ in range(extra):
            multiplicity[train_pool[rng.randbelow(len(train_pool))]] += 1

        splits["val"].extend((i, grade) for i in val_ids)
        splits["test"].extend((i, grade) for i in test_ids)
        for image_id in train_pool:
            splits["train"].extend([(image_id, grade)] * multiplicity[image_id])
    return splits


# ---------------------------------------------------------------------------
# pairing
# ---------------------------------------------------------------------------


class PairIndex:
    """Lazy Cartesian product of class-0 train ids with class-2 train ids."""

    def __init__(self, kl0_ids: list[str], kl2_ids: list[str]):
        if not kl0_ids or not kl2_ids:
            raise DataError("pairing requires non-empty id lists for both classes")
        self.kl0_ids = list(kl0_ids)
        self.kl2_ids = list(kl2_ids)

    def __len__(self) -> int:
        return len(self.kl0_ids) * len(self.kl2_ids)

    def __getitem__(self, index: int) -> tuple[str, str]:
        n2 = len(self.kl2_ids)
        if not 0 <= index < len(self):
            raise IndexError(index)
        return self.kl0_ids[index // n2], self.kl2_ids[index % n2]


def make_pairs(kl0_ids: list[str], kl2_ids: list[str]) -> PairIndex:
    """Global-permutation pairing: every class-0 id against every class-2 id."""
    return PairIndex(kl0_ids, kl2_ids)


def sample_pairs(index: PairIndex, n: int, seed: int) -> list[tuple[str, str]]:
    """Uniform sample of ``n`` distinct pair-index entries."""
    if n > len(index):
        raise ValueError(f"cannot sample {n} pairs from an index of {len(index)}")
    rng = Rng(derive_seed(seed, 0x9A125))
    return [index[i] for i in rng.sample_range(len(index), n)]


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patch_geometry(side: int) -> tuple[int, int, int, int]:
    """(patch side, top row, lateral column, medial column) for an image side."""
    q = int(math.floor(PATCH_RATIO * side))
    if q < 1:
        raise DataError(f"image side {side} too small for patch extraction")
    row0 = (side - q) // 2
    return q, row0, 0, side - q


def extract_patches(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Square lateral and (horizontally mirrored) medial crops of an image."""
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise DataError(f"expected a square 2-d image, got shape {image.shape}")
    side = image.shape[0]
    q, row0, col_lat, col_med = patch_geometry(side)
    lateral = image[row0 : row0 + q, col_lat : col_lat + q].copy()
    medial = image[row0 : row0 + q, col_med : col_med + q][:, ::-1].copy()
    return lateral, medial


# ---------------------------------------------------------------------------
# augmentation (discriminator training inputs only)
# ---------------------------------------------------------------------------


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center with bilinear sampling and edge clamping."""
    side = image.shape[0]
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    half = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    y = rows - half
    x = cols - half
    # inverse map: rotate output coordinates back into the source frame
    src_r = c * y + s * x + half
    src_c = -s * y + c * x + half
    r0 = np.clip(np.floor(src_r).astype(int), 0, side - 2)
    c0 = np.clip(np.floor(src_c).astype(int), 0, side - 2)
    fr = np.clip(src_r - r0, 0.0, 1.0)
    fc = np.clip(src_c - c0, 0.0, 1.0)
    out = (
        image[r0, c0] * (1 - fr) * (1 - fc)
        + image[r0 + 1, c0] * fr * (1 - fc)
        + image[r0, c0 + 1] * (1 - fr) * fc
        + image[r0 + 1, c0 + 1] * fr * fc
    )
    return out


def augment_image(image: np.ndarray, rng: Rng) -> np.ndarray:
    """Random rotation (+-10 deg), brightness and contrast (+-10%), p=0.5 each."""
    out = image
    if rng.uniform() < 0.5:
        out = rotate_bilinear(out, rng.uniform(-10.0, 10.0))
    if rng.uniform() < 0.5:
        out = np.clip(out + rng.uniform(-0.1, 0.1), 0.0, 1.0)
    if rng.uniform() < 0.5:
        out = np.clip((out - 0.5) * rng.uniform(0.9, 1.1) + 0.5, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale image as binary PGM (P5, maxval 255)."""
    if image.ndim != 2:
        raise DataError(f"PGM writer expects a 2-d image, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DataError("PGM writer expects values in [0, 1]")
    # round half away from zero; values are non-negative so floor(x+0.5) does it
    quantized = np.floor(image * 255.0 + 0.5).astype(np.uint8)
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a [0, 1] float image."""
    blob = Path(path).read_bytes()
    pos = 0

    def skip_ws() -> None:
        nonlocal pos
        while pos < len(blob):
            if blob[pos : pos + 1].isspace():
                pos += 1
            elif blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
            else:
                return

    def token() -> bytes:
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise PgmParseError("unexpected end of header", start)
        return blob[start:pos]

    magic = token()
    if magic != b"P5":
        raise PgmParseError(f"not a binary PGM (magic {magic!r})", 0)
    try:
        width = int(token())
        height = int(token())
        maxval_at = pos
        maxval = int(token())
    except ValueError:
        raise PgmParseError("non-numeric header field", pos) from None
    if width < 1 or height < 1:
        raise PgmParseError(f"invalid dimensions {width}x{height}", maxval_at)
    if not 0 < maxval < 256:
        raise PgmParseError(f"unsupported maxval {maxval}", maxval_at)
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise PgmParseError("missing whitespace after maxval", pos)
    pos += 1
    expected = width * height
    raster = blob[pos : pos + expected]
    if len(raster) < expected:
        raise PgmParseError(
            f"truncated raster: expected {expected} bytes, found {len(raster)}",
            pos + len(raster),
        )
    data = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return data.astype(np.float64) / float(maxval)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

_ATTR_HEADER = ["id", "class", "gap_width", "osteo_amp", "seed"]


def _write_attr_rows(path: Path, rows: list[tuple[str, int, float, float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ATTR_HEADER)
        writer.writerows(rows)


def write_pool(root: str | Path, images: list[SynthImage]) -> None:
    """Flat pool layout: kl0/ kl2/ image dirs plus one attributes.csv."""
    root = Path(root)
    for grade in GRADES:
        (root / f"kl{grade}").mkdir(parents=True, exist_ok=True)
    rows = []
    for img in images:
        write_pgm(root / f"kl{img.kl_grade}" / f"{img.image_id}.pgm", img.pixels)
        rows.append((img.image_id, img.kl_grade, img.gap_width, img.osteo_amp, img.seed))
    _write_attr_rows(root / "attributes.csv", rows)


@dataclass
class SplitData:
    """One split of the dataset, loaded into memory."""

    records: list[tuple[str, int]]  # (image id, grade); train may repeat ids
    images: dict[str, np.ndarray]
    attrs: dict[str, tuple[float, float, int]]  # id -> (gap_width, osteo_amp, seed)

    def unique_ids(self, grade: int) -> list[str]:
        seen = set()
        out = []
        for image_id, g in self.records:
            if g == grade and image_id not in seen:
                seen.add(image_id)
                out.append(image_id)
        return out


def _read_attr_rows(path: Path) -> list[tuple[str, int, float, float, int]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _ATTR_HEADER:
            raise DataError(f"unexpected attribute header {header} in {path}")
        return [(r[0], int(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in reader]


def read_pool(root: str | Path) -> list[SynthImage]:
    root = Path(root)
    images = []
    for image_id, grade, gap, amp, seed in _read_attr_rows(root / "attributes.csv"):
        pixels = read_pgm(root / f"kl{grade}" / f"{image_id}.pgm")
        images.append(SynthImage(image_id, grade, pixels, gap, amp, seed))
    return images


def write_dataset(
    root: str | Path,
    splits: dict[str, list[tuple[str, int]]],
    pool: dict[str, SynthImage],
) -> None:
    """Materialize split_oversample output: per-split dirs + attributes.csv.

    Each unique id is stored once as a PGM; oversampling duplicates appear
    as repeated rows in the split's attributes.csv.
    """
    root = Path(root)
    for name in SPLIT_NAMES:
        split_dir = root / name
        for grade in GRADES:
            (split_dir / f"kl{grade}").mkdir(parents=True, exist_ok=True)
        rows = []
        written = set()
        for image_id, grade in splits[name]:
            img = pool[image_id]
            if image_id not in written:
                write_pgm(split_dir / f"kl{grade}" / f"{image_id}.pgm", img.pixels)
                written.add(image_id)
            rows.append((image_id, grade, img.gap_width, img.osteo_amp, img.seed))
        _write_attr_rows(split_dir / "attributes.csv", rows)


def load_split(root: str | Path, split: str) -> SplitData:
    root = Path(root)
    if split not in SPLIT_NAMES:
        raise DataError(f"unknown split {split!r}")
    split_dir = root / split
    if not (split_dir / "attributes.csv").exists():
        raise DataError(f"no attributes.csv under {split_dir}")
    records = []
    images: dict[str, np.ndarray] = {}
    attrs: dict[str, tuple[float, float, int]] = {}
    for image_id, grade, gap, amp, seed in _read_attr_rows(split_dir / "attributes.csv"):
        records.append((image_id, grade))
        if image_id not in images:
            images[image_id] = read_pgm(split_dir / f"kl{grade}" / f"{image_id}.pgm")
            attrs[image_id] = (gap, amp, seed)
    return SplitData(records=records, images=images, attrs=attrs)


def write_pairs_csv(path: str | Path, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kl0_id", "kl2_id"])
        writer.writerows(pairs)


def read_pairs_csv(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["kl0_id", "kl2_id"]:
            raise DataError(f"unexpected pairs header {header} in {path}")
        return [(r[0], r[1]) for r in reader]
