import numpy as np
import pytest

from kecae.datakit import KL0, KL2, make_pairs, sample_pairs, synth_generate
from kecae.netlib import ArchConfig
from kecae.rng import derive_seed
from kecae.trainer import TrainData


def tiny_arch() -> ArchConfig:
    """3-block, 32-pixel architecture for fast loop tests."""
    return ArchConfig(
        input_side=32,
        block_channels=(8, 16, 32),
        latent_depth=8,
        disc_channels=(8, 16),
    )


def micro_train_data(
    n_per_class: int = 8,
    side: int = 32,
    seed: int = 100,
    n_pairs: int = 12,
) -> TrainData:
    images: dict[str, np.ndarray] = {}
    grades: dict[str, int] = {}
    per_class_ids = {KL0: [], KL2: []}
    for grade in (KL0, KL2):
        for i in range(n_per_class):
            img = synth_generate(grade, derive_seed(seed, grade, i), side)
            image_id = f"kl{grade}_{i:03d}"
            images[image_id] = img.pixels
            grades[image_id] = grade
            per_class_ids[grade].append(image_id)
    index = make_pairs(per_class_ids[KL0], per_class_ids[KL2])
    pairs = sample_pairs(index, n_pairs, seed=seed + 1)
    return TrainData(images=images, grades=grades, pairs=pairs)


@pytest.fixture
def micro_data():
    return micro_train_data()
