import numpy as np
import pytest

from episeg.data import SegDataset, SyntheticConfig, build_folds, generate_synthetic, remap_to_fold, split_holdout


@pytest.fixture(scope="session")
def toy():
    """Small synthetic corpus (10 classes) with the fold-4 train/held-out splits."""
    ds = generate_synthetic(SyntheticConfig(num_images=160), 7)
    fold = build_folds(10, 2, 4)
    train_part, held = split_holdout(ds)
    return {
        "dataset": ds,
        "fold": fold,
        "train": remap_to_fold(train_part, fold.train_labels),
        "val": remap_to_fold(held, fold.train_labels),
        "test": remap_to_fold(held, fold.test_labels),
    }


def blocks_dataset(n_per_class=20, n_classes=5, size=8, seed=0):
    """One class per image, a solid block of foreground, equal counts per class."""
    rng = np.random.default_rng(seed)
    imgs, labs = [], []
    for c in range(1, n_classes + 1):
        for _ in range(n_per_class):
            lab = np.zeros((size, size), dtype=np.uint8)
            r, q = rng.integers(0, size - 2, size=2)
            lab[r:r + 2, q:q + 2] = c
            imgs.append(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))
            labs.append(lab)
    return SegDataset(tuple(imgs), tuple(labs), {c: f"c{c}" for c in range(1, n_classes + 1)})
