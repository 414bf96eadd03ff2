"""Segmentation corpora, class folds and episodic sampling.

Images are stored as uint8 ``[H, W, 3]`` arrays and label rasters as uint8
``[H, W]`` arrays where 0 is background. Episodes carry float64 ``[3, H, W]``
images in [0, 1] and uint8 binary masks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PASCAL_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "potted plant", "sheep", "sofa", "train", "tv/monitor",
)

SHAPES = ("circle", "square", "triangle", "ring", "cross")
TEXTURES = ("solid", "striped", "checker", "dotted")

SAMPLE_RETRIES = 100


class DatasetError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SegDataset:
    images: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    catalog: dict[int, str]
    ids: tuple[int, ...] = ()
    rejected: tuple[tuple[str, str], ...] = ()
    carriers: dict[int, tuple[int, ...]] = field(init=False, repr=False)
    present: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in count")
        if not self.ids:
            object.__setattr__(self, "ids", tuple(range(len(self.images))))
        if len(self.ids) != len(self.images):
            raise DatasetError("ids and images differ in count")
        if 0 in self.catalog:
            raise DatasetError("class id 0 is reserved for background")
        known = np.zeros(256, dtype=bool)
        known[0] = True
        known[list(self.catalog)] = True
        present, carriers = [], {c: [] for c in self.catalog}
        for i, (img, lab) in enumerate(zip(self.images, self.labels)):
            if img.ndim != 3 or img.shape[2] != 3 or img.shape[:2] != lab.shape:
                raise DatasetError(f"item {self.ids[i]}: image {img.shape} vs raster {lab.shape}")
            _frozen(img)
            _frozen(lab)
            ids = np.flatnonzero(np.bincount(lab.ravel(), minlength=256))
            if not known[ids].all():
                bad = sorted(set(ids.tolist()) - {0} - set(self.catalog))
                raise DatasetError(f"item {self.ids[i]}: label ids {bad} not in catalog")
            cls = tuple(int(c) for c in ids if c != 0)
            present.append(cls)
            for c in cls:
                carriers[c].append(i)
        object.__setattr__(self, "present", tuple(present))
        object.__setattr__(self, "carriers", {c: tuple(v) for c, v in carriers.items()})

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegDataset):
            return NotImplemented
        return (self.catalog == other.catalog and self.ids == other.ids
                and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in zip(self.images, other.images))
                and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels)))

    def subset(self, positions: Sequence[int]) -> "SegDataset":
        return SegDataset(tuple(self.images[i] for i in positions),
                          tuple(self.labels[i] for i in positions),
                          dict(self.catalog), tuple(self.ids[i] for i in positions))

    def position_of(self, image_id: int) -> int:
        return self.ids.index(image_id)


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    test_labels: frozenset[int]
    train_labels: frozenset[int]


@dataclass(frozen=True, eq=False)
class Episode:
    support: tuple[tuple[np.ndarray, np.ndarray], ...]
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    query_id: int = -1
    support_ids: tuple[int, ...] = ()

    @property
    def k(self) -> int:
        return len(self.support)

    def truncate(self, k: int) -> "Episode":
        """Same query with only the first ``k`` supports (nested support sets)."""
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate a {self.k}-shot episode to k={k}")
        return Episode(self.support[:k], self.query_image, self.query_mask, self.class_id,
                       self.query_id, self.support_ids[:k])


def to_float_image(img: np.ndarray) -> np.ndarray:
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def binarize(raster: np.ndarray, class_id: int) -> np.ndarray:
    return (raster == class_id).astype(np.uint8)


# ---------------------------------------------------------------------------
# folds


def build_folds(num_classes: int, classes_per_fold: int, fold_index: int) -> FoldSpec:
    if classes_per_fold < 1 or num_classes < 1 or num_classes % classes_per_fold:
        raise ValueError(f"{num_classes} classes cannot be split into folds of {classes_per_fold}")
    n_folds = num_classes // classes_per_fold
    if not 0 <= fold_index < n_folds:
        raise ValueError(f"fold index {fold_index} outside [0, {n_folds}) for "
                         f"{num_classes} classes with {classes_per_fold} per fold")
    start = classes_per_fold * fold_index
    test = frozenset(range(start + 1, start + classes_per_fold + 1))
    train = frozenset(range(1, num_classes + 1)) - test
    return FoldSpec(fold_index, test, train)


def remap_to_fold(dataset: SegDataset, labels) -> SegDataset:
    """Keep only ``labels`` as foreground; drop images left without foreground."""
    labels = set(labels)
    if not labels <= set(dataset.catalog):
        raise DatasetError(f"labels {sorted(labels - set(dataset.catalog))} not in catalog")
    lut = np.zeros(256, dtype=np.uint8)
    for c in labels:
        lut[c] = c
    imgs, rasters, ids = [], [], []
    for img, lab, i in zip(dataset.images, dataset.labels, dataset.ids):
        new = lut[lab]
        if new.any():
            imgs.append(img)
            rasters.append(new)
            ids.append(i)
    if not imgs:
        raise DatasetError("remap produced an empty dataset")
    return SegDataset(tuple(imgs), tuple(rasters), dict(dataset.catalog), tuple(ids))


def split_holdout(dataset: SegDataset, every: int = 5) -> tuple[SegDataset, SegDataset]:
    """Image-level split: ids divisible by ``every`` form the held-out pool."""
    held = [i for i, x in enumerate(dataset.ids) if x % every == 0]
    rest = [i for i, x in enumerate(dataset.ids) if x % every != 0]
    return dataset.subset(rest), dataset.subset(held)


# ---------------------------------------------------------------------------
# sampling


def make_episode(dataset: SegDataset, query: int, class_id: int, supports: Sequence[int]) -> Episode:
    sup = tuple((to_float_image(dataset.images[s]), binarize(dataset.labels[s], class_id)) for s in supports)
    return Episode(sup, to_float_image(dataset.images[query]), binarize(dataset.labels[query], class_id),
                   int(class_id), dataset.ids[query], tuple(dataset.ids[s] for s in supports))


def sample_episode(dataset: SegDataset, k: int, rng: np.random.Generator) -> Episode:
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(dataset)
    for _ in range(SAMPLE_RETRIES):
        q = int(rng.integers(n))
        classes = dataset.present[q]
        if not classes:
            continue
        cls = classes[int(rng.integers(len(classes)))]
        pool = [i for i in dataset.carriers[cls] if i != q]
        if len(pool) < k:
            continue
        chosen = rng.choice(len(pool), size=k, replace=False)
        return make_episode(dataset, q, cls, [pool[int(c)] for c in chosen])
    raise SamplingError(f"no feasible {k}-shot episode after {SAMPLE_RETRIES} draws")


def benchmark_set(dataset: SegDataset, fold: FoldSpec, N: int, k: int, seed: int) -> list[Episode]:
    stray = {c for cls in dataset.present for c in cls} - fold.test_labels
    if stray:
        raise DatasetError(f"benchmark dataset contains non-test classes {sorted(stray)}")
    rng = np.random.default_rng(seed)
    return [sample_episode(dataset, k, rng) for _ in range(N)]


def write_manifest(episodes: Sequence[Episode], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps({"query": ep.query_id, "class": ep.class_id,
                                 "support": list(ep.support_ids)}) + "\n")


def read_manifest(dataset: SegDataset, path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                episodes.append(make_episode(dataset, dataset.position_of(rec["query"]), rec["class"],
                                             [dataset.position_of(s) for s in rec["support"]]))
    return episodes


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticConfig:
    num_images: int = 600
    image_size: int = 64
    num_classes: int = 10
    shapes_per_image: tuple[int, int] = (1, 3)
    noise_level: float = 0.04
    fg_bounds: tuple[float, float] = (0.05, 0.60)
    radius_range: tuple[float, float] = (0.14, 0.24)
    min_visible: int = 20

    def validate(self) -> None:
        if not 4 <= self.num_classes <= len(SHAPES) * len(TEXTURES):
            raise ValueError(f"num_classes must lie in [4, {len(SHAPES) * len(TEXTURES)}]")
        if self.num_images < 1 or self.image_size < 16:
            raise ValueError("need num_images >= 1 and image_size >= 16")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi <= self.num_classes:
            raise ValueError(f"invalid shapes_per_image {self.shapes_per_image}")
        if not 0 <= self.fg_bounds[0] < self.fg_bounds[1] <= 1:
            raise ValueError(f"invalid fg_bounds {self.fg_bounds}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


def class_name(class_id: int) -> str:
    tex, shp = divmod(class_id - 1, len(SHAPES))
    return f"{TEXTURES[tex]}-{SHAPES[shp]}"


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    rho = np.hypot(u, v)
    if shape == "circle":
        return rho <= r
    if shape == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if shape == "triangle":
        inside = np.ones(u.shape, dtype=bool)
        for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            inside &= -(u * np.cos(a) + v * np.sin(a)) <= 0.5 * r
        return inside
    if shape == "ring":
        return (rho <= r) & (rho >= 0.55 * r)
    if shape == "cross":
        t = r / 3
        return ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    raise ValueError(shape)


def _texture(texture: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """1 where the primary colour shows, 0 where the secondary colour shows."""
    if texture == "solid":
        return np.ones(u.shape)
    if texture == "striped":
        return (np.floor(u / 3.0) % 2 == 0).astype(float)
    if texture == "checker":
        return ((np.floor(u / 3.0) + np.floor(v / 3.0)) % 2 == 0).astype(float)
    if texture == "dotted":
        return (np.hypot((u % 6.0) - 3.0, (v % 6.0) - 3.0) > 1.6).astype(float)
    raise ValueError(texture)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.0, 0.45, size=3)
    coarse = rng.uniform(-0.12, 0.12, size=(3, 6, 6))
    R = np.zeros((size, 6))
    src = np.arange(size) * 5 / (size - 1)
    i0 = np.minimum(np.floor(src).astype(int), 4)
    R[np.arange(size), i0] = 1 - (src - i0)
    R[np.arange(size), i0 + 1] = src - i0
    smooth = np.einsum("Yy,cyx,Xx->cYX", R, coarse, R)
    return base[:, None, None] + smooth


def _render(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    S = cfg.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    while True:
        img = _background(rng, S)
        raster = np.zeros((S, S), dtype=np.uint8)
        n = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
        classes = rng.choice(np.arange(1, cfg.num_classes + 1), size=n, replace=False)
        for c in classes:
            tex, shp = divmod(int(c) - 1, len(SHAPES))
            r = rng.uniform(*cfg.radius_range) * S
            cy, cx = rng.uniform(r, S - r, size=2)
            ang = rng.uniform(0, 2 * np.pi)
            u = np.cos(ang) * (xx - cx) + np.sin(ang) * (yy - cy)
            v = -np.sin(ang) * (xx - cx) + np.cos(ang) * (yy - cy)
            inside = _shape_mask(SHAPES[shp], u, v, r)
            primary = rng.uniform(0.45, 1.0, size=3)
            secondary = primary * 0.3
            t = _texture(TEXTURES[tex], u, v)
            col = t[None] * primary[:, None, None] + (1 - t[None]) * secondary[:, None, None]
            img = np.where(inside[None], col, img)
            raster[inside] = c
        counts = np.bincount(raster.ravel(), minlength=cfg.num_classes + 1)
        fg = 1.0 - counts[0] / raster.size
        if (counts[classes] >= cfg.min_visible).all() and cfg.fg_bounds[0] <= fg <= cfg.fg_bounds[1]:
            break
    img = img + rng.normal(0.0, cfg.noise_level, size=img.shape)
    img8 = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return img8.transpose(1, 2, 0).copy(), raster


def generate_synthetic(config: SyntheticConfig, seed: int) -> SegDataset:
    """Render a shape x texture corpus with pixel-exact label rasters."""
    config.validate()
    rng = np.random.default_rng(seed)
    imgs, rasters = [], []
    for _ in range(config.num_images):
        img, lab = _render(config, rng)
        imgs.append(img)
        rasters.append(lab)
    catalog = {c: class_name(c) for c in range(1, config.num_classes + 1)}
    return SegDataset(tuple(imgs), tuple(rasters), catalog)


# ---------------------------------------------------------------------------
# disk format: images/NNNN.ppm, labels/NNNN.pgm, catalog.txt


def save_dataset(dataset: SegDataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for img, lab, i in zip(dataset.images, dataset.labels, dataset.ids):
        Image.fromarray(img).save(root / "images" / f"{i:04d}.ppm")
        Image.fromarray(lab).save(root / "labels" / f"{i:04d}.pgm")
    with open(root / "catalog.txt", "w", encoding="utf-8") as fh:
        for c in sorted(dataset.catalog):
            fh.write(f"{c}\t{dataset.catalog[c]}\n")


def read_catalog(path) -> dict[int, str]:
    catalog = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, sep, name = line.partition("\t")
            if not sep or not key.strip().isdigit():
                raise DatasetError(f"{path}:{n}: expected 'id<TAB>name'")
            catalog[int(key)] = name
    return catalog


def load_dataset(image_dir, raster_dir, catalog_path=None) -> SegDataset:
    """Load matching image/raster files; unusable pairs are reported in ``rejected``."""
    image_dir, raster_dir = Path(image_dir), Path(raster_dir)
    if not image_dir.is_dir() or not raster_dir.is_dir():
        raise DatasetError(f"missing directory: {image_dir if not image_dir.is_dir() else raster_dir}")
    img_files = {p.stem: p for p in image_dir.iterdir() if p.is_file()}
    lab_files = {p.stem: p for p in raster_dir.iterdir() if p.is_file()}
    if not img_files and not lab_files:
        raise DatasetError(f"no files in {image_dir} / {raster_dir}")
    catalog_path = Path(catalog_path) if catalog_path else raster_dir.parent / "catalog.txt"
    catalog = read_catalog(catalog_path) if catalog_path.exists() else None
    rejected = [(s, "missing raster") for s in sorted(set(img_files) - set(lab_files))]
    rejected += [(s, "missing image") for s in sorted(set(lab_files) - set(img_files))]
    stems = sorted(set(img_files) & set(lab_files), key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0, s))
    imgs, labs, ids = [], [], []
    for pos, stem in enumerate(stems):
        with Image.open(img_files[stem]) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        with Image.open(lab_files[stem]) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                raise DatasetError(f"{lab_files[stem]}: raster must be single-channel, got mode {im.mode}")
            lab = np.asarray(im)
        if lab.max(initial=0) > 255:
            raise DatasetError(f"{lab_files[stem]}: label id above 255")
        lab = lab.astype(np.uint8)
        if img.shape[:2] != lab.shape:
            rejected.append((stem, f"size mismatch {img.shape[:2]} vs {lab.shape}"))
            continue
        imgs.append(img)
        labs.append(lab)
        ids.append(int(stem) if stem.isdigit() else pos)
    for stem, why in rejected:
        logger.warning("rejected %s: %s", stem, why)
    if not imgs:
        raise DatasetError("no usable image/raster pairs")
    if catalog is None:
        seen = sorted({int(c) for lab in labs for c in np.unique(lab) if c})
        catalog = {c: f"class_{c}" for c in seen}
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate image ids")
    return SegDataset(tuple(imgs), tuple(labs), catalog, tuple(ids), tuple(rejected))


def load_dataset_dir(root) -> SegDataset:
    root = Path(root)
    return load_dataset(root / "images", root / "labels", root / "catalog.txt")
