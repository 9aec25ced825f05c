"""Datasets and the episodic sampler.

A ClassDataset is an immutable, label-partitioned sample store: vectors or image
paths grouped by class, each sample tagged train/test. Episodes are drawn from
it without replacement, support and query disjoint, deterministically per rng.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, IngestionError, InputError, SamplingError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
REAL_KIND = "real"
FAKE_KIND = "fake"


# ---------------------------------------------------------------------------
# dataset types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImagePreprocess:
    """Resize shorter side to `resize`, then crop `crop` x `crop`."""

    resize: int = 256
    crop: int = 224


@dataclass
class ClassRecord:
    class_id: int
    name: str
    kind: str                     # "real" | "fake"
    samples: list                 # np.ndarray vectors or image Paths
    split: list                   # "train" | "test" per sample

    def indices(self, split: str):
        return [i for i, s in enumerate(self.split) if s == split]

    def __len__(self):
        return len(self.samples)


@dataclass
class ClassDataset:
    classes: list
    input_shape: tuple
    image_cfg: Optional[ImagePreprocess] = None

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate class ids in dataset")
        self.classes = sorted(self.classes, key=lambda c: c.class_id)

    def class_by_id(self, class_id: int) -> ClassRecord:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise InputError(f"no class with id {class_id}")

    def class_by_name(self, name: str) -> ClassRecord:
        for c in self.classes:
            if c.name == name:
                return c
        raise InputError(f"no class named {name!r}")

    def real_class(self) -> ClassRecord:
        reals = [c for c in self.classes if c.kind == REAL_KIND]
        if len(reals) != 1:
            raise InputError(f"detection needs exactly one real class, found {len(reals)}")
        return reals[0]

    def fake_classes(self):
        return [c for c in self.classes if c.kind == FAKE_KIND]

    def without_class(self, class_id: int) -> "ClassDataset":
        """Same dataset minus one class; remaining class ids are unchanged."""
        kept = [c for c in self.classes if c.class_id != class_id]
        if len(kept) == len(self.classes):
            raise InputError(f"no class with id {class_id}")
        return ClassDataset(kept, self.input_shape, self.image_cfg)


@dataclass(frozen=True)
class SamplerConfig:
    n_classes: int                # classes per episode
    n_support: int
    n_query: int
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.n_classes < 1 or self.n_support < 1 or self.n_query < 1:
            raise ConfigurationError("n_classes, n_support, n_query must all be >= 1")
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"split must be train or test, got {self.split!r}")


@dataclass
class Episode:
    class_ids: tuple
    support: np.ndarray           # (N_c, N_s, *input_shape)
    query: np.ndarray             # (N_c, N_q, *input_shape)
    support_indices: tuple        # per class, the dataset sample indices drawn
    query_indices: tuple


@dataclass(frozen=True)
class SynthConfig:
    """Well-separated Gaussian blobs standing in for per-generator fingerprints."""

    num_fake_classes: int = 6
    dimension: int = 16
    center_separation: float = 8.0
    within_class_noise: float = 1.0
    samples_per_class: int = 400
    multimodal_classes: tuple = ()   # fake class ids that get two sub-centers
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.center_separation <= 0:
            raise ConfigurationError("center_separation must be > 0")
        if self.within_class_noise <= 0:
            raise ConfigurationError("within_class_noise must be > 0")
        if self.num_fake_classes < 1 or self.num_fake_classes > 26:
            raise ConfigurationError("num_fake_classes must be in 1..26")
        if self.dimension < 1 or self.samples_per_class < 2:
            raise ConfigurationError("dimension >= 1 and samples_per_class >= 2 required")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1)")
        bad = [c for c in self.multimodal_classes if not 1 <= c <= self.num_fake_classes]
        if bad:
            raise ConfigurationError(f"multimodal_classes {bad} are not fake class ids")
        object.__setattr__(self, "multimodal_classes", tuple(self.multimodal_classes))


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _split_tags(n: int, train_fraction: float):
    n_train = int(n * train_fraction)
    return ["train"] * n_train + ["test"] * (n - n_train)


def _assign_ids(names, real_name):
    """Real class gets id 0; the rest get 1.. in alphabetical order."""
    others = sorted(n for n in names if n != real_name)
    ordered = ([real_name] if real_name in names else []) + others
    return {name: i for i, name in enumerate(ordered)}


def load_image_dataset(root_path, real_name: str = "real", train_fraction: float = 0.8,
                       image_cfg: Optional[ImagePreprocess] = None,
                       require_real: bool = True) -> ClassDataset:
    """Folder-per-class image tree: root/<class_name>/*.png|jpg|jpeg."""
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    image_cfg = image_cfg or ImagePreprocess()
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise IngestionError(f"{root}: no class directories found")
    names = [d.name for d in dirs]
    if require_real and real_name not in names:
        raise IngestionError(f"{root}: missing real class directory {real_name!r}")
    ids = _assign_ids(names, real_name)
    records = []
    for d in dirs:
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise IngestionError(f"class directory {d} contains no images")
        for f in files:
            try:
                with Image.open(f) as img:
                    img.verify()
            except (UnidentifiedImageError, OSError) as exc:
                raise IngestionError(f"cannot decode image {f}: {exc}") from exc
        kind = REAL_KIND if d.name == real_name else FAKE_KIND
        records.append(ClassRecord(ids[d.name], d.name, kind, list(files),
                                   _split_tags(len(files), train_fraction)))
    shape = (3, image_cfg.crop, image_cfg.crop)
    return ClassDataset(records, shape, image_cfg)


def parse_csv_rows(path: Path):
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise IngestionError(
                    f"{path}: row {lineno} has {len(cells)} columns, expected {width}")
            try:
                rows.append(np.array([float(c) for c in cells], dtype=np.float32))
            except ValueError as exc:
                raise IngestionError(f"{path}: row {lineno}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path}: no samples")
    return rows


def load_vector_dataset(source, real_name: str = "real", train_fraction: float = 0.8,
                        require_real: bool = True) -> ClassDataset:
    """CSV-per-class vectors. `source` is a directory of <class>.csv or a name->path map."""
    if isinstance(source, Mapping):
        paths = {name: Path(p) for name, p in source.items()}
    else:
        root = Path(source)
        if not root.is_dir():
            raise IngestionError(f"dataset root {root} is not a directory")
        paths = {p.stem: p for p in sorted(root.glob("*.csv"))}
    if not paths:
        raise IngestionError("no class CSV files found")
    if require_real and real_name not in paths:
        raise IngestionError(f"missing real class file {real_name!r}.csv")
    ids = _assign_ids(list(paths), real_name)
    records = []
    dim = None
    for name in sorted(paths, key=lambda n: ids[n]):
        rows = parse_csv_rows(paths[name])
        if dim is None:
            dim = rows[0].size
        elif rows[0].size != dim:
            raise IngestionError(
                f"{paths[name]}: width {rows[0].size} differs from other classes ({dim})")
        kind = REAL_KIND if name == real_name else FAKE_KIND
        records.append(ClassRecord(ids[name], name, kind, rows,
                                   _split_tags(len(rows), train_fraction)))
    return ClassDataset(records, (dim,))


def export_csv_dataset(ds: ClassDataset, root_path) -> None:
    """Write a vector dataset back out as root/<class_name>.csv, one row per sample."""
    if len(ds.input_shape) != 1:
        raise InputError("only flat vector datasets export to CSV")
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for c in ds.classes:
        with open(root / f"{c.name}.csv", "w", encoding="utf-8") as fh:
            for sample in c.samples:
                fh.write(",".join(format(float(v), ".17g") for v in sample) + "\n")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _place_centers(num: int, dim: int, separation: float, rng,
                   box_halfwidth: float, max_attempts: int = 10000, existing=()):
    taken = list(existing)
    placed = []
    attempts = 0
    while len(placed) < num:
        if attempts >= max_attempts:
            raise ConfigurationError(
                f"could not place {num} centers pairwise >= {separation} apart "
                f"after {max_attempts} draws")
        attempts += 1
        cand = rng.uniform(-box_halfwidth, box_halfwidth, dim)
        if all(np.linalg.norm(cand - c) >= separation for c in taken):
            taken.append(cand)
            placed.append(cand)
    return placed


def _place_centers_adaptive(num: int, dim: int, separation: float, rng, existing=()):
    """Place centers in the tightest feasible box so the separation constraint binds.

    Starts from a box whose typical pairwise distance is ~2x the separation and
    grows it when rejection sampling cannot fit all centers.
    """
    half = separation * max(float(np.sqrt(6.0 / dim)), 0.5)
    for _ in range(8):
        try:
            return _place_centers(num, dim, separation, rng, half,
                                  max_attempts=2000 * num, existing=existing)
        except ConfigurationError:
            half *= 1.35
    raise ConfigurationError(
        f"could not place {num} centers pairwise >= {separation} apart")


def generate_synthetic(cfg: SynthConfig) -> ClassDataset:
    """Real class around one center, each fake class around its own center(s).

    Centers are rejection-sampled to sit pairwise >= center_separation apart.
    A multimodal class gets a second sub-center placed exactly like another
    class center, so its two modes are as distinct as two separate generators.
    """
    rng = np.random.default_rng(cfg.seed)
    n_centers = cfg.num_fake_classes + 1
    centers = _place_centers_adaptive(n_centers, cfg.dimension, cfg.center_separation, rng)

    modes = {cid: [centers[cid]] for cid in range(n_centers)}
    placed = list(centers)
    for cid in cfg.multimodal_classes:
        [sub] = _place_centers_adaptive(1, cfg.dimension, cfg.center_separation, rng,
                                        existing=placed)
        modes[cid].append(sub)
        placed.append(sub)

    names = ["real"] + [f"gen_{string.ascii_lowercase[i]}" for i in range(cfg.num_fake_classes)]
    records = []
    for cid in range(n_centers):
        n = cfg.samples_per_class
        if len(modes[cid]) == 1:
            pts = modes[cid][0] + cfg.within_class_noise * rng.standard_normal((n, cfg.dimension))
        else:
            pick = rng.integers(0, len(modes[cid]), n)
            base = np.stack([modes[cid][k] for k in pick])
            pts = base + cfg.within_class_noise * rng.standard_normal((n, cfg.dimension))
        samples = [row.astype(np.float32) for row in pts]
        kind = REAL_KIND if cid == 0 else FAKE_KIND
        records.append(ClassRecord(cid, names[cid], kind, samples,
                                   _split_tags(n, cfg.train_fraction)))
    return ClassDataset(records, (cfg.dimension,))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _crop_offsets(height: int, width: int, crop: int, mode: str, rng):
    if mode == "train":
        top = int(rng.integers(0, height - crop + 1))
        left = int(rng.integers(0, width - crop + 1))
    else:
        top = (height - crop) // 2
        left = (width - crop) // 2
    return top, left


def preprocess(sample, mode: str, rng=None,
               image_cfg: Optional[ImagePreprocess] = None) -> np.ndarray:
    """Turn a raw sample into a network-ready tensor.

    Vectors pass through as float32. Images: resize shorter side (bilinear),
    random crop + 50% horizontal flip in train mode, center crop in eval mode,
    pixels scaled to [0, 1], CHW float32. Grayscale is replicated to 3 channels.
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be train or eval, got {mode!r}")
    if isinstance(sample, np.ndarray):
        return sample.astype(np.float32, copy=False)
    if mode == "train" and rng is None:
        raise InputError("train-mode preprocessing needs an rng")
    cfg = image_cfg or ImagePreprocess()
    path = Path(sample)
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    w, h = img.size
    if w < 8 or h < 8:
        raise InputError(f"image {path} is {w}x{h}; minimum is 8x8")
    img = img.convert("RGB")
    scale = cfg.resize / min(w, h)
    img = img.resize((max(cfg.resize, round(w * scale)), max(cfg.resize, round(h * scale))),
                     Image.BILINEAR)
    rw, rh = img.size
    top, left = _crop_offsets(rh, rw, cfg.crop, mode, rng)
    img = img.crop((left, top, left + cfg.crop, top + cfg.crop))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = np.transpose(arr, (2, 0, 1))
    if mode == "train" and rng.random() < 0.5:
        arr = arr[:, :, ::-1]
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# episodic sampling
# ---------------------------------------------------------------------------

def eligible_classes(ds: ClassDataset, cfg: SamplerConfig):
    """Classes with enough split samples for one episode; warns about exclusions."""
    need = cfg.n_support + cfg.n_query
    keep, dropped = [], []
    for c in ds.classes:
        (keep if len(c.indices(cfg.split)) >= need else dropped).append(c)
    if dropped:
        log.warning("excluding %s from sampling: fewer than %d %s samples",
                    [c.name for c in dropped], need, cfg.split)
    return keep

def sample_episode(ds: ClassDataset, cfg: SamplerConfig, rng) -> Episode:
    """Draw one N_c-way episode: classes uniform without replacement, then per class
    N_s + N_q distinct samples split into support and query."""
    need = cfg.n_support + cfg.n_query
    pool = [c for c in ds.classes if len(c.indices(cfg.split)) >= need]
    if len(pool) < cfg.n_classes:
        raise SamplingError(
            f"need {cfg.n_classes} classes with >= {need} {cfg.split} samples, "
            f"only {len(pool)} qualify")
    mode = "train" if cfg.split == "train" else "eval"
    chosen = rng.choice(len(pool), size=cfg.n_classes, replace=False)
    class_ids, sup_all, qry_all, sup_idx, qry_idx = [], [], [], [], []
    for k in chosen:
        c = pool[int(k)]
        split_idx = np.asarray(c.indices(cfg.split))
        picked = rng.choice(split_idx, size=need, replace=False)
        s_idx, q_idx = picked[: cfg.n_support], picked[cfg.n_support:]
        sup_all.append(np.stack([
            preprocess(c.samples[int(i)], mode, rng, ds.image_cfg) for i in s_idx]))
        qry_all.append(np.stack([
            preprocess(c.samples[int(i)], mode, rng, ds.image_cfg) for i in q_idx]))
        class_ids.append(c.class_id)
        sup_idx.append(tuple(int(i) for i in s_idx))
        qry_idx.append(tuple(int(i) for i in q_idx))
    return Episode(tuple(class_ids), np.stack(sup_all), np.stack(qry_all),
                   tuple(sup_idx), tuple(qry_idx))
