"""Datasets on disk, augmentation, and a synthetic lesion generator.

Images are float32 arrays shaped (3, H, W) with values in [0, 1]; label
maps are uint8 (H, W) arrays holding 0 = Background, 1 = Skin, 2 = Lesion.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, InvalidArgumentError, ShapeError
from .layers import resize_bilinear, resize_nearest
from .tensor import DTYPE, child_rng, make_rng

log = logging.getLogger(__name__)

WORKING_SIZE = (360, 480)
BACKGROUND, SKIN, LESION = 0, 1, 2

NOISE_KINDS = ("gaussian", "localvar", "poisson", "speckle", "salt_pepper")
FILTER_KINDS = ("hist_eq", "median", "edge_enhance")
GAUSSIAN_VAR = 0.01
SPECKLE_VAR = 0.04
SALT_PEPPER_DENSITY = 0.05
POISSON_SCALE = 255.0
EDGE_ALPHA = 0.5


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.label.shape:
            raise ShapeError(f"image {self.image.shape} and label {self.label.shape} do not align")

    @property
    def size(self):
        return self.label.shape


@dataclass
class AugmentConfig:
    reflect_xy: bool = True
    translate_x_px: tuple = (-100.0, 100.0)
    rotate_deg: tuple = (-30.0, 30.0)
    scale: tuple = (0.75, 1.5)
    noise_recipes: list = field(default_factory=list)
    filters: list = field(default_factory=list)
    crops_per_image: int = 0

    def __post_init__(self):
        for name in ("translate_x_px", "rotate_deg", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidArgumentError(f"{name} range {lo, hi} is inverted")
        for kind, reps in self.noise_recipes:
            if kind not in NOISE_KINDS or reps < 0:
                raise InvalidArgumentError(f"bad noise recipe ({kind!r}, {reps})")
        for f in self.filters:
            if f not in FILTER_KINDS:
                raise InvalidArgumentError(f"unknown filter {f!r}")

    @classmethod
    def off(cls):
        return cls(reflect_xy=False, translate_x_px=(0.0, 0.0), rotate_deg=(0.0, 0.0), scale=(1.0, 1.0))

    @classmethod
    def full_recipe(cls):
        """Filters plus five noise kinds applied ten times each."""
        return cls(noise_recipes=[(k, 10) for k in NOISE_KINDS], filters=list(FILTER_KINDS))

    @property
    def enabled(self):
        return (self.reflect_xy or self.translate_x_px != (0.0, 0.0)
                or self.rotate_deg != (0.0, 0.0) or self.scale != (1.0, 1.0))


# ---------------------------------------------------------------- raster I/O


def read_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_label(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        return np.asarray(im).astype(np.uint8)


def to_uint8(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_image(image, path):
    Image.fromarray(to_uint8(image), "RGB").save(path)


def write_label(label, path):
    Image.fromarray(np.asarray(label, np.uint8), "L").save(path)


# ---------------------------------------------------------------- loading


def resize_sample(s, target=WORKING_SIZE):
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise InvalidArgumentError(f"bad target size {target}")
    if s.size == (h, w):
        return s
    image = np.clip(resize_bilinear(s.image, h, w), 0, 1).astype(DTYPE)
    return Sample(image, resize_nearest(s.label, h, w), s.source_id)


def split_counts(n, fractions):
    """Sizes of (train, validation, test) for ``n`` items.

    ``fractions`` is ``(train, test)`` or ``(train, validation, test)``;
    the held-out parts are rounded and the training part takes the rest.
    """
    if len(fractions) == 2:
        fractions = (fractions[0], 0.0, fractions[1])
    _, val_f, test_f = fractions
    n_test = int(math.floor(n * test_f + 0.5))
    n_val = int(math.floor(n * val_f + 0.5))
    return n - n_test - n_val, n_val, n_test


def split_stems(stems, fractions=(0.7, 0.3), seed=0):
    stems = sorted(stems)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(stems))
    shuffled = [stems[i] for i in order]
    n_train, n_val, _ = split_counts(len(stems), fractions)
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])


@dataclass
class LoadReport:
    missing_label: list = field(default_factory=list)
    missing_image: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


@dataclass
class Dataset:
    train: list
    validation: list
    test: list
    report: LoadReport


IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _stems(folder):
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_sample(image_path, label_path, target=WORKING_SIZE, source_id=None):
    image = read_image(image_path)
    label = read_label(label_path)
    if label.shape != image.shape[1:]:
        label = resize_nearest(label, *image.shape[1:])
    if label.size and label.max() > LESION:
        raise DataError(f"{label_path}: label values must be 0, 1 or 2 (found {int(label.max())})")
    s = Sample(image, label, source_id or Path(image_path).stem)
    return resize_sample(s, target) if target else s


def load_dataset(root, fractions=(0.7, 0.3), seed=0, target=WORKING_SIZE):
    """Read ``root/images`` and ``root/labels`` into train/validation/test sets.

    The split is a seeded shuffle of the sorted stems unless
    ``root/manifest.csv`` (columns ``stem,split``) assigns them explicitly.
    """
    root = Path(root)
    images = _stems(root / "images")
    labels = _stems(root / "labels")
    rep = LoadReport()
    rep.missing_label = sorted(set(images) - set(labels))
    rep.missing_image = sorted(set(labels) - set(images))
    stems = sorted(set(images) & set(labels))
    if not stems:
        rep.warnings.append(f"no image/label pairs found under {root}")
        log.warning(rep.warnings[-1])
        return Dataset([], [], [], rep)
    manifest = root / "manifest.csv"
    if manifest.is_file():
        parts = {"train": [], "validation": [], "test": []}
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                split = row["split"].strip().lower()
                split = "validation" if split in ("val", "valid") else split
                if row["stem"] in images and split in parts:
                    parts[split].append(row["stem"])
        groups = (parts["train"], parts["validation"], parts["test"])
    else:
        groups = split_stems(stems, fractions, seed)
    out = []
    for group in groups:
        samples = []
        for stem in group:
            try:
                samples.append(load_sample(images[stem], labels[stem], target, stem))
            except DataError as exc:
                rep.rejected.append(str(exc))
                log.warning("rejected %s", exc)
        out.append(samples)
    return Dataset(out[0], out[1], out[2], rep)


def save_samples(samples, out_dir, provenance=True):
    """Write ``images/``, ``labels/`` PNGs and a provenance CSV."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        stem = f"{i:06d}"
        write_image(s.image, out / "images" / f"{stem}.png")
        write_label(s.label, out / "labels" / f"{stem}.png")
        rows.append((stem, s.source_id))
    if provenance:
        with open(out / "provenance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("stem", "provenance"))
            w.writerows(rows)
    return out


# ---------------------------------------------------------------- class weights


def class_weights(labels, mode="median"):
    """Loss weights ``[w_skin, w_lesion]`` from per-image class frequencies.

    A class's frequency in one image is its pixel count over the image's
    non-background pixels; frequencies are averaged over the images that
    contain the class.  ``mode="median"`` returns ``median(f) / f_c``,
    ``mode="inverse"`` returns ``1 / f_c``.  A class absent from every image
    gets weight 0.
    """
    freqs = {SKIN: [], LESION: []}
    for lab in labels:
        lab = np.asarray(lab)
        valid = int((lab > 0).sum())
        if not valid:
            continue
        for c in (SKIN, LESION):
            n = int((lab == c).sum())
            if n:
                freqs[c].append(n / valid)
    f = {c: float(np.mean(v)) if v else 0.0 for c, v in freqs.items()}
    present = [f[c] for c in (SKIN, LESION) if f[c] > 0]
    if not present:
        raise InvalidArgumentError("no Skin or Lesion pixels in any label")
    ref = float(np.median(present)) if mode == "median" else 1.0
    if mode not in ("median", "inverse"):
        raise InvalidArgumentError(f"unknown class-weight mode {mode!r}")
    weights = []
    for c in (SKIN, LESION):
        if f[c] == 0:
            log.warning("class %d absent from all labels; its weight is 0", c)
            weights.append(0.0)
        else:
            weights.append(ref / f[c])
    return weights


# ---------------------------------------------------------------- geometric


def draw_geometric(cfg, rng):
    """One random draw of every transform in ``cfg``."""
    flip_x = bool(cfg.reflect_xy and rng.random() < 0.5)
    flip_y = bool(cfg.reflect_xy and rng.random() < 0.5)
    return {
        "flip_x": flip_x,
        "flip_y": flip_y,
        "tx": float(rng.uniform(*cfg.translate_x_px)),
        "angle": float(rng.uniform(*cfg.rotate_deg)),
        "sx": float(rng.uniform(*cfg.scale)),
        "sy": float(rng.uniform(*cfg.scale)),
    }


def apply_geometric(s, flip_x=False, flip_y=False, tx=0.0, angle=0.0, sx=1.0, sy=1.0):
    """Reflect, then scale/rotate about the centre and shift horizontally.

    Images use bilinear interpolation and labels nearest-neighbour; pixels
    that come from outside the source are Background with a black image.
    """
    image, label = s.image, s.label
    if flip_x:
        image, label = image[:, :, ::-1], label[:, ::-1]
    if flip_y:
        image, label = image[:, ::-1, :], label[::-1, :]
    if tx != 0 or angle != 0 or sx != 1 or sy != 1:
        h, w = label.shape
        a = math.radians(angle)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        fwd = rot @ np.diag([sy, sx])          # (row, col) output = fwd @ input
        inv = np.linalg.inv(fwd)
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        shift = np.array([0.0, tx])
        offset = centre - inv @ (centre + shift)
        image = np.stack([
            ndimage.affine_transform(ch, inv, offset, order=1, mode="constant", cval=0.0)
            for ch in image
        ])
        label = ndimage.affine_transform(label, inv, offset, order=0, mode="constant", cval=BACKGROUND)
    return Sample(np.ascontiguousarray(image, dtype=DTYPE), np.ascontiguousarray(label, dtype=np.uint8),
                  s.source_id)


def augment_geometric(s, cfg, rng):
    return apply_geometric(s, **draw_geometric(cfg, rng))


# ---------------------------------------------------------------- noise


def add_noise(image, kind, rng, variance=None, density=None):
    """Return a noisy copy of ``image`` clamped to [0, 1].

    ``gaussian``: additive N(0, 0.01).  ``localvar``: additive Gaussian with
    per-value variance 0.01 * x / mean(x).  ``poisson``: Poisson(255 x) / 255.
    ``speckle``: x + x n with n ~ N(0, 0.04).  ``salt_pepper``: a fraction
    0.05 of the values set to 0 or 1 with equal odds.
    """
    x = np.asarray(image, dtype=np.float64)
    if kind == "gaussian":
        var = GAUSSIAN_VAR if variance is None else variance
        y = x + rng.normal(0.0, math.sqrt(var), x.shape)
    elif kind == "localvar":
        var = GAUSSIAN_VAR if variance is None else variance
        mean = x.mean()
        local = var * x / mean if mean > 0 else np.zeros_like(x)
        y = x + rng.standard_normal(x.shape) * np.sqrt(local)
    elif kind == "poisson":
        y = rng.poisson(np.clip(x, 0, None) * POISSON_SCALE) / POISSON_SCALE
    elif kind == "speckle":
        var = SPECKLE_VAR if variance is None else variance
        y = x + x * rng.normal(0.0, math.sqrt(var), x.shape)
    elif kind == "salt_pepper":
        rho = SALT_PEPPER_DENSITY if density is None else density
        y = x.copy()
        flat = y.reshape(-1)
        n = int(round(rho * flat.size))
        idx = rng.choice(flat.size, size=n, replace=False)
        flat[idx] = (rng.random(n) < 0.5).astype(np.float64)
    else:
        raise InvalidArgumentError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    return np.clip(y, 0, 1).astype(DTYPE)


# ---------------------------------------------------------------- filters


def preprocess_filter(image, kind):
    x = np.asarray(image, dtype=DTYPE)
    if kind == "hist_eq":
        out = np.empty_like(x)
        for i, ch in enumerate(x):
            q = np.clip(np.round(ch * 255), 0, 255).astype(np.int64)
            cdf = np.cumsum(np.bincount(q.ravel(), minlength=256)) / q.size
            lo = cdf[q.min()]
            lut = (cdf - lo) / (1 - lo) if lo < 1 else np.zeros(256)
            out[i] = np.clip(lut[q], 0, 1)
        return out
    if kind == "median":
        return np.stack([ndimage.median_filter(ch, size=3, mode="nearest") for ch in x])
    if kind == "edge_enhance":
        lap = np.stack([ndimage.laplace(ch, mode="nearest") for ch in x])
        return np.clip(x - EDGE_ALPHA * lap, 0, 1).astype(DTYPE)
    raise InvalidArgumentError(f"unknown filter {kind!r}; choose from {FILTER_KINDS}")


# ---------------------------------------------------------------- crops


def lesion_fraction(label):
    valid = int((label > 0).sum())
    return (label == LESION).sum() / valid if valid else 0.0


def crop_sample(s, n, min_lesion_frac=0.05, rng=None, target=None, max_tries=100):
    """``n`` random crops, each 40-80 % of the extents, resized to ``target``.

    Each crop must have at least ``min_lesion_frac`` lesion pixels among its
    non-background pixels; after ``max_tries`` rejected draws a crop is taken
    without the constraint.
    """
    if n < 1:
        raise InvalidArgumentError("need at least one crop")
    h, w = s.size
    target = target or (h, w)
    out = []
    for k in range(n):
        for attempt in range(max_tries + 1):
            ch = max(1, int(round(h * rng.uniform(0.4, 0.8))))
            cw = max(1, int(round(w * rng.uniform(0.4, 0.8))))
            r0 = int(rng.integers(0, h - ch + 1))
            c0 = int(rng.integers(0, w - cw + 1))
            # judge the label as emitted, after the nearest-neighbour resize
            lab = resize_nearest(s.label[r0:r0 + ch, c0:c0 + cw], *target)
            if attempt == max_tries or lesion_fraction(lab) >= min_lesion_frac:
                break
        image = s.image[:, r0:r0 + ch, c0:c0 + cw]
        if image.shape[1:] != tuple(target):
            image = np.clip(resize_bilinear(image, *target), 0, 1).astype(DTYPE)
        out.append(Sample(image, lab, f"{s.source_id}|crop{k}"))
    return out


def crop_protocol(to_crop, passthrough=(), n=10, min_lesion_frac=0.05, seed=0, target=None):
    """Replace each ``to_crop`` sample by ``n`` crops and append ``passthrough``."""
    out = []
    for s in to_crop:
        out.extend(crop_sample(s, n, min_lesion_frac, child_rng(seed, s.source_id, 0), target or s.size))
    out.extend(passthrough)
    return out


def expand_augmented(samples, cfg, seed=0):
    """Filtered base copy plus noisy copies of it, per source sample.

    Each source yields ``1 + sum(repetitions)`` samples.  Provenance strings
    name the source and the transform chain.
    """
    out = []
    for s in samples:
        image = s.image
        chain = s.source_id
        for f in cfg.filters:
            image = preprocess_filter(image, f)
        if cfg.filters:
            chain += "|filter:" + "+".join(cfg.filters)
        out.append(Sample(image, s.label, chain))
        variant = 0
        for kind, reps in cfg.noise_recipes:
            for r in range(reps):
                variant += 1
                noisy = add_noise(image, kind, child_rng(seed, s.source_id, variant))
                out.append(Sample(noisy, s.label.copy(), f"{chain}|noise:{kind}#{r}"))
    return out


def expanded_count(n_sources, cfg):
    return n_sources * (1 + sum(reps for _, reps in cfg.noise_recipes))


# ---------------------------------------------------------------- synthetic data


def _smooth_noise(shape, rng, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field_ / (np.abs(field_).max() + 1e-12)


def synth_lesion(n, size=(96, 96), rng=None, border=True, lesion_range=(0.02, 0.30)):
    """Skin-textured images with 1-3 darker elliptical lesions and exact labels."""
    h, w = size
    if h < 32 or w < 32:
        raise InvalidArgumentError(f"synthetic samples need at least 32x32, got {size}")
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    tint = np.array([1.0, 0.9, 0.8])[:, None, None]
    out = []
    for i in range(n):
        while True:
            label = np.full((h, w), SKIN, np.uint8)
            band = int(rng.integers(2, max(3, min(h, w) // 10))) if border and rng.random() < 0.5 else 0
            if band:
                edge = rng.integers(0, 4)
                if edge == 0:
                    label[:band] = BACKGROUND
                elif edge == 1:
                    label[-band:] = BACKGROUND
                elif edge == 2:
                    label[:, :band] = BACKGROUND
                else:
                    label[:, -band:] = BACKGROUND
            lesion = np.zeros((h, w), bool)
            for _ in range(int(rng.integers(1, 4))):
                a = rng.uniform(0.06, 0.22) * h
                b = rng.uniform(0.06, 0.22) * w
                r0 = rng.uniform(0.2, 0.8) * h
                c0 = rng.uniform(0.2, 0.8) * w
                t = rng.uniform(0, math.pi)
                dr, dc = rr - r0, cc - c0
                u = dr * math.cos(t) + dc * math.sin(t)
                v = -dr * math.sin(t) + dc * math.cos(t)
                lesion |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
            lesion &= label == SKIN
            frac = lesion.sum() / (h * w)
            if lesion_range[0] <= frac <= lesion_range[1]:
                break
        label[lesion] = LESION
        skin = 0.7 + 0.06 * _smooth_noise((h, w), rng, sigma=max(h, w) / 12)
        dark = rng.uniform(0.2, 0.4) + 0.04 * _smooth_noise((h, w), rng, sigma=2.0)
        base = np.where(lesion, dark, skin)
        image = base[None] * tint + rng.normal(0, 0.01, (3, h, w))
        image[:, label == BACKGROUND] = 0.1 + 0.05 * rng.random()
        out.append(Sample(np.clip(image, 0, 1).astype(DTYPE), label, f"synth{i:04d}"))
    return out


def synth_dataset(n, size, seed):
    return synth_lesion(n, size, make_rng(seed))
