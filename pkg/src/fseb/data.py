"""Datasets: IDX ingestion, splits, stratified subsampling, synthetic images.

Images are always ``n x C x H x W`` float64 in ``[0, 1]``; IDX pixels are
divided by 255 and nothing else.
"""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError
from .rng import stream

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be n x C x H x W, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.name}: {self.images.shape[0]} images but labels shape {self.labels.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"{self.name}: labels outside [0, {self.n_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, idx, name=None):
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, name or self.name)


# ---------------------------------------------------------------------------
# IDX


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf, path, expected_magic):
    if len(buf) < 8:
        raise CorruptionError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise CorruptionError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    n = int(np.prod(dims))
    body = buf[4 + 4 * ndim:]
    if len(body) < n:
        raise CorruptionError(f"{path}: expected {n} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n).reshape(dims)


def load_idx(images_path, labels_path, name="idx", n_classes=None):
    """Load an image/label pair of IDX files (optionally gzipped)."""
    images = _parse_idx(_read(images_path), images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(_read(labels_path), labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected n x rows x cols, got {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    K = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), max(K, 2), name)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 ``n x rows x cols`` images and their labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape) + images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", labels.shape[0]) + labels.tobytes())


# ---------------------------------------------------------------------------
# splitting


def split_indices(n, val_fraction, seed):
    """Seeded shuffle of ``range(n)``; the first ``round(n * val_fraction)``
    positions form the validation part.  Both index arrays are sorted."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split for n={n}")
    perm = stream(seed, "split").permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split(ds, val_fraction, seed):
    tr, va = split_indices(len(ds), val_fraction, seed)
    return ds.take(tr, ds.name + ":train"), ds.take(va, ds.name + ":val")


def subsample(ds, fraction, seed):
    """Class-stratified subsample keeping ``round(fraction * n)`` examples."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    rng = stream(seed, "subsample")
    classes = np.unique(ds.labels)
    counts = {c: int(np.sum(ds.labels == c)) for c in classes}
    exact = {c: fraction * counts[c] for c in classes}
    keep = {c: int(np.floor(exact[c] + 1e-9)) for c in classes}
    remainder = int(round(fraction * len(ds))) - sum(keep.values())
    if remainder > 0:
        frac = np.array([exact[c] - keep[c] for c in classes])
        candidates = classes[frac > 1e-9]
        extra = rng.choice(candidates, size=min(remainder, len(candidates)), replace=False)
        for c in extra:
            keep[c] += 1
    chosen = []
    for c in classes:
        if keep[c] == 0:
            raise ConfigError(f"fraction {fraction} empties class {c}")
        idx = np.flatnonzero(ds.labels == c)
        chosen.append(rng.choice(idx, size=keep[c], replace=False))
    return ds.take(np.sort(np.concatenate(chosen)), f"{ds.name}:sub{fraction:g}")


# ---------------------------------------------------------------------------
# synthetic images

SYNTH_KINDS = ("stripes", "blobs", "noise")


@dataclass
class SynthSpec:
    kind: str = "stripes"
    size: int = 8
    n_classes: int = 4
    n_per_class: int = 100
    pixel_noise: float = 0.1
    ood_kind: str = "noise"
    n_ood: int = 200
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS or self.kind == "noise":
            raise ConfigError(f"in-distribution generator must be 'stripes' or 'blobs', got {self.kind!r}")
        if self.ood_kind not in SYNTH_KINDS:
            raise ConfigError(f"unknown OOD generator {self.ood_kind!r}")
        if self.ood_kind == self.kind:
            raise ConfigError("OOD generator must differ from the in-distribution family")
        if self.size < 4:
            raise ConfigError(f"image size must be at least 4, got {self.size}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def stripe_angle(class_index, n_classes):
    return np.pi * class_index / n_classes


def render(kind, class_index, n_classes, size, rng, pixel_noise=0.1, style=None):
    """One ``size x size`` image in [0, 1] from a pattern family.

    ``style`` optionally overrides the per-draw nuisance parameters
    (``freq``, ``contrast``) so a generator can vary style while keeping the
    class concept fixed.
    """
    style = style or {}
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2.0
    if kind == "stripes":
        theta = stripe_angle(class_index, n_classes) + rng.normal(0.0, 0.05)
        freq = style.get("freq", rng.uniform(1.5, 2.5)) / size
        phase = rng.uniform(0.0, 2 * np.pi)
        contrast = style.get("contrast", rng.uniform(0.6, 1.0))
        img = 0.5 + 0.5 * contrast * np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    elif kind == "blobs":
        ang = 2 * np.pi * class_index / n_classes
        r = 0.28 * size
        cx, cy = r * np.cos(ang) + rng.normal(0, 0.04 * size), r * np.sin(ang) + rng.normal(0, 0.04 * size)
        width = style.get("width", rng.uniform(0.12, 0.2)) * size
        contrast = style.get("contrast", rng.uniform(0.7, 1.0))
        img = 0.1 + contrast * 0.85 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
    elif kind == "noise":
        return rng.uniform(0.0, 1.0, size=(size, size))
    else:
        raise ConfigError(f"unknown pattern family {kind!r}")
    if pixel_noise > 0:
        img = img + rng.normal(0.0, pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def recover_class(image, kind, n_classes):
    """Best-guess generator class of ``image`` and a confidence in [0, 1].

    Stripes: dominant orientation from the gradient structure tensor.
    Blobs: angle of the intensity-weighted centroid.  Anything without a
    clear structure gets a low confidence.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1) if img.shape[-1] <= 4 else img.mean(axis=0)
    if kind == "stripes":
        gy, gx = np.gradient(img)
        jxx, jyy, jxy = np.sum(gx * gx), np.sum(gy * gy), np.sum(gx * gy)
        energy = jxx + jyy
        if energy <= 1e-12:
            return 0, 0.0
        # gradient direction is normal to the stripes' level lines, i.e. the
        # wave vector, whose angle is the class angle
        phi = 0.5 * np.arctan2(2 * jxy, jxx - jyy)
        coherence = np.sqrt((jxx - jyy) ** 2 + 4 * jxy ** 2) / energy
        c = int(np.round((phi % np.pi) / (np.pi / n_classes))) % n_classes
        return c, float(coherence)
    if kind == "blobs":
        size = img.shape[0]
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2.0
        w = np.clip(img - np.median(img), 0.0, None)
        total = w.sum()
        if total <= 1e-12:
            return 0, 0.0
        cx, cy = (w * xx).sum() / total, (w * yy).sum() / total
        ang = np.arctan2(cy, cx) % (2 * np.pi)
        c = int(np.round(ang / (2 * np.pi / n_classes))) % n_classes
        conf = float(np.clip(np.hypot(cx, cy) / (0.28 * size), 0.0, 1.0))
        return c, conf
    raise ConfigError(f"no class recovery for family {kind!r}")


def synth_dataset(spec):
    """In-distribution patterned dataset plus an OOD dataset from another family."""
    rng = stream(spec.seed, "synth", spec.kind)
    n = spec.n_classes * spec.n_per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    imgs = np.stack([render(spec.kind, int(c), spec.n_classes, spec.size, rng, spec.pixel_noise) for c in labels])
    perm = rng.permutation(n)
    in_dist = Dataset(imgs[perm][:, None], labels[perm], spec.n_classes, f"synth-{spec.kind}")

    ood_rng = stream(spec.seed, "synth-ood", spec.ood_kind)
    ood_labels = ood_rng.integers(0, spec.n_classes, size=spec.n_ood)
    ood_imgs = np.stack([
        render(spec.ood_kind, int(c), spec.n_classes, spec.size, ood_rng, spec.pixel_noise) for c in ood_labels
    ])
    ood = Dataset(ood_imgs[:, None], np.zeros(spec.n_ood, dtype=np.int64), spec.n_classes, f"synth-{spec.ood_kind}")
    return in_dist, ood


def uniform_noise(n, input_shape, n_classes, seed, name="noise"):
    """Uniform-noise OOD set with the given per-image shape."""
    imgs = stream(seed, "uniform-noise").uniform(0.0, 1.0, size=(n,) + tuple(input_shape))
    return Dataset(imgs, np.zeros(n, dtype=np.int64), n_classes, name)
