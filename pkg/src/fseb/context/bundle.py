"""On-disk context bundle and per-step context batch sampling.

Layout of a bundle directory::

    manifest.json    counts, dims, provider names, SHA-256 per data file
    embeddings.f32   M_total x d little-endian float32, row-major
    images.u8        M_total x H x W x C raw uint8

Context targets are identically zero and are not stored anywhere.
"""

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, CorruptionError, DataError, FormatError

FORMAT_NAME = "fseb-context-bundle"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
EMBEDDINGS = "embeddings.f32"
IMAGES = "images.u8"


@dataclass
class ContextBundle:
    images: np.ndarray = None  # M x H x W x C uint8
    embeddings: np.ndarray = None  # M x d float32
    providers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images is not None:
            self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
            if self.images.ndim != 4:
                raise DataError(f"context images must be M x H x W x C, got {self.images.shape}")
        if self.embeddings is not None:
            self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
            if self.embeddings.ndim != 2:
                raise DataError(f"embeddings must be M x d, got {self.embeddings.shape}")
            if not np.all(np.isfinite(self.embeddings)):
                raise DataError("embeddings contain non-finite values")
        if self.images is None and self.embeddings is None:
            raise DataError("a context bundle needs images, embeddings, or both")
        if self.images is not None and self.embeddings is not None:
            if self.images.shape[0] != self.embeddings.shape[0]:
                raise DataError(
                    f"{self.images.shape[0]} context images but {self.embeddings.shape[0]} embedding rows"
                )

    @property
    def M_total(self):
        src = self.embeddings if self.embeddings is not None else self.images
        return int(src.shape[0])

    @property
    def d(self):
        return 0 if self.embeddings is None else int(self.embeddings.shape[1])

    @property
    def has_embeddings(self):
        return self.embeddings is not None

    def network_inputs(self, idx=None):
        """Images as float64 ``n x C x H x W`` in [0, 1]."""
        if self.images is None:
            raise DataError("this context bundle carries no images")
        imgs = self.images if idx is None else self.images[idx]
        return imgs.transpose(0, 3, 1, 2).astype(np.float64) / 255.0

    def checksum(self):
        h = hashlib.sha256()
        for arr in (self.embeddings, self.images):
            if arr is not None:
                h.update(arr.tobytes())
        return h.hexdigest()

    def manifest(self):
        files = {}
        if self.embeddings is not None:
            files[EMBEDDINGS] = _sha256(self.embeddings.astype("<f4").tobytes())
        if self.images is not None:
            files[IMAGES] = _sha256(self.images.tobytes())
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "M_total": self.M_total,
            "d": self.d,
            "image_shape": None if self.images is None else list(self.images.shape[1:]),
            "providers": dict(self.providers),
            "checksums": files,
            "content_sha256": self.checksum(),
            "meta": dict(self.meta),
        }

    def __eq__(self, other):
        if not isinstance(other, ContextBundle):
            return NotImplemented
        return (
            _arr_eq(self.images, other.images)
            and _arr_eq(self.embeddings, other.embeddings)
            and self.providers == other.providers
            and self.meta == other.meta
        )


def _arr_eq(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _sha256(buf):
    return hashlib.sha256(buf).hexdigest()


@contextmanager
def _exclusive(directory):
    lock = Path(directory) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{directory} is locked by another writer ({lock} exists)") from None
    try:
        yield
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


def write_context_bundle(bundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with _exclusive(directory):
        for name in (EMBEDDINGS, IMAGES):
            (directory / name).unlink(missing_ok=True)
        if bundle.embeddings is not None:
            (directory / EMBEDDINGS).write_bytes(bundle.embeddings.astype("<f4").tobytes())
        if bundle.images is not None:
            (directory / IMAGES).write_bytes(bundle.images.tobytes())
        (directory / MANIFEST).write_text(json.dumps(bundle.manifest(), indent=2, sort_keys=True) + "\n")
    return directory


def load_context_bundle(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FormatError(f"{directory}: no {MANIFEST}")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if man.get("format") != FORMAT_NAME or man.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a version-{FORMAT_VERSION} context bundle")
    for key in ("M_total", "d", "image_shape", "checksums"):
        if key not in man:
            raise FormatError(f"{path}: manifest lacks {key!r}")

    blobs = {}
    for name, digest in man["checksums"].items():
        if name not in (EMBEDDINGS, IMAGES):
            raise FormatError(f"{path}: unexpected data file {name!r}")
        fpath = directory / name
        if not fpath.exists():
            raise CorruptionError(f"{fpath} is missing")
        buf = fpath.read_bytes()
        if _sha256(buf) != digest:
            raise CorruptionError(f"{fpath}: checksum mismatch")
        blobs[name] = buf

    M, d = int(man["M_total"]), int(man["d"])
    embeddings = images = None
    if EMBEDDINGS in blobs:
        buf = blobs[EMBEDDINGS]
        if d < 1 or len(buf) != M * d * 4:
            raise FormatError(f"{directory}: embeddings file holds {len(buf)} bytes, manifest says {M} x {d}")
        embeddings = np.frombuffer(buf, dtype="<f4").reshape(M, d).astype(np.float32)
    elif d != 0:
        raise FormatError(f"{path}: d={d} but no embeddings file")
    if IMAGES in blobs:
        shape = man["image_shape"]
        if not shape or len(shape) != 3:
            raise FormatError(f"{path}: bad image_shape {shape!r}")
        buf = blobs[IMAGES]
        if len(buf) != M * int(np.prod(shape)):
            raise FormatError(f"{directory}: images file holds {len(buf)} bytes, manifest says {M} x {shape}")
        images = np.frombuffer(buf, dtype=np.uint8).reshape([M] + list(shape)).copy()
    bundle = ContextBundle(images, embeddings, man.get("providers", {}), man.get("meta", {}))
    if "content_sha256" in man and bundle.checksum() != man["content_sha256"]:
        raise CorruptionError(f"{path}: content checksum mismatch")
    return bundle


def sample_context_batch(bundle, m, rng):
    """``m`` distinct rows drawn uniformly; returns (indices, float64 embeddings)."""
    if not bundle.has_embeddings:
        raise DataError("context bundle has no embeddings yet; run the embed step")
    if not 1 <= m <= bundle.M_total:
        raise ConfigError(f"context batch size {m} must lie in [1, {bundle.M_total}]")
    idx = rng.choice(bundle.M_total, size=m, replace=False)
    return idx, bundle.embeddings[idx].astype(np.float64)
