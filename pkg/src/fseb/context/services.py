"""Provider access for summarisation, image generation and image embedding.

Wire protocol (HTTP POST, JSON bodies, images as base64 PNG)::

    summarise  {model, prompt, images: [png, ...]}          -> {text}
    generate   {model, prompt, n, width, height}            -> {images: [png, ...]}
    embed      {model, inputs: [png, ...]}                  -> {embeddings: [[float, ...], ...]}

An endpoint whose ``base_url`` starts with ``stub://`` never touches the
network.  Stub behaviour is selected by the URL, e.g.::

    stub://                                   hash-keyed summaries / textures / embeddings
    stub://semantic?family=stripes&classes=4  class-aware embeddings for synthetic images
    stub://randproj?d=64&seed=0               seeded random projection of the pixels
"""

import base64
import hashlib
import io
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from urllib.parse import parse_qs, urlparse

import numpy as np
import requests
from PIL import Image

from ..data import recover_class, render
from ..errors import ConfigError, ProtocolError, ServiceError, UsageError
from ..rng import derive_seed

log = logging.getLogger(__name__)

DEFAULT_STUB_DIM = 1152


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str
    model: str = ""
    timeout: float = 30.0
    retry_budget: int = 2
    token_env: str = "FSEB_PROVIDER_TOKEN"
    backoff: float = 0.5
    max_in_flight: int = 1

    def __post_init__(self):
        if self.retry_budget < 0:
            raise ConfigError(f"retry_budget must be >= 0, got {self.retry_budget}")
        if not self.timeout > 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")
        if self.max_in_flight < 1:
            raise ConfigError(f"max_in_flight must be >= 1, got {self.max_in_flight}")

    @property
    def is_stub(self):
        return self.base_url.startswith("stub://")

    @property
    def stub_kind(self):
        return urlparse(self.base_url).netloc or "hash"

    def stub_params(self):
        return {k: v[-1] for k, v in parse_qs(urlparse(self.base_url).query).items()}

    @property
    def name(self):
        return f"{self.base_url}#{self.model}" if self.model else self.base_url

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown endpoint keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# image encoding


def encode_png(img):
    img = np.asarray(img, dtype=np.uint8)
    mode_img = img[..., 0] if img.ndim == 3 and img.shape[2] == 1 else img
    buf = io.BytesIO()
    Image.fromarray(mode_img).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(text, channels=None):
    try:
        img = Image.open(io.BytesIO(base64.b64decode(text, validate=True)))
        img.load()
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ProtocolError(f"response image is not a base64 PNG ({exc})") from exc
    if channels == 1:
        img = img.convert("L")
    elif channels == 3:
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.uint8)
    return arr[..., None] if arr.ndim == 2 else arr


def image_hash(img):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h = hashlib.sha256(str(img.shape).encode())
    h.update(img.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# HTTP


def post_json(ep, payload):
    """POST ``payload`` and return the decoded JSON object, retrying
    transport failures and 5xx/429 answers up to ``ep.retry_budget`` times."""
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(ep.token_env) if ep.token_env else None
    if token:
        headers["Authorization"] = f"Bearer {token}"
    last = None
    for attempt in range(ep.retry_budget + 1):
        if attempt:
            time.sleep(ep.backoff * 2 ** (attempt - 1))
        try:
            resp = requests.post(ep.base_url, json=payload, headers=headers, timeout=ep.timeout)
        except requests.RequestException as exc:
            last = f"{type(exc).__name__}: {exc}"
            log.warning("request to %s failed (attempt %d): %s", ep.base_url, attempt + 1, last)
            continue
        if resp.status_code >= 500 or resp.status_code == 429:
            last = f"HTTP {resp.status_code}"
            log.warning("request to %s got %s (attempt %d)", ep.base_url, last, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise ServiceError(f"{ep.base_url} rejected the request: HTTP {resp.status_code} {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{ep.base_url} returned non-JSON body") from exc
        if not isinstance(body, dict):
            raise ProtocolError(f"{ep.base_url} returned {type(body).__name__}, expected a JSON object")
        return body
    raise ServiceError(f"{ep.base_url} failed after {ep.retry_budget + 1} attempts (last: {last})")


def _field(body, key, kind, ep):
    if key not in body or not isinstance(body[key], kind):
        raise ProtocolError(f"{ep.base_url}: response lacks a {kind.__name__} field {key!r}")
    return body[key]


def _map_chunks(ep, fn, chunks):
    if ep.max_in_flight == 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=ep.max_in_flight) as pool:
        return list(pool.map(fn, chunks))


# ---------------------------------------------------------------------------
# operations


def summarize_references(ep, reference_images, requirements):
    """Provider description of the reference images' style and usage."""
    if not reference_images:
        raise UsageError("summarisation needs at least one reference image")
    if ep.is_stub:
        return _stub_summary(reference_images, requirements)
    body = post_json(ep, {
        "model": ep.model,
        "prompt": requirements,
        "images": [encode_png(im) for im in reference_images],
    })
    return _field(body, "text", str, ep)


def synthesize_images(ep, prompt, n, rng=None):
    """``n`` images for ``prompt`` (a :class:`~fseb.context.pipeline.PromptSpec`)."""
    if n < 1:
        raise UsageError(f"image count must be >= 1, got {n}")
    width, height, channels = prompt.width, prompt.height, prompt.channels
    if ep.is_stub:
        return [_stub_image(ep, prompt, i) for i in range(n)]
    body = post_json(ep, {"model": ep.model, "prompt": prompt.rendered, "n": n, "width": width, "height": height})
    encoded = _field(body, "images", list, ep)
    if len(encoded) != n:
        raise ProtocolError(f"{ep.base_url}: asked for {n} images, received {len(encoded)}")
    images = [decode_png(e, channels) for e in encoded]
    for im in images:
        if im.shape[:2] != (height, width):
            raise ProtocolError(f"{ep.base_url}: image of size {im.shape[:2]}, requested {(height, width)}")
    return images


def embed_images(ep, images, batch_size=16):
    """Embedding matrix (n x d, float32), one row per image in order."""
    if len(images) < 1:
        raise UsageError("nothing to embed")
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    if ep.is_stub:
        embedder = stub_embedder(ep)
        rows = [embedder(im) for im in images]
        return np.stack(rows).astype(np.float32)

    def call(chunk):
        body = post_json(ep, {"model": ep.model, "inputs": [encode_png(im) for im in chunk]})
        emb = _field(body, "embeddings", list, ep)
        if len(emb) != len(chunk):
            raise ProtocolError(f"{ep.base_url}: {len(chunk)} inputs but {len(emb)} embeddings")
        try:
            return np.asarray(emb, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"{ep.base_url}: embeddings are not a numeric matrix") from exc

    parts = _map_chunks(ep, call, chunks)
    dims = {p.shape[1] if p.ndim == 2 else -1 for p in parts}
    if len(dims) != 1 or -1 in dims:
        raise ProtocolError(f"{ep.base_url}: inconsistent embedding dimensions {sorted(dims)}")
    out = np.concatenate(parts, axis=0)
    if not np.all(np.isfinite(out)):
        raise ProtocolError(f"{ep.base_url}: non-finite embedding values")
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# offline stubs


def _stub_summary(images, requirements):
    h = hashlib.sha256()
    for im in images:
        h.update(image_hash(im).encode())
    key = h.hexdigest()[:12]
    first = np.asarray(images[0])
    mean = float(np.mean([np.mean(im) for im in images])) / 255.0
    shape = "x".join(str(s) for s in first.shape)
    parts = [
        f"Reference set {key}: {len(images)} image(s) of shape {shape}, mean intensity {mean:.3f}.",
        "Style: centred single subject, plain background, consistent stroke and contrast.",
        "Usage: context images for an image classifier.",
    ]
    if requirements:
        parts.append(f"Requirements noted: {requirements.strip()}")
    return " ".join(parts)


_DESCRIPTOR = re.compile(r"\b(stripes|blobs)\s+class\s+(\d+)\s+of\s+(\d+)\b", re.IGNORECASE)


def _stub_image(ep, prompt, index):
    seed = int.from_bytes(hashlib.sha256(f"{prompt.rendered}\x00{index}".encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    h, w, c = prompt.height, prompt.width, prompt.channels
    match = _DESCRIPTOR.search(prompt.class_descriptor or "")
    if match and h == w:
        family, cls, k = match.group(1).lower(), int(match.group(2)), int(match.group(3))
        noise = float(ep.stub_params().get("noise", 0.15))
        img = render(family, cls, k, h, rng, pixel_noise=noise)
        planes = np.repeat(img[..., None], c, axis=2)
    else:
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        planes = np.zeros((h, w, c))
        for ch in range(c):
            for _ in range(3):
                fx, fy = rng.uniform(0.5, 4.0, size=2)
                planes[..., ch] += np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
            planes[..., ch] = (planes[..., ch] - planes[..., ch].min()) / (np.ptp(planes[..., ch]) + 1e-12)
    return np.round(np.clip(planes, 0.0, 1.0) * 255.0).astype(np.uint8)


def stub_embedder(ep):
    """Return ``image -> float64 vector`` for a stub endpoint."""
    params = ep.stub_params()
    kind = ep.stub_kind
    d = int(params.get("d", DEFAULT_STUB_DIM if kind == "hash" else 64))
    seed = int(params.get("seed", 0))

    if kind == "hash":
        def embed(img):
            rng = np.random.default_rng(int(image_hash(img)[:16], 16))
            return rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
        return embed

    if kind == "semantic":
        family = params.get("family", "stripes")
        k = int(params.get("classes", 4))
        noise = float(params.get("noise", 0.3))
        dirs = np.random.default_rng(derive_seed(seed, "semantic-dirs")).normal(size=(k, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

        def embed(img):
            cls, conf = recover_class(np.asarray(img, dtype=np.float64) / 255.0, family, k)
            rng = np.random.default_rng(int(image_hash(img)[:16], 16))
            return conf * dirs[cls] + noise * rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
        return embed

    if kind == "randproj":
        cache = {}

        def embed(img):
            flat = np.asarray(img, dtype=np.float64).ravel() / 255.0
            if flat.size not in cache:
                rng = np.random.default_rng(derive_seed(seed, "randproj", str(flat.size)))
                cache[flat.size] = rng.normal(0.0, 1.0 / np.sqrt(flat.size), size=(flat.size, d))
            return flat @ cache[flat.size]
        return embed

    raise ConfigError(f"unknown stub embedder {kind!r}")
