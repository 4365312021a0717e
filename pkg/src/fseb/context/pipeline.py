"""Context-point generation: reference summary, prompt construction, image
synthesis, embedding.

The prompt template is fixed and documented here; nothing about it claims to
match any particular published prompt wording.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from .bundle import ContextBundle
from .services import embed_images, summarize_references, synthesize_images

log = logging.getLogger(__name__)

PROMPT_TEMPLATE_SECTIONS = (
    ("Requirements", "requirements"),
    ("Reference summary", "summary"),
    ("Subject", "class_descriptor"),
)


@dataclass(frozen=True)
class PromptSpec:
    requirements: str
    summary: str
    class_descriptor: str
    rendered: str
    width: int = 28
    height: int = 28
    channels: int = 1
    count: int = 1

    @property
    def digest(self):
        return hashlib.sha256(self.rendered.encode()).hexdigest()


def build_prompt(requirements, summary, class_descriptor, width=28, height=28, channels=1, count=1):
    """Join the non-empty sections into one generation prompt."""
    values = {"requirements": requirements or "", "summary": summary or "", "class_descriptor": class_descriptor or ""}
    lines = [f"{title}: {values[key].strip()}" for title, key in PROMPT_TEMPLATE_SECTIONS if values[key].strip()]
    lines.append(f"Output: {count} image(s), {width}x{height} pixels, {'grayscale' if channels == 1 else 'colour'}.")
    return PromptSpec(
        requirements=values["requirements"],
        summary=values["summary"],
        class_descriptor=values["class_descriptor"],
        rendered="\n".join(lines),
        width=width,
        height=height,
        channels=channels,
        count=count,
    )


def _to_uint8_hwc(images):
    """Dataset images (n x C x H x W in [0, 1]) to a list of H x W x C uint8."""
    arr = np.round(np.asarray(images) * 255.0).clip(0, 255).astype(np.uint8)
    return list(arr.transpose(0, 2, 3, 1))


@dataclass
class GenerationPlan:
    requirements: str
    class_descriptors: list
    n_total: int
    width: int
    height: int
    channels: int = 1
    meta: dict = field(default_factory=dict)


def generate_context(summarizer, generator, reference_images, plan, rng=None):
    """Summarise references, build one prompt per descriptor, synthesise images.

    ``reference_images`` are dataset-style arrays (n x C x H x W, [0, 1]).
    Images are split as evenly as possible over the descriptors, in order.
    Returns an image-only :class:`ContextBundle`; embed it with
    :func:`embed_bundle`.
    """
    if plan.n_total < 1:
        raise UsageError("n_total must be >= 1")
    if not plan.class_descriptors:
        raise UsageError("need at least one class descriptor")
    refs = _to_uint8_hwc(reference_images)
    summary = summarize_references(summarizer, refs, plan.requirements)
    k = len(plan.class_descriptors)
    counts = [plan.n_total // k + (1 if i < plan.n_total % k else 0) for i in range(k)]
    images, prompts = [], []
    for desc, n in zip(plan.class_descriptors, counts):
        if n == 0:
            continue
        prompt = build_prompt(plan.requirements, summary, desc, plan.width, plan.height, plan.channels, n)
        batch = synthesize_images(generator, prompt, n, rng)
        images.extend(batch)
        prompts.append({"descriptor": desc, "count": n, "sha256": prompt.digest})
        log.info("generated %d context images for %r", n, desc)
    meta = dict(plan.meta)
    meta.update({"summary": summary, "prompts": prompts, "requirements": plan.requirements})
    return ContextBundle(
        images=np.stack(images),
        providers={"summarizer": summarizer.name, "generator": generator.name},
        meta=meta,
    )


def embed_bundle(bundle, embedder, batch_size=16):
    """Fill in (or replace) the embeddings of ``bundle``'s images."""
    if bundle.images is None:
        raise UsageError("bundle has no images to embed")
    emb = embed_images(embedder, list(bundle.images), batch_size)
    providers = dict(bundle.providers)
    providers["embedder"] = embedder.name
    return ContextBundle(images=bundle.images, embeddings=emb, providers=providers, meta=bundle.meta)


def embed_dataset_images(embedder, images, batch_size=16):
    """Embeddings for dataset-style images (n x C x H x W in [0, 1])."""
    return embed_images(embedder, _to_uint8_hwc(images), batch_size)
