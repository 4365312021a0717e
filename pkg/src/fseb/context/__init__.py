from .bundle import ContextBundle, load_context_bundle, sample_context_batch, write_context_bundle
from .pipeline import GenerationPlan, PromptSpec, build_prompt, embed_bundle, embed_dataset_images, generate_context
from .services import ServiceEndpoint, embed_images, summarize_references, synthesize_images

__all__ = [
    "ContextBundle",
    "GenerationPlan",
    "PromptSpec",
    "ServiceEndpoint",
    "build_prompt",
    "embed_bundle",
    "embed_dataset_images",
    "embed_images",
    "generate_context",
    "load_context_bundle",
    "sample_context_batch",
    "summarize_references",
    "synthesize_images",
    "write_context_bundle",
]
