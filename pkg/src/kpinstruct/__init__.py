"""Pose-aware visual instruction data generation and evaluation toolkit."""

from .context import (
    ContextBlock,
    SerializationPolicy,
    format_coord,
    normalize_bbox,
    normalize_keypoints,
    serialize_context,
)
from .errors import KpinstructError
from .gateway import ChatRequest, Gateway, GatewayConfig, HttpBackend, MockBackend
from .ingest import (
    ImageRecord,
    filter_person_images,
    join_image_records,
    load_annotation_bundle,
)
from .pipeline import (
    GenerationSettings,
    plan_generation,
    run_generation,
    write_dataset,
)
from .prompts import SAMPLE_TYPES, build_prompt, load_default_seeds, load_seed_examples
from .qa import QualityPolicy, parse_response, quality_gate

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "ContextBlock",
    "Gateway",
    "GatewayConfig",
    "GenerationSettings",
    "HttpBackend",
    "ImageRecord",
    "KpinstructError",
    "MockBackend",
    "QualityPolicy",
    "SAMPLE_TYPES",
    "SerializationPolicy",
    "build_prompt",
    "filter_person_images",
    "format_coord",
    "join_image_records",
    "load_annotation_bundle",
    "load_default_seeds",
    "load_seed_examples",
    "normalize_bbox",
    "normalize_keypoints",
    "parse_response",
    "plan_generation",
    "quality_gate",
    "run_generation",
    "serialize_context",
    "write_dataset",
    "__version__",
]
