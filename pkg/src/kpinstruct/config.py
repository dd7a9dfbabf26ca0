"""CLI configuration: a single JSON file with a strict schema.

Unknown keys are rejected rather than ignored, because a typo like
"max_inflight" silently falling back to a default is the kind of bug that
only shows up as a mysterious rate-limit ban.  Command-line flags override
file values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError
from .qa import MIN_ANSWER_CHARS

DEFAULT_MODEL = "gpt-4o"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"


@dataclass
class AnnotationPaths:
    captions: str | None = None
    keypoints: str | None = None
    instances: str | None = None

    def require(self) -> tuple[str, str, str]:
        missing = [
            name
            for name, value in (
                ("captions", self.captions),
                ("keypoints", self.keypoints),
                ("instances", self.instances),
            )
            if not value
        ]
        if missing:
            raise ConfigError(
                f"annotation paths missing from config/flags: {', '.join(missing)}"
            )
        return self.captions, self.keypoints, self.instances


@dataclass
class GatewaySection:
    backend: str = "http"  # http | mock
    endpoint: str = DEFAULT_ENDPOINT
    api_key_env: str = "KPINSTRUCT_API_KEY"
    model: str = DEFAULT_MODEL
    max_in_flight: int = 4
    requests_per_minute: int = 60
    max_attempts: int = 3
    base_backoff: float = 1.0
    jitter: float = 0.1
    timeout: float = 60.0
    mock_mode: str = "canned"  # echo | canned
    mock_fixture: str | None = None
    temperature_generation: float = 0.7
    temperature_judging: float = 0.0
    max_tokens: int = 1024


@dataclass
class GenerationSection:
    counts: dict | None = None
    fractions: dict | None = None
    total: int | None = None
    min_visible_keypoints: int = 5
    caption_cap: int = 5
    context_min_visible_keypoints: int = 1
    max_seeds: int = 3
    gate_enabled: bool = True
    check_meta_references: bool = True
    retry_rejected: bool = False
    min_answer_chars: dict = field(default_factory=lambda: dict(MIN_ANSWER_CHARS))


@dataclass
class EvalSection:
    n_images: int = 30
    min_visible_keypoints: int = 5
    questions_file: str | None = None


@dataclass
class CliConfig:
    annotations: AnnotationPaths = field(default_factory=AnnotationPaths)
    seed_file: str | None = None
    cache_dir: str | None = None
    output_dir: str = "out"
    global_seed: int = 0
    gateway: GatewaySection = field(default_factory=GatewaySection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _build_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {where!r}")
    kwargs = {}
    for name, value in data.items():
        field_def = known[name]
        if field_def.default_factory is not MISSING:
            default = field_def.default_factory()
        else:
            default = field_def.default
        if is_dataclass(default):
            kwargs[name] = _build_section(type(default), value, name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> CliConfig:
    """Load a config file, or the built-in defaults when path is None."""
    if path is None:
        return CliConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc.msg} at offset {exc.pos}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config top level must be a JSON object")
    try:
        return _build_section(CliConfig, data, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def validate_config(config: CliConfig) -> None:
    gw = config.gateway
    if gw.backend not in ("http", "mock"):
        raise ConfigError(f"gateway.backend must be http or mock, got {gw.backend!r}")
    if gw.mock_mode not in ("echo", "canned"):
        raise ConfigError(f"gateway.mock_mode must be echo or canned, got {gw.mock_mode!r}")
    for name, value in (
        ("gateway.max_in_flight", gw.max_in_flight),
        ("gateway.requests_per_minute", gw.requests_per_minute),
        ("gateway.max_attempts", gw.max_attempts),
        ("gateway.max_tokens", gw.max_tokens),
    ):
        if int(value) < 1:
            raise ConfigError(f"{name} must be at least 1")
    gen = config.generation
    if gen.counts is not None and gen.fractions is not None:
        raise ConfigError("generation.counts and generation.fractions are mutually exclusive")
    if config.eval.n_images < 1:
        raise ConfigError("eval.n_images must be at least 1")


def config_digest(config: CliConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
