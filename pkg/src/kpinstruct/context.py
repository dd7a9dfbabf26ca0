"""Unit-square normalization and symbolic serialization of image annotations.

Pixel-space boxes and keypoints are mapped into [0, 1] relative to the image,
then rendered as a compact text block:

    person: [x1, y1, x2, y2], keypoints: [x, y, v, ...]
    skis: [x1, y1, x2, y2]

Coordinates are printed with at most three decimals and no trailing zeros, so
the text stays short and stable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from typing import Iterable, Sequence, TYPE_CHECKING

from .errors import BadLength, BadVisibility, NoCaptions, NonPositiveImageDims

if TYPE_CHECKING:  # pragma: no cover
    from .ingest import ImageRecord

KEYPOINT_NAMES = (
    "nose",
    "left eye",
    "right eye",
    "left ear",
    "right ear",
    "left shoulder",
    "right shoulder",
    "left elbow",
    "right elbow",
    "left wrist",
    "right wrist",
    "left hip",
    "right hip",
    "left knee",
    "right knee",
    "left ankle",
    "right ankle",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
FLAT_KEYPOINT_LEN = NUM_KEYPOINTS * 3
VALID_VISIBILITY = (0, 1, 2)

_THREE_PLACES = Decimal("0.001")


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned box in unit-square coordinates, corners ordered."""

    x1: float
    y1: float
    x2: float
    y2: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class KeypointTriplet:
    x: float
    y: float
    v: int


@dataclass(frozen=True)
class PersonInstance:
    bbox: NormBox
    keypoints: tuple[KeypointTriplet, ...]

    def visible_count(self) -> int:
        return sum(1 for kp in self.keypoints if kp.v == 2)


@dataclass(frozen=True)
class ObjectInstance:
    category_name: str
    bbox_px: tuple[float, float, float, float]


@dataclass(frozen=True)
class ContextBlock:
    """Serialized description of one image: caption lines plus layout lines."""

    image_id: int
    captions_text: str
    layout_text: str

    @property
    def full_text(self) -> str:
        return self.captions_text + "\n" + self.layout_text


@dataclass(frozen=True)
class SerializationPolicy:
    """Knobs for context serialization.

    caption_cap bounds how many caption lines are emitted.  Persons with fewer
    than min_visible_keypoints joints at visibility 2 are serialized with the
    bounding box only, so sparsely labeled people do not inject noise.
    """

    caption_cap: int = 5
    min_visible_keypoints: int = 1


def _clamp01(value: float) -> float:
    return min(1.0, max(0.0, value))


def normalize_bbox(bbox_px: Sequence[float], width: float, height: float) -> NormBox:
    """Convert a COCO [x, y, w, h] pixel box to unit-square corners.

    Corners are clamped to [0, 1]; annotations occasionally overshoot the
    image frame by a pixel or two.
    """
    if width <= 0 or height <= 0:
        raise NonPositiveImageDims(width, height)
    if len(bbox_px) != 4:
        raise BadLength(len(bbox_px), 4)
    x, y, w, h = (float(v) for v in bbox_px)
    if w < 0 or h < 0:
        raise ValueError(f"box extents must be non-negative, got w={w}, h={h}")
    return NormBox(
        _clamp01(x / width),
        _clamp01(y / height),
        _clamp01((x + w) / width),
        _clamp01((y + h) / height),
    )


def normalize_keypoints(
    keypoints_px: Sequence[float], width: float, height: float
) -> tuple[KeypointTriplet, ...]:
    """Scale a flat 51-value keypoint list into the unit square.

    Unlabeled joints (v = 0) come back as (0, 0, 0) regardless of the stored
    pixel values, matching how they are meant to be read.
    """
    if width <= 0 or height <= 0:
        raise NonPositiveImageDims(width, height)
    if len(keypoints_px) != FLAT_KEYPOINT_LEN:
        raise BadLength(len(keypoints_px), FLAT_KEYPOINT_LEN)
    triplets = []
    for i in range(0, FLAT_KEYPOINT_LEN, 3):
        x, y, v = keypoints_px[i], keypoints_px[i + 1], keypoints_px[i + 2]
        if not isinstance(v, int) or isinstance(v, bool) or v not in VALID_VISIBILITY:
            raise BadVisibility(v)
        if v == 0:
            triplets.append(KeypointTriplet(0.0, 0.0, 0))
        else:
            triplets.append(
                KeypointTriplet(_clamp01(float(x) / width), _clamp01(float(y) / height), v)
            )
    return tuple(triplets)


def format_coord(value: float) -> str:
    """Render a unit-square coordinate as text.

    Rounds half away from zero to three decimals, then strips trailing zeros
    and a dangling decimal point: 0.5 not 0.500, 1 not 1.000, 0.42 not 0.420.
    """
    quantized = Decimal(str(value)).quantize(_THREE_PLACES, rounding=ROUND_HALF_UP)
    text = format(quantized, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text or "0"


def denormalize_coord(text: str, dimension: float) -> float:
    """Inverse of format_coord up to rounding: text back to pixel space."""
    return float(text) * dimension


def _format_box(box: NormBox) -> str:
    return ", ".join(format_coord(c) for c in box.as_tuple())


def _format_keypoints(keypoints: Iterable[KeypointTriplet]) -> str:
    parts = []
    for kp in keypoints:
        parts.extend((format_coord(kp.x), format_coord(kp.y), str(kp.v)))
    return ", ".join(parts)


def serialize_context(
    record: "ImageRecord", policy: SerializationPolicy | None = None
) -> ContextBlock:
    """Build the textual context block for one image record.

    Captions come first (up to the policy cap, in annotation order), then one
    layout line per person and per object.  Persons below the visibility
    threshold keep their box but drop the keypoints clause.
    """
    policy = policy or SerializationPolicy()
    if not record.captions:
        raise NoCaptions(record.image_id)
    captions_text = "\n".join(record.captions[: policy.caption_cap])

    lines = []
    for person in record.persons:
        box_part = f"person: [{_format_box(person.bbox)}]"
        if person.visible_count() >= policy.min_visible_keypoints:
            lines.append(f"{box_part}, keypoints: [{_format_keypoints(person.keypoints)}]")
        else:
            lines.append(box_part)
    for obj in record.objects:
        box = normalize_bbox(obj.bbox_px, record.width, record.height)
        lines.append(f"{obj.category_name}: [{_format_box(box)}]")

    return ContextBlock(
        image_id=record.image_id,
        captions_text=captions_text,
        layout_text="\n".join(lines),
    )
