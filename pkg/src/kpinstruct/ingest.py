"""Loading COCO-style annotation files and joining them per image.

Three JSON files feed the pipeline: captions, person keypoints, and object
instances.  They are validated on load (dangling image ids, keypoint list
length, visibility flags, positive dimensions) and then joined into one
record per captioned image with persons and objects in annotation-id order.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .context import (
    FLAT_KEYPOINT_LEN,
    ObjectInstance,
    PersonInstance,
    VALID_VISIBILITY,
    normalize_bbox,
    normalize_keypoints,
)
from .errors import (
    DanglingReference,
    MalformedJson,
    MissingFile,
    SchemaViolation,
    UnknownCategory,
)

PERSON_CATEGORY_NAME = "person"


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CaptionAnnotation:
    annotation_id: int
    image_id: int
    caption: str


@dataclass(frozen=True)
class PersonAnnotation:
    annotation_id: int
    image_id: int
    bbox: tuple[float, float, float, float]
    keypoints: tuple[float, ...]
    num_keypoints: int


@dataclass(frozen=True)
class ObjectAnnotation:
    annotation_id: int
    image_id: int
    bbox: tuple[float, float, float, float]
    category_id: int


@dataclass
class AnnotationBundle:
    images: list[ImageInfo]
    captions: list[CaptionAnnotation]
    person_annotations: list[PersonAnnotation]
    object_annotations: list[ObjectAnnotation]
    categories: dict[int, str]


@dataclass(frozen=True)
class ImageRecord:
    """Everything known about one image, ready for serialization."""

    image_id: int
    file_name: str
    width: int
    height: int
    captions: tuple[str, ...]
    persons: tuple[PersonInstance, ...]
    objects: tuple[ObjectInstance, ...]


def _read_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(str(path), exc.pos, exc.msg) from exc


def _require(obj: dict, field_name: str, where: str) -> Any:
    if field_name not in obj:
        raise SchemaViolation(field_name, f"missing from {where}")
    return obj[field_name]


def _parse_images(payload: dict, where: str, into: dict[int, ImageInfo]) -> None:
    for entry in payload.get("images", []):
        image_id = int(_require(entry, "id", f"image entry in {where}"))
        if image_id in into:
            continue
        width = _require(entry, "width", f"image {image_id} in {where}")
        height = _require(entry, "height", f"image {image_id} in {where}")
        if not isinstance(width, (int, float)) or width <= 0:
            raise SchemaViolation("width", f"image {image_id} has width {width!r}")
        if not isinstance(height, (int, float)) or height <= 0:
            raise SchemaViolation("height", f"image {image_id} has height {height!r}")
        into[image_id] = ImageInfo(
            image_id=image_id,
            file_name=str(_require(entry, "file_name", f"image {image_id} in {where}")),
            width=int(width),
            height=int(height),
        )


def _parse_bbox(entry: dict, where: str) -> tuple[float, float, float, float]:
    bbox = _require(entry, "bbox", where)
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise SchemaViolation("bbox", f"{where} must hold 4 numbers, got {bbox!r}")
    return tuple(float(v) for v in bbox)


def _validate_keypoints(raw: Any, annotation_id: int) -> tuple[float, ...]:
    if not isinstance(raw, (list, tuple)):
        raise SchemaViolation("keypoints", f"annotation {annotation_id} holds {type(raw).__name__}")
    if len(raw) != FLAT_KEYPOINT_LEN:
        raise SchemaViolation(
            "keypoints",
            f"annotation {annotation_id} has {len(raw)} values, expected {FLAT_KEYPOINT_LEN}",
        )
    for i in range(2, FLAT_KEYPOINT_LEN, 3):
        v = raw[i]
        if not isinstance(v, int) or isinstance(v, bool) or v not in VALID_VISIBILITY:
            raise SchemaViolation(
                "keypoints",
                f"annotation {annotation_id} has visibility flag {v!r} at joint {i // 3}",
            )
    return tuple(float(v) if i % 3 != 2 else int(v) for i, v in enumerate(raw))


def load_annotation_bundle(
    caption_path: str | Path,
    keypoint_path: str | Path,
    instance_path: str | Path,
) -> AnnotationBundle:
    """Read and validate the three annotation files.

    Image tables from all three files are merged (first occurrence wins).
    Every annotation must reference a known image.  Unknown extra JSON fields
    are ignored.
    """
    caption_doc = _read_json(caption_path)
    keypoint_doc = _read_json(keypoint_path)
    instance_doc = _read_json(instance_path)

    images: dict[int, ImageInfo] = {}
    _parse_images(caption_doc, str(caption_path), images)
    _parse_images(keypoint_doc, str(keypoint_path), images)
    _parse_images(instance_doc, str(instance_path), images)
    if not images:
        raise SchemaViolation("images", "no image table found in any annotation file")

    captions = []
    for entry in _require(caption_doc, "annotations", str(caption_path)):
        ann_id = int(_require(entry, "id", "caption annotation"))
        image_id = int(_require(entry, "image_id", f"caption annotation {ann_id}"))
        if image_id not in images:
            raise DanglingReference(ann_id, image_id)
        captions.append(
            CaptionAnnotation(
                annotation_id=ann_id,
                image_id=image_id,
                caption=str(_require(entry, "caption", f"caption annotation {ann_id}")),
            )
        )

    persons = []
    for entry in _require(keypoint_doc, "annotations", str(keypoint_path)):
        ann_id = int(_require(entry, "id", "keypoint annotation"))
        image_id = int(_require(entry, "image_id", f"keypoint annotation {ann_id}"))
        if image_id not in images:
            raise DanglingReference(ann_id, image_id)
        raw_keypoints = _require(entry, "keypoints", f"keypoint annotation {ann_id}")
        persons.append(
            PersonAnnotation(
                annotation_id=ann_id,
                image_id=image_id,
                bbox=_parse_bbox(entry, f"keypoint annotation {ann_id}"),
                keypoints=_validate_keypoints(raw_keypoints, ann_id),
                num_keypoints=int(
                    _require(entry, "num_keypoints", f"keypoint annotation {ann_id}")
                ),
            )
        )

    objects = []
    for entry in _require(instance_doc, "annotations", str(instance_path)):
        ann_id = int(_require(entry, "id", "instance annotation"))
        image_id = int(_require(entry, "image_id", f"instance annotation {ann_id}"))
        if image_id not in images:
            raise DanglingReference(ann_id, image_id)
        objects.append(
            ObjectAnnotation(
                annotation_id=ann_id,
                image_id=image_id,
                bbox=_parse_bbox(entry, f"instance annotation {ann_id}"),
                category_id=int(
                    _require(entry, "category_id", f"instance annotation {ann_id}")
                ),
            )
        )

    categories = {}
    for entry in _require(instance_doc, "categories", str(instance_path)):
        categories[int(_require(entry, "id", "category entry"))] = str(
            _require(entry, "name", "category entry")
        )

    return AnnotationBundle(
        images=sorted(images.values(), key=lambda im: im.image_id),
        captions=captions,
        person_annotations=persons,
        object_annotations=objects,
        categories=categories,
    )


def join_image_records(bundle: AnnotationBundle) -> list[ImageRecord]:
    """Group annotations per image, normalized and in annotation-id order.

    Images without captions are dropped: downstream prompts need caption text.
    Object instances whose category is "person" are skipped because people are
    already represented through the keypoint annotations.
    """
    caps_by_image: dict[int, list[CaptionAnnotation]] = defaultdict(list)
    for cap in bundle.captions:
        caps_by_image[cap.image_id].append(cap)
    persons_by_image: dict[int, list[PersonAnnotation]] = defaultdict(list)
    for person in bundle.person_annotations:
        persons_by_image[person.image_id].append(person)
    objects_by_image: dict[int, list[ObjectAnnotation]] = defaultdict(list)
    for obj in bundle.object_annotations:
        objects_by_image[obj.image_id].append(obj)

    records = []
    for image in bundle.images:
        caps = sorted(caps_by_image.get(image.image_id, []), key=lambda c: c.annotation_id)
        if not caps:
            continue

        persons = tuple(
            PersonInstance(
                bbox=normalize_bbox(p.bbox, image.width, image.height),
                keypoints=normalize_keypoints(p.keypoints, image.width, image.height),
            )
            for p in sorted(
                persons_by_image.get(image.image_id, []), key=lambda p: p.annotation_id
            )
        )

        objects = []
        for obj in sorted(
            objects_by_image.get(image.image_id, []), key=lambda o: o.annotation_id
        ):
            if obj.category_id not in bundle.categories:
                raise UnknownCategory(obj.category_id, obj.annotation_id)
            name = bundle.categories[obj.category_id]
            if name == PERSON_CATEGORY_NAME:
                continue
            objects.append(ObjectInstance(category_name=name, bbox_px=obj.bbox))

        records.append(
            ImageRecord(
                image_id=image.image_id,
                file_name=image.file_name,
                width=image.width,
                height=image.height,
                captions=tuple(c.caption for c in caps),
                persons=persons,
                objects=tuple(objects),
            )
        )
    return records


def filter_person_images(
    records: list[ImageRecord], min_visible_keypoints: int = 5
) -> list[ImageRecord]:
    """Keep records that contain at least one sufficiently visible person.

    A person qualifies when the count of joints at visibility 2 reaches the
    threshold; records without any person never qualify.  Input order is
    preserved.
    """
    return [
        r
        for r in records
        if any(p.visible_count() >= min_visible_keypoints for p in r.persons)
    ]


def record_to_dict(record: ImageRecord) -> dict:
    """Stable dict form of a record, used for JSON output and comparisons."""
    return {
        "image_id": record.image_id,
        "file_name": record.file_name,
        "width": record.width,
        "height": record.height,
        "captions": list(record.captions),
        "persons": [
            {
                "bbox": list(p.bbox.as_tuple()),
                "keypoints": [[kp.x, kp.y, kp.v] for kp in p.keypoints],
            }
            for p in record.persons
        ],
        "objects": [
            {"category": o.category_name, "bbox_px": list(o.bbox_px)}
            for o in record.objects
        ],
    }


def records_to_json(records: list[ImageRecord]) -> str:
    return json.dumps([record_to_dict(r) for r in records], indent=2, sort_keys=True)
