import json

import pytest

from kpinstruct.errors import (
    DanglingReference,
    MalformedJson,
    MissingFile,
    SchemaViolation,
    UnknownCategory,
)
from kpinstruct.ingest import (
    filter_person_images,
    join_image_records,
    load_annotation_bundle,
    record_to_dict,
    records_to_json,
)


def test_bundle_counts(bundle):
    assert len(bundle.images) == 3
    assert len(bundle.captions) == 7
    assert len(bundle.person_annotations) == 2
    assert len(bundle.object_annotations) == 3
    assert bundle.categories == {1: "person", 2: "bicycle", 35: "skis"}


def test_images_sorted(bundle):
    assert [im.image_id for im in bundle.images] == [101, 202, 303]


def test_join_produces_one_record_per_captioned_image(records):
    assert [r.image_id for r in records] == [101, 202, 303]


def test_skier_record_contents(skier_record):
    assert skier_record.width == skier_record.height == 1000
    assert len(skier_record.captions) == 5
    assert skier_record.captions[0] == "A person in blue jacket skiing in between trees."
    assert skier_record.captions[1] == "A person trekking through the woods on skis"
    assert len(skier_record.persons) == 1
    assert [o.category_name for o in skier_record.objects] == ["skis"]


def test_person_category_objects_skipped(records):
    # instance 7003 is a person box; people come from the keypoint file
    assert [o.category_name for o in records[1].objects] == ["bicycle"]


def test_empty_image_record(records):
    beach = records[2]
    assert beach.persons == ()
    assert beach.objects == ()
    assert beach.captions == ("An empty beach at sunset.",)


def test_filter_person_images(records):
    assert [r.image_id for r in filter_person_images(records, 5)] == [101]
    assert [r.image_id for r in filter_person_images(records, 4)] == [101, 202]
    assert filter_person_images(records, 18) == []


def test_filter_default_threshold(records):
    assert [r.image_id for r in filter_person_images(records)] == [101]


def _write_trio(tmp_path, captions, keypoints, instances):
    paths = {}
    for name, doc in (
        ("captions", captions),
        ("keypoints", keypoints),
        ("instances", instances),
    ):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(doc))
        paths[name] = path
    return paths


_IMAGES = [{"id": 1, "file_name": "a.jpg", "width": 100, "height": 100}]
_MINIMAL_INSTANCES = {"images": _IMAGES, "annotations": [], "categories": [{"id": 1, "name": "person"}]}
_MINIMAL_KEYPOINTS = {"images": _IMAGES, "annotations": []}


class TestLoadErrors:
    def test_missing_file(self, tmp_path, annotation_paths):
        with pytest.raises(MissingFile):
            load_annotation_bundle(tmp_path / "nope.json", *annotation_paths[1:])

    def test_malformed_json(self, tmp_path, annotation_paths):
        bad = tmp_path / "bad.json"
        bad.write_text('{"images": [')
        with pytest.raises(MalformedJson) as err:
            load_annotation_bundle(bad, *annotation_paths[1:])
        assert err.value.offset >= 0

    def test_dangling_caption_reference(self, tmp_path):
        captions = {
            "images": _IMAGES,
            "annotations": [{"id": 10, "image_id": 999, "caption": "ghost"}],
        }
        paths = _write_trio(tmp_path, captions, _MINIMAL_KEYPOINTS, _MINIMAL_INSTANCES)
        with pytest.raises(DanglingReference) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.image_id == 999

    def test_missing_width(self, tmp_path):
        captions = {
            "images": [{"id": 1, "file_name": "a.jpg", "height": 100}],
            "annotations": [],
        }
        paths = _write_trio(tmp_path, captions, _MINIMAL_KEYPOINTS, _MINIMAL_INSTANCES)
        with pytest.raises(SchemaViolation) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.field == "width"

    def test_non_positive_height(self, tmp_path):
        captions = {
            "images": [{"id": 1, "file_name": "a.jpg", "width": 100, "height": 0}],
            "annotations": [],
        }
        paths = _write_trio(tmp_path, captions, _MINIMAL_KEYPOINTS, _MINIMAL_INSTANCES)
        with pytest.raises(SchemaViolation) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.field == "height"

    @pytest.mark.parametrize(
        "keypoints,detail",
        [
            ([0] * 50, "50 values"),
            ([0, 0, 5] + [0] * 48, "visibility"),
            ([0, 0, True] + [0, 0, 0] * 16, "visibility"),
        ],
    )
    def test_bad_keypoint_list(self, tmp_path, keypoints, detail):
        kp_doc = {
            "images": _IMAGES,
            "annotations": [
                {
                    "id": 20,
                    "image_id": 1,
                    "bbox": [0, 0, 10, 10],
                    "keypoints": keypoints,
                    "num_keypoints": 0,
                }
            ],
        }
        captions = {"images": _IMAGES, "annotations": []}
        paths = _write_trio(tmp_path, captions, kp_doc, _MINIMAL_INSTANCES)
        with pytest.raises(SchemaViolation) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.field == "keypoints"
        assert detail in str(err.value)

    def test_missing_num_keypoints(self, tmp_path):
        kp_doc = {
            "images": _IMAGES,
            "annotations": [
                {"id": 20, "image_id": 1, "bbox": [0, 0, 10, 10], "keypoints": [0] * 51}
            ],
        }
        captions = {"images": _IMAGES, "annotations": []}
        paths = _write_trio(tmp_path, captions, kp_doc, _MINIMAL_INSTANCES)
        with pytest.raises(SchemaViolation) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.field == "num_keypoints"

    def test_bad_bbox_shape(self, tmp_path):
        instances = {
            "images": _IMAGES,
            "annotations": [{"id": 30, "image_id": 1, "category_id": 1, "bbox": [1, 2]}],
            "categories": [{"id": 1, "name": "person"}],
        }
        captions = {"images": _IMAGES, "annotations": []}
        paths = _write_trio(tmp_path, captions, _MINIMAL_KEYPOINTS, instances)
        with pytest.raises(SchemaViolation) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.field == "bbox"

    def test_no_images_anywhere(self, tmp_path):
        empty = {"images": [], "annotations": []}
        paths = _write_trio(
            tmp_path, empty, empty, {"images": [], "annotations": [], "categories": []}
        )
        with pytest.raises(SchemaViolation) as err:
            load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
        assert err.value.field == "images"


def test_unknown_category_at_join(tmp_path):
    captions = {
        "images": _IMAGES,
        "annotations": [{"id": 10, "image_id": 1, "caption": "a scene"}],
    }
    instances = {
        "images": _IMAGES,
        "annotations": [{"id": 30, "image_id": 1, "category_id": 99, "bbox": [0, 0, 5, 5]}],
        "categories": [{"id": 1, "name": "person"}],
    }
    paths = _write_trio(tmp_path, captions, _MINIMAL_KEYPOINTS, instances)
    bundle = load_annotation_bundle(paths["captions"], paths["keypoints"], paths["instances"])
    with pytest.raises(UnknownCategory) as err:
        join_image_records(bundle)
    assert err.value.category_id == 99


def test_uncaptioned_images_dropped(tmp_path, annotation_paths):
    doc = json.loads(annotation_paths[0].read_text())
    doc["annotations"] = [a for a in doc["annotations"] if a["image_id"] != 303]
    trimmed = tmp_path / "captions.json"
    trimmed.write_text(json.dumps(doc))
    bundle = load_annotation_bundle(trimmed, *annotation_paths[1:])
    assert [r.image_id for r in join_image_records(bundle)] == [101, 202]


def test_image_table_merged_across_files(tmp_path, annotation_paths):
    # captions file with no image table still works: keypoint file has one
    doc = json.loads(annotation_paths[0].read_text())
    doc.pop("images")
    trimmed = tmp_path / "captions.json"
    trimmed.write_text(json.dumps(doc))
    bundle = load_annotation_bundle(trimmed, *annotation_paths[1:])
    assert len(bundle.images) == 3


def test_record_dict_round_trip(records):
    text = records_to_json(records)
    parsed = json.loads(text)
    assert parsed == [record_to_dict(r) for r in records]
    assert parsed[0]["image_id"] == 101
    assert len(parsed[0]["persons"][0]["keypoints"]) == 17
