import math
import random

import pytest

from kpinstruct.context import (
    FLAT_KEYPOINT_LEN,
    KEYPOINT_NAMES,
    ContextBlock,
    KeypointTriplet,
    NormBox,
    PersonInstance,
    SerializationPolicy,
    denormalize_coord,
    format_coord,
    normalize_bbox,
    normalize_keypoints,
    serialize_context,
)
from kpinstruct.errors import BadLength, BadVisibility, NoCaptions, NonPositiveImageDims
from kpinstruct.ingest import ImageRecord


def test_keypoint_order():
    assert len(KEYPOINT_NAMES) == 17
    assert FLAT_KEYPOINT_LEN == 51
    assert KEYPOINT_NAMES[0] == "nose"
    assert KEYPOINT_NAMES[5] == "left shoulder"
    assert KEYPOINT_NAMES[-1] == "right ankle"


class TestFormatCoord:
    @pytest.mark.parametrize(
        "value,expected",
        [
            (0.5, "0.5"),
            (0.42, "0.42"),
            (0.419, "0.419"),
            (1.0, "1"),
            (0.0, "0"),
            (0.8415, "0.842"),  # half rounds away from zero
            (0.0005, "0.001"),
            (0.0004, "0"),
            (0.9996, "1"),
            (0.1234999, "0.123"),
            (0.48, "0.48"),
        ],
    )
    def test_cases(self, value, expected):
        assert format_coord(value) == expected

    def test_grid_round_trip(self):
        # every thousandth in [0, 1] survives format -> parse exactly
        for i in range(0, 1001):
            value = i / 1000
            assert float(format_coord(value)) == pytest.approx(value, abs=1e-9)


class TestNormalizeBbox:
    def test_golden_person_box(self):
        box = normalize_bbox([419, 23, 423, 964], 1000, 1000)
        assert box.as_tuple() == (0.419, 0.023, 0.842, 0.987)

    def test_clamps_overshoot(self):
        box = normalize_bbox([-5, -5, 1010, 1010], 1000, 1000)
        assert box.as_tuple() == (0.0, 0.0, 1.0, 1.0)

    def test_rectangular_image(self):
        box = normalize_bbox([64, 48, 256, 192], 640, 480)
        assert box.as_tuple() == (0.1, 0.1, 0.5, 0.5)

    def test_zero_dims_rejected(self):
        with pytest.raises(NonPositiveImageDims):
            normalize_bbox([0, 0, 10, 10], 0, 480)
        with pytest.raises(NonPositiveImageDims):
            normalize_bbox([0, 0, 10, 10], 640, -1)

    def test_wrong_length(self):
        with pytest.raises(BadLength):
            normalize_bbox([1, 2, 3], 640, 480)

    def test_negative_extent(self):
        with pytest.raises(ValueError):
            normalize_bbox([10, 10, -5, 5], 640, 480)

    def test_corners_ordered_property(self):
        rng = random.Random(7)
        for _ in range(500):
            width = rng.randint(1, 4000)
            height = rng.randint(1, 4000)
            x = rng.uniform(-50, width + 50)
            y = rng.uniform(-50, height + 50)
            w = rng.uniform(0, width * 1.2)
            h = rng.uniform(0, height * 1.2)
            box = normalize_bbox([x, y, w, h], width, height)
            assert 0.0 <= box.x1 <= box.x2 <= 1.0
            assert 0.0 <= box.y1 <= box.y2 <= 1.0


class TestNormalizeKeypoints:
    def test_visible_scaled(self):
        flat = [100, 50, 2] + [0, 0, 0] * 16
        kps = normalize_keypoints(flat, 1000, 500)
        assert kps[0] == KeypointTriplet(0.1, 0.1, 2)
        assert all(kp == KeypointTriplet(0.0, 0.0, 0) for kp in kps[1:])

    def test_unlabeled_pixels_ignored(self):
        # v=0 means "not labeled"; any stored pixels are noise
        flat = [437, 222, 0] + [0, 0, 0] * 16
        kps = normalize_keypoints(flat, 1000, 1000)
        assert kps[0] == KeypointTriplet(0.0, 0.0, 0)

    def test_occluded_kept(self):
        flat = [340, 238, 1] + [0, 0, 0] * 16
        kps = normalize_keypoints(flat, 640, 480)
        assert kps[0].v == 1
        assert kps[0].x == pytest.approx(340 / 640)

    def test_wrong_length(self):
        with pytest.raises(BadLength):
            normalize_keypoints([0] * 50, 640, 480)

    def test_bad_visibility_flag(self):
        flat = [1, 1, 3] + [0, 0, 0] * 16
        with pytest.raises(BadVisibility):
            normalize_keypoints(flat, 640, 480)

    def test_bool_visibility_rejected(self):
        flat = [1, 1, True] + [0, 0, 0] * 16
        with pytest.raises(BadVisibility):
            normalize_keypoints(flat, 640, 480)

    def test_zero_dims_rejected(self):
        with pytest.raises(NonPositiveImageDims):
            normalize_keypoints([0, 0, 0] * 17, 0, 480)


def test_denormalize_inverts_format():
    for px in (0, 230, 419, 500, 999, 1000):
        text = format_coord(px / 1000)
        assert denormalize_coord(text, 1000) == pytest.approx(px, abs=0.5)


def test_round_trip_error_bound():
    # criterion: format -> parse error stays within 0.0005 of a dimension
    rng = random.Random(42)
    for _ in range(2000):
        width = rng.randint(1, 4000)
        px = rng.uniform(0, width)
        text = format_coord(px / width)
        back = denormalize_coord(text, width)
        assert math.isfinite(back)
        assert abs(back - px) <= 0.0005 * width + 1e-9


class TestSerializeContext:
    def test_golden_layout(self, skier_record, golden_layout):
        ctx = serialize_context(skier_record)
        assert ctx.layout_text + "\n" == golden_layout

    def test_captions_in_annotation_order(self, skier_record):
        ctx = serialize_context(skier_record)
        assert ctx.captions_text.splitlines() == list(skier_record.captions)

    def test_full_text_joins_blocks(self, skier_record):
        ctx = serialize_context(skier_record)
        assert ctx.full_text == ctx.captions_text + "\n" + ctx.layout_text

    def test_caption_cap(self, skier_record):
        ctx = serialize_context(skier_record, SerializationPolicy(caption_cap=2))
        assert ctx.captions_text.splitlines() == list(skier_record.captions[:2])

    def test_sparse_person_keeps_box_only(self, records):
        waver = records[1]  # 4 joints visible
        full = serialize_context(waver, SerializationPolicy(min_visible_keypoints=4))
        assert "keypoints:" in full.layout_text
        sparse = serialize_context(waver, SerializationPolicy(min_visible_keypoints=5))
        assert "keypoints:" not in sparse.layout_text
        assert sparse.layout_text.splitlines()[0] == "person: [0.1, 0.1, 0.5, 0.5]"

    def test_objects_after_persons(self, records):
        ctx = serialize_context(records[1])
        lines = ctx.layout_text.splitlines()
        assert lines[0].startswith("person:")
        assert lines[1].startswith("bicycle: [")

    def test_no_captions_rejected(self, skier_record):
        bare = ImageRecord(
            image_id=1,
            file_name="x.jpg",
            width=100,
            height=100,
            captions=(),
            persons=skier_record.persons,
            objects=(),
        )
        with pytest.raises(NoCaptions):
            serialize_context(bare)


def test_context_block_is_plain_data():
    block = ContextBlock(image_id=7, captions_text="a", layout_text="b")
    assert block.full_text == "a\nb"


def test_visible_count(records):
    skier, waver = records[0].persons[0], records[1].persons[0]
    assert skier.visible_count() == 17
    assert waver.visible_count() == 4


def test_normbox_tuple_round_trip():
    box = NormBox(0.1, 0.2, 0.3, 0.4)
    assert NormBox(*box.as_tuple()) == box
