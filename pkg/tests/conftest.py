import json
from pathlib import Path

import pytest

from kpinstruct.context import KeypointTriplet, NormBox, PersonInstance
from kpinstruct.gateway import Gateway, GatewayConfig, MockBackend, RetryPolicy
from kpinstruct.ingest import ImageRecord, join_image_records, load_annotation_bundle
from kpinstruct.prompts import load_default_seeds

DATA_DIR = Path(__file__).parent / "data"
ANNOTATION_DIR = DATA_DIR / "annotations"


@pytest.fixture(scope="session")
def annotation_paths():
    return (
        ANNOTATION_DIR / "captions.json",
        ANNOTATION_DIR / "person_keypoints.json",
        ANNOTATION_DIR / "instances.json",
    )


@pytest.fixture(scope="session")
def bundle(annotation_paths):
    return load_annotation_bundle(*annotation_paths)


@pytest.fixture(scope="session")
def records(bundle):
    return join_image_records(bundle)


@pytest.fixture(scope="session")
def skier_record(records):
    return records[0]


@pytest.fixture(scope="session")
def golden_layout():
    return (DATA_DIR / "golden_layout.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def clean_corpus():
    return json.loads((DATA_DIR / "clean_responses.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def default_seeds():
    return load_default_seeds()


def make_person_record(image_id: int) -> ImageRecord:
    """Fabricate a record with one fully visible person; enough for planning."""
    joints = tuple(
        KeypointTriplet(0.3 + 0.02 * j, 0.2 + 0.03 * j, 2) for j in range(17)
    )
    return ImageRecord(
        image_id=image_id,
        file_name=f"COCO_train2014_{image_id:012d}.jpg",
        width=640,
        height=480,
        captions=(
            f"A person practices a routine in scene number {image_id}.",
            "Someone balances carefully while a friend watches.",
        ),
        persons=(PersonInstance(bbox=NormBox(0.2, 0.1, 0.8, 0.9), keypoints=joints),),
        objects=(),
    )


@pytest.fixture
def synth_records():
    def build(n: int, start: int = 1000):
        return [make_person_record(start + i) for i in range(n)]

    return build


@pytest.fixture
def make_gateway(tmp_path):
    """Gateway factory: mock backend, fast token bucket, no real sleeping."""

    def factory(backend=None, cache=False, **config_kwargs):
        backend = backend or MockBackend(default="canned")
        config_kwargs.setdefault("requests_per_minute", 100_000)
        config_kwargs.setdefault(
            "retry", RetryPolicy(max_attempts=3, base_backoff=0.0, jitter=0.0)
        )
        if cache and "cache_dir" not in config_kwargs:
            config_kwargs["cache_dir"] = tmp_path / "cache"
        return Gateway(backend, GatewayConfig(**config_kwargs), sleep=lambda s: None)

    return factory


@pytest.fixture
def write_annotations(tmp_path):
    """Write a synthetic COCO-style annotation trio with n person images."""

    def write(n: int, base: Path | None = None) -> dict:
        base = base or tmp_path / "annotations"
        base.mkdir(parents=True, exist_ok=True)
        images, cap_anns, kp_anns = [], [], []
        for i in range(n):
            image_id = 1000 + i
            images.append(
                {
                    "id": image_id,
                    "file_name": f"COCO_train2014_{image_id:012d}.jpg",
                    "width": 640,
                    "height": 480,
                }
            )
            cap_anns.append(
                {
                    "id": 20000 + i,
                    "image_id": image_id,
                    "caption": f"A person does an activity in scene number {i}.",
                }
            )
            kps = []
            for j in range(17):
                kps.extend([100 + 5 * j + i, 50 + 7 * j, 2])
            kp_anns.append(
                {
                    "id": 30000 + i,
                    "image_id": image_id,
                    "category_id": 1,
                    "bbox": [50 + i, 40, 300, 350],
                    "keypoints": kps,
                    "num_keypoints": 17,
                }
            )
        paths = {
            "captions": base / "captions.json",
            "keypoints": base / "person_keypoints.json",
            "instances": base / "instances.json",
        }
        paths["captions"].write_text(
            json.dumps({"images": images, "annotations": cap_anns})
        )
        paths["keypoints"].write_text(
            json.dumps(
                {
                    "images": images,
                    "annotations": kp_anns,
                    "categories": [{"id": 1, "name": "person"}],
                }
            )
        )
        paths["instances"].write_text(
            json.dumps(
                {
                    "images": images,
                    "annotations": [],
                    "categories": [{"id": 1, "name": "person"}],
                }
            )
        )
        return paths

    return write
