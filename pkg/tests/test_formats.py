import json

import numpy as np
import pytest

from irtrack.formats import (
    SchemaError, config_hash, detections_from_text, detections_to_text, loads_records, scene_from_text,
    scene_to_text, tracks_from_text, tracks_to_text,
)
from irtrack.synth import ScenarioConfig, corrupt_detections, sample_scene


@pytest.fixture(scope="module")
def scene():
    return sample_scene(ScenarioConfig(n_frames=4, seed=11, width=96, height=72, focal=90.0))


def test_scene_roundtrip(scene):
    text = scene_to_text(scene)
    back = scene_from_text(text)
    assert scene_to_text(back) == text
    assert back.config == scene.config
    for a, b in zip(scene.objects, back.objects):
        assert np.array_equal(a.centers, b.centers) and np.array_equal(a.latents.vector(), b.latents.vector())
    assert np.array_equal(back.visible, scene.visible)


def test_detections_roundtrip(scene):
    dets = corrupt_detections(scene)
    text = detections_to_text(dets, config_hash(scene.config.to_dict()))
    header, back = detections_from_text(text)
    assert back == json.loads(json.dumps(dets))
    assert header["kind"] == "detections"
    assert detections_to_text(back, header["config_hash"]) == text


def test_tracks_roundtrip():
    rec = {"id": 3, "center": [10.0, 1.0, 0.8], "dims": [1.8, 1.5, 4.2], "yaw": 0.1, "scale": 4.2,
           "z_S": [0.0] * 8, "z_T": [0.1] * 12, "status": "tracked", "score": 0.9}
    text = tracks_to_text([[rec], []], {"a": 1})
    header, frames = tracks_from_text(text)
    assert frames == [[rec], []] and header["config"] == {"a": 1}


def test_header_hash_is_stable():
    assert config_hash({"b": 1, "a": [1, 2]}) == config_hash({"a": [1, 2], "b": 1})


def dets_text(frames):
    return detections_to_text(frames, "x")


def test_pointer_for_bad_field():
    text = dets_text([[], [{"center": [1, 2, 3], "dims": [1, -1, 1], "yaw": 0.0}]])
    with pytest.raises(SchemaError) as err:
        detections_from_text(text)
    assert err.value.pointer == "/2/detections/0/dims/1"


def test_pointer_for_missing_field():
    lines = dets_text([[{"center": [1, 2, 3], "dims": [1, 1, 1], "yaw": 0.0}]]).splitlines()
    rec = json.loads(lines[1])
    del rec["detections"][0]["yaw"]
    lines[1] = json.dumps(rec)
    with pytest.raises(SchemaError) as err:
        loads_records("\n".join(lines), "detections")
    assert err.value.pointer == "/1/detections/0" and "yaw" in err.value.message


def test_invalid_json_and_bad_header():
    with pytest.raises(SchemaError) as err:
        loads_records('{"kind": "detections", "schema": 1, "config_hash": "x"}\n{oops\n', "detections")
    assert err.value.pointer == "/1"
    with pytest.raises(SchemaError) as err:
        loads_records('{"kind": "tracks", "schema": 1, "config_hash": "x"}\n', "detections")
    assert err.value.pointer == "/0/kind"
    with pytest.raises(SchemaError):
        loads_records("", "scene")


def test_frame_numbering_enforced():
    text = '{"kind": "detections", "schema": 1, "config_hash": "x"}\n{"frame": 1, "detections": []}\n'
    with pytest.raises(SchemaError) as err:
        loads_records(text, "detections")
    assert err.value.pointer == "/1/frame"


def test_scene_frame_count_mismatch(scene):
    lines = scene_to_text(scene).splitlines()
    with pytest.raises(SchemaError) as err:
        scene_from_text("\n".join(lines[:-1]))
    assert err.value.pointer == "/0/n_frames"
