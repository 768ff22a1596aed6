"""Line-delimited JSON files: SceneFile, DetectionFile, TrackFile.

Every file starts with a header record ``{"kind", "schema", "config_hash", ...}``
followed by one record per frame. Validation errors carry a JSON-pointer
location of the form ``/<line>/<field>/...`` (line 0 is the header).
"""
from __future__ import annotations

import hashlib
import json

import jsonschema
import numpy as np

from .geometry import Camera
from .prior import LatentPair
from .synth import GTObject, ScenarioConfig, Scene

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer
        self.message = message


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_POSVEC3 = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3}
_NUMS = {"type": "array", "items": {"type": "number"}}

_HEADER = {
    "type": "object",
    "required": ["kind", "schema", "config_hash"],
    "properties": {
        "kind": {"enum": ["scene", "detections", "tracks"]},
        "schema": {"const": SCHEMA_VERSION},
        "config_hash": {"type": "string"},
    },
}

_SCENE_HEADER = {
    "allOf": [_HEADER],
    "required": ["camera", "config", "objects", "n_frames"],
    "properties": {
        "kind": {"const": "scene"},
        "n_frames": {"type": "integer", "minimum": 1},
        "camera": {"type": "object"},
        "config": {"type": "object"},
        "objects": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "kind", "scale", "z_S", "z_T"],
            "properties": {"id": {"type": "integer"}, "kind": {"type": "string"},
                           "scale": {"type": "number", "exclusiveMinimum": 0},
                           "z_S": _NUMS, "z_T": _NUMS},
        }},
    },
}

_SCENE_FRAME = {
    "type": "object",
    "required": ["frame", "objects"],
    "properties": {
        "frame": {"type": "integer", "minimum": 0},
        "objects": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "center", "yaw", "dims", "visible"],
            "properties": {"id": {"type": "integer"}, "center": _VEC3, "yaw": {"type": "number"},
                           "dims": _POSVEC3, "visible": {"type": "boolean"}},
        }},
    },
}

_DET_HEADER = {"allOf": [_HEADER], "properties": {"kind": {"const": "detections"}}}

_DET_FRAME = {
    "type": "object",
    "required": ["frame", "detections"],
    "properties": {
        "frame": {"type": "integer", "minimum": 0},
        "detections": {"type": "array", "items": {
            "type": "object",
            "required": ["center", "dims", "yaw"],
            "properties": {"center": _VEC3, "dims": _POSVEC3, "yaw": {"type": "number"},
                           "confidence": {"type": "number", "minimum": 0, "maximum": 1}},
        }},
    },
}

_TRACK_HEADER = {"allOf": [_HEADER], "properties": {"kind": {"const": "tracks"}}}

_TRACK_FRAME = {
    "type": "object",
    "required": ["frame", "tracks"],
    "properties": {
        "frame": {"type": "integer", "minimum": 0},
        "tracks": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "center", "dims", "yaw", "scale", "z_S", "z_T", "status", "score"],
            "properties": {"id": {"type": "integer"}, "center": _VEC3, "dims": _POSVEC3,
                           "yaw": {"type": "number"}, "scale": {"type": "number", "exclusiveMinimum": 0},
                           "z_S": _NUMS, "z_T": _NUMS, "status": {"enum": ["tracked", "lost"]},
                           "score": {"type": "number"}},
        }},
    },
}

SCHEMAS = {
    "scene": (_SCENE_HEADER, _SCENE_FRAME),
    "detections": (_DET_HEADER, _DET_FRAME),
    "tracks": (_TRACK_HEADER, _TRACK_FRAME),
}


def _pointer(line: int, path) -> str:
    parts = [str(line)] + [str(p).replace("~", "~0").replace("/", "~1") for p in path]
    return "/" + "/".join(parts)


def _validate(record, schema, line: int):
    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(schema).iter_errors(record))
    if err is not None:
        raise SchemaError(_pointer(line, err.absolute_path), err.message)


def dumps_records(header: dict, frames) -> str:
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(f, sort_keys=True) for f in frames)
    return "\n".join(lines) + "\n"


def loads_records(text: str, kind: str):
    """Parse and validate an NDJSON file of the given kind; returns (header, frames)."""
    if kind not in SCHEMAS:
        raise ValueError(f"unknown file kind {kind!r}")
    head_schema, frame_schema = SCHEMAS[kind]
    records = []
    for n, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise SchemaError(_pointer(n, []), f"invalid JSON: {exc.msg} (column {exc.colno})") from None
    if not records:
        raise SchemaError("/0", "empty file, header record missing")
    _validate(records[0], head_schema, 0)
    for n, rec in enumerate(records[1:], start=1):
        _validate(rec, frame_schema, n)
        if rec["frame"] != n - 1:
            raise SchemaError(_pointer(n, ["frame"]), f"expected frame {n - 1}, found {rec['frame']}")
    return records[0], records[1:]


def read_records(path, kind: str):
    with open(path) as fh:
        return loads_records(fh.read(), kind)


def write_text(path, text: str):
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# scene

def scene_to_text(scene: Scene) -> str:
    cfg = scene.config.to_dict()
    header = {
        "kind": "scene", "schema": SCHEMA_VERSION, "config_hash": config_hash(cfg),
        "config": cfg, "camera": scene.camera.to_dict(), "n_frames": scene.n_frames,
        "objects": [{"id": o.id, "kind": o.kind, "scale": o.scale,
                     "z_S": o.latents.z_shape.tolist(), "z_T": o.latents.z_texture.tolist()}
                    for o in scene.objects],
    }
    frames = []
    for k in range(scene.n_frames):
        frames.append({"frame": k, "objects": [
            {"id": o.id, "center": o.centers[k].tolist(), "yaw": float(o.yaws[k]),
             "dims": o.dims.tolist(), "visible": bool(scene.visible[k, j])}
            for j, o in enumerate(scene.objects)]})
    return dumps_records(header, frames)


def scene_from_text(text: str) -> Scene:
    header, frames = loads_records(text, "scene")
    if len(frames) != header["n_frames"]:
        raise SchemaError("/0/n_frames", f"header says {header['n_frames']} frames, file has {len(frames)}")
    cfg = ScenarioConfig.from_dict(header["config"])
    cam = Camera.from_dict(header["camera"])
    objects = []
    n = len(frames)
    for j, od in enumerate(header["objects"]):
        centers = np.zeros((n, 3))
        yaws = np.zeros(n)
        for k, fr in enumerate(frames):
            rec = fr["objects"][j]
            if rec["id"] != od["id"]:
                raise SchemaError(_pointer(k + 1, ["objects", j, "id"]), "object order differs from header")
            centers[k] = rec["center"]
            yaws[k] = rec["yaw"]
        objects.append(GTObject(od["id"], LatentPair(od["z_S"], od["z_T"]), float(od["scale"]),
                                od["kind"], centers, yaws))
    visible = np.array([[bool(r["visible"]) for r in fr["objects"]] for fr in frames], dtype=bool)
    visible = visible.reshape(n, len(objects))
    return Scene(cfg, cam, objects, visible)


# ---------------------------------------------------------------------------
# detections and tracks

def detections_to_text(frames, cfg_hash: str) -> str:
    header = {"kind": "detections", "schema": SCHEMA_VERSION, "config_hash": cfg_hash}
    return dumps_records(header, [{"frame": k, "detections": d} for k, d in enumerate(frames)])


def detections_from_text(text: str):
    header, frames = loads_records(text, "detections")
    return header, [fr["detections"] for fr in frames]


def tracks_to_text(frames, cfg: dict) -> str:
    header = {"kind": "tracks", "schema": SCHEMA_VERSION, "config_hash": config_hash(cfg), "config": cfg}
    return dumps_records(header, [{"frame": k, "tracks": t} for k, t in enumerate(frames)])


def tracks_from_text(text: str):
    header, frames = loads_records(text, "tracks")
    return header, [fr["tracks"] for fr in frames]
