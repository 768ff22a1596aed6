"""Per-frame loop: fit every detection against the frame, then associate."""
from __future__ import annotations

import logging

import numpy as np

from .fitting import FitConfig, fit_frame
from .geometry import Camera, ObjectNode, Pose
from .prior import Generator, LatentPair, default_generator
from .renderer import RenderSettings, SceneObject, render_scene
from .tracker import Tracker, TrackerConfig, make_observation, object_scale

log = logging.getLogger(__name__)


def init_node(det: dict) -> ObjectNode:
    """Detection box -> initial object pose; s = max(w, h, l)."""
    return ObjectNode(Pose(det["center"], [0.0, 0.0, float(det["yaw"])]), object_scale(det["dims"]))


def fit_detections(image, dets, cam: Camera, fit_cfg: FitConfig, generator: Generator,
                   settings: RenderSettings):
    """Joint fit of all detections in one frame, starting from the mean latents."""
    if not dets:
        return []
    d_s, d_t = generator.cfg.d_shape, generator.cfg.d_texture
    init = [(LatentPair(np.zeros(d_s), np.zeros(d_t)), init_node(d)) for d in dets]
    return fit_frame(image, init, cam, fit_cfg, generator, settings)


def fit_sequence(frames, detections, cam: Camera, fit_cfg: FitConfig = FitConfig(),
                 generator: Generator | None = None, settings: RenderSettings = RenderSettings()):
    """Per-frame observation lists. Fits do not depend on tracker state, so
    one set of observations can be tracked under several tracker configs."""
    if len(frames) != len(detections):
        raise ValueError(f"{len(frames)} frames but {len(detections)} detection frames")
    gen = generator or default_generator()
    out = []
    for image, dets in zip(frames, detections):
        fits = fit_detections(image, dets, cam, fit_cfg, gen, settings)
        out.append([make_observation(d, f) for d, f in zip(dets, fits)])
    return out


def run_tracker(observations, cam: Camera, trk_cfg: TrackerConfig = TrackerConfig()):
    """Track precomputed observations. Returns per-frame lists of track records."""
    tracker = Tracker(trk_cfg, cam)
    return [tracker.step(obs) for obs in observations]


def track_sequence(frames, detections, cam: Camera, fit_cfg: FitConfig = FitConfig(),
                   trk_cfg: TrackerConfig = TrackerConfig(), generator: Generator | None = None,
                   settings: RenderSettings = RenderSettings(), on_frame=None):
    """Run fit + track over a sequence. Returns per-frame lists of track records.

    ``on_frame(k, fits, records)`` is called after each frame when given.
    """
    if len(frames) != len(detections):
        raise ValueError(f"{len(frames)} frames but {len(detections)} detection frames")
    gen = generator or default_generator()
    tracker = Tracker(trk_cfg, cam)
    out = []
    for k, (image, dets) in enumerate(zip(frames, detections)):
        fits = fit_detections(image, dets, cam, fit_cfg, gen, settings)
        obs = [make_observation(d, f) for d, f in zip(dets, fits)]
        records = tracker.step(obs)
        log.debug("frame %d: %d detections, %d tracks reported", k, len(dets), len(records))
        if on_frame is not None:
            on_frame(k, fits, records)
        out.append(records)
    return out


def overlay_image(image, records, cam: Camera, generator: Generator | None = None,
                  settings: RenderSettings = RenderSettings(), fade: float = 0.4):
    """Tracked objects rendered over a faded copy of the input frame."""
    gen = generator or default_generator()
    base = np.asarray(image, dtype=float) * fade + (1.0 - fade)
    objs = []
    for r in records:
        if r["center"][0] <= 0.5:
            continue
        lat = LatentPair(r["z_S"], r["z_T"])
        objs.append(SceneObject(lat, ObjectNode(Pose(r["center"], [0.0, 0.0, r["yaw"]]), r["scale"])))
    if not objs:
        return base
    comp, _ = render_scene(gen, objs, cam, settings)
    return comp.image + base * (1.0 - comp.foreground)[..., None]
