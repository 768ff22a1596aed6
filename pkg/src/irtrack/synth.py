"""Synthetic ground truth: latent-prior objects on trajectories, rendered frames, noisy detections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import Camera, InvalidArgument, ObjectNode, Pose, in_frustum, road_camera, wrap_angle
from .prior import TEMPLATE_EXTENTS, Generator, LatentPair, default_generator
from .renderer import RenderSettings, SceneObject, render_scene

TRAJECTORIES = ("constant-velocity", "constant-turn", "crossing-pair")


@dataclass(frozen=True)
class ScenarioConfig:
    n_objects: int = 5
    n_frames: int = 40
    width: int = 320
    height: int = 240
    focal: float = 300.0
    mount_height: float = 1.5
    trajectory: str = "constant-velocity"  # default kind for every object
    trajectories: tuple = ()  # optional per-object override
    latent_sigma_shape: float = 0.5
    latent_sigma_texture: float = 1.0
    scale_range: tuple = (3.8, 4.8)
    depth_range: tuple = (8.0, 30.0)
    speed_range: tuple = (0.1, 0.4)  # m/frame
    turn_rate: float = 0.02  # rad/frame magnitude for constant-turn
    min_separation: float = 2.5  # m, BEV centre distance kept for non-crossing kinds
    crossing_frame: int = -1  # -1: middle of the sequence
    crossing_gap: float = 2.5  # depth offset of the pair at the crossing (m)
    crossing_depth: float = 14.0
    crossing_speed: float = 0.25
    sigma_pos: float = 0.3
    sigma_yaw: float = 0.05
    sigma_dims: float = 0.05
    p_drop: float = 0.1
    fp_rate: float = 0.5
    fp_confidence: tuple = (0.2, 0.6)
    background: str = "noise"  # or "flat"
    background_level: float = 0.5
    sharpness: float = 40.0
    min_visible_fraction: float = 0.25  # less visible than this counts as occluded
    fixed_velocity: tuple = ()  # optional (vx, vy, vz) m/frame for every constant-velocity object
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_objects <= 10:
            raise InvalidArgument("n_objects must be in 1..10")
        if self.n_frames < 1:
            raise InvalidArgument("n_frames must be positive")
        if self.fixed_velocity and len(self.fixed_velocity) != 3:
            raise InvalidArgument("fixed_velocity must have three components")
        for name in ("p_drop", "min_visible_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must be a probability")
        for name in ("sigma_pos", "sigma_yaw", "sigma_dims", "fp_rate", "latent_sigma_shape",
                     "latent_sigma_texture"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be non-negative")
        kinds = self.trajectories or (self.trajectory,)
        for k in kinds:
            if k not in TRAJECTORIES:
                raise InvalidArgument(f"unknown trajectory kind {k!r}")

    def camera(self) -> Camera:
        return road_camera(self.width, self.height, self.focal, self.mount_height)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown scenario field(s): {', '.join(sorted(unknown))}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def box_dims(scale: float):
    """(w, h, l) of the template box at metric scale."""
    l, w, h = TEMPLATE_EXTENTS * scale
    return np.array([w, h, l])


@dataclass
class GTObject:
    id: int
    latents: LatentPair
    scale: float
    kind: str
    centers: np.ndarray  # (n_frames, 3)
    yaws: np.ndarray  # (n_frames,)

    @property
    def dims(self):
        return box_dims(self.scale)

    def node(self, k: int) -> ObjectNode:
        return ObjectNode(Pose(self.centers[k], [0.0, 0.0, self.yaws[k]]), self.scale)


@dataclass
class Scene:
    config: ScenarioConfig
    camera: Camera
    objects: list
    visible: np.ndarray = None  # (n_frames, n_objects) bool

    @property
    def n_frames(self) -> int:
        return self.config.n_frames

    def boxes(self, k: int):
        """Visible ground-truth boxes of frame k."""
        out = []
        for j, o in enumerate(self.objects):
            if self.visible[k, j]:
                out.append({"id": o.id, "center": o.centers[k].copy(), "dims": o.dims.copy(),
                            "yaw": float(o.yaws[k])})
        return out


def _bev_corners(center, dims, yaw):
    w, _, l = dims
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l, w], [l, -w], [-l, -w], [-l, w]]) / 2.0
    return local @ np.array([[c, s], [-s, c]]) + np.asarray(center)[:2]


def _bev_overlap(a, b) -> bool:
    """Separating-axis test for two oriented rectangles."""
    for poly in (a, b):
        for i in range(4):
            e = poly[(i + 1) % 4] - poly[i]
            n = np.array([-e[1], e[0]])
            pa, pb = a @ n, b @ n
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def _lateral_limit(cfg: ScenarioConfig, depth: float, frac: float = 0.8) -> float:
    return frac * depth * (cfg.width / 2.0) / cfg.focal


def _sample_latents(rng, cfg: ScenarioConfig, gen: Generator) -> LatentPair:
    zs = rng.normal(0.0, cfg.latent_sigma_shape, gen.cfg.d_shape)
    n = np.linalg.norm(zs)
    if n > 2.0:
        zs *= 2.0 / n
    zt = rng.normal(0.0, cfg.latent_sigma_texture, gen.cfg.d_texture)
    return LatentPair(zs, zt)


def _trajectory(kind, start, heading, speed, turn, n, velocity=None):
    centers = np.empty((n, 3))
    yaws = np.empty(n)
    p = np.array(start, dtype=float)
    if velocity is not None:
        v = np.asarray(velocity, dtype=float)
        centers[:] = p + np.arange(n)[:, None] * v
        yaws[:] = wrap_angle(np.arctan2(v[1], v[0])) if np.any(v[:2]) else wrap_angle(heading)
        return centers, yaws
    yaw = heading
    for k in range(n):
        centers[k] = p
        yaws[k] = wrap_angle(yaw)
        if kind == "constant-turn":
            yaw = yaw + turn
        p = p + speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
    return centers, yaws


def _crossing_pair(cfg: ScenarioConfig, scale_a, scale_b, rng):
    n = cfg.n_frames
    kc = cfg.crossing_frame if cfg.crossing_frame >= 0 else n // 2
    d = cfg.crossing_depth
    v = cfg.crossing_speed
    ks = np.arange(n) - kc
    out = []
    for sign, depth, scale in ((1.0, d, scale_a), (-1.0, d + cfg.crossing_gap, scale_b)):
        centers = np.zeros((n, 3))
        # both centres lie on the same viewing ray at the crossing frame
        centers[:, 0] = depth
        centers[:, 1] = sign * v * ks
        centers[:, 2] = box_dims(scale)[1] / 2.0
        yaws = np.full(n, wrap_angle(sign * np.pi / 2.0))
        out.append((centers, yaws))
    return out


def sample_scene(cfg: ScenarioConfig, generator: Generator | None = None, max_attempts: int = 1000) -> Scene:
    """Deterministic scene from ``cfg.seed``; no BEV overlap at frame 0."""
    gen = generator or default_generator()
    rng = np.random.default_rng(cfg.seed)
    cam = cfg.camera()
    kinds = list(cfg.trajectories) if cfg.trajectories else [cfg.trajectory] * cfg.n_objects
    if len(kinds) != cfg.n_objects:
        raise InvalidArgument("trajectories must list one kind per object")
    if kinds.count("crossing-pair") % 2:
        raise InvalidArgument("crossing-pair objects come in pairs")
    objects = []
    placed = []  # (corners at frame 0, centers) for overlap checks
    pending_pair = [k for k, kind in enumerate(kinds) if kind == "crossing-pair"]
    pair_tracks = {}
    for a, b in zip(pending_pair[0::2], pending_pair[1::2]):
        sa, sb = rng.uniform(*cfg.scale_range, size=2)
        (ca, ya), (cb, yb) = _crossing_pair(cfg, sa, sb, rng)
        pair_tracks[a] = (sa, ca, ya)
        pair_tracks[b] = (sb, cb, yb)
    for idx, kind in enumerate(kinds):
        lat = _sample_latents(rng, cfg, gen)
        if kind == "crossing-pair":
            scale, centers, yaws = pair_tracks[idx]
        else:
            for _ in range(max_attempts):
                scale = rng.uniform(*cfg.scale_range)
                depth = rng.uniform(*cfg.depth_range)
                lim = _lateral_limit(cfg, depth)
                lateral = rng.uniform(-lim, lim)
                heading = rng.choice([0.0, np.pi]) + rng.normal(0.0, 0.05)
                speed = rng.uniform(*cfg.speed_range)
                turn = rng.choice([-1.0, 1.0]) * cfg.turn_rate if kind == "constant-turn" else 0.0
                start = [depth, lateral, box_dims(scale)[1] / 2.0]
                vel = cfg.fixed_velocity if (cfg.fixed_velocity and kind == "constant-velocity") else None
                centers, yaws = _trajectory(kind, start, heading, speed, turn, cfg.n_frames, vel)
                corners = _bev_corners(centers[0], box_dims(scale), yaws[0])
                if not in_frustum(cam, centers[0]):
                    continue
                if any(_bev_overlap(corners, c) for c, _ in placed):
                    continue
                if any(np.min(np.linalg.norm(centers[:, :2] - other[:, :2], axis=1)) < cfg.min_separation
                       for _, other in placed):
                    continue
                break
            else:
                raise InvalidArgument(f"could not place object {idx} without overlap "
                                      f"after {max_attempts} attempts")
        placed.append((_bev_corners(centers[0], box_dims(scale), yaws[0]), centers))
        objects.append(GTObject(idx + 1, lat, float(scale), kind, centers, yaws))
    visible = np.array([[in_frustum(cam, o.centers[k]) for o in objects] for k in range(cfg.n_frames)])
    scene = Scene(cfg, cam, objects, visible)
    if len(objects) > 1 and cfg.min_visible_fraction > 0:
        for k in range(cfg.n_frames):
            frac = visible_fractions(scene, k, gen)
            scene.visible[k] &= frac >= cfg.min_visible_fraction
    return scene


def visible_fractions(scene: Scene, k: int, generator: Generator | None = None) -> np.ndarray:
    """Unoccluded share of each object's own silhouette in frame k (0 if not rendered)."""
    gen = generator or default_generator()
    idx = _rendered_indices(scene, k)
    out = np.zeros(len(scene.objects))
    if not idx:
        return out
    objs = [SceneObject(scene.objects[j].latents, scene.objects[j].node(k)) for j in idx]
    comp, tape = render_scene(gen, objs, scene.camera, RenderSettings(sharpness=scene.config.sharpness))
    for pos, j in enumerate(idx):
        area = tape.renders[pos].mask.sum()
        out[j] = comp.per_object_gamma[pos].sum() / area if area > 0 else 0.0
    return out


def _rendered_indices(scene: Scene, k: int):
    return [j for j, o in enumerate(scene.objects) if o.centers[k][0] > 0.5]


def background(cfg: ScenarioConfig) -> np.ndarray:
    H, W = cfg.height, cfg.width
    if cfg.background == "flat":
        return np.full((H, W, 3), cfg.background_level)
    rng = np.random.default_rng([cfg.seed, 7])
    coarse = rng.uniform(-1.0, 1.0, (H // 16 + 2, W // 16 + 2, 3))
    up = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)[:H, :W]
    fine = rng.uniform(-1.0, 1.0, (H, W, 3))
    return np.clip(cfg.background_level + 0.15 * up + 0.08 * fine, 0.0, 1.0)


def frame_objects(scene: Scene, k: int):
    return [SceneObject(scene.objects[j].latents, scene.objects[j].node(k))
            for j in _rendered_indices(scene, k)]


def render_frame(scene: Scene, k: int, generator: Generator | None = None, bg=None):
    """Observed image and ground-truth composite of frame k.

    Background fills only pixels that no object covers, so the composite is
    reproduced exactly wherever the foreground weight is positive.
    """
    gen = generator or default_generator()
    cfg = scene.config
    bg = background(cfg) if bg is None else bg
    objs = frame_objects(scene, k)
    settings = RenderSettings(sharpness=cfg.sharpness)
    if not objs:
        return bg.copy(), None
    comp, _ = render_scene(gen, objs, scene.camera, settings)
    image = np.where((comp.foreground > 0.0)[..., None], comp.image, bg)
    return image, comp


def render_sequence(scene: Scene, generator: Generator | None = None):
    bg = background(scene.config)
    return [render_frame(scene, k, generator, bg)[0] for k in range(scene.n_frames)]


def corrupt_detections(scene: Scene, cfg: ScenarioConfig | None = None):
    """Per-frame detection lists derived from visible ground truth plus clutter."""
    cfg = cfg or scene.config
    rng = np.random.default_rng([cfg.seed, 1])
    cam = scene.camera
    frames = []
    for k in range(scene.n_frames):
        dets = []
        for gt in scene.boxes(k):
            drop = rng.uniform() < cfg.p_drop
            dpos = rng.normal(0.0, cfg.sigma_pos, 3)
            dyaw = rng.normal(0.0, cfg.sigma_yaw)
            ddims = rng.normal(0.0, cfg.sigma_dims, 3)
            if drop:
                continue
            err = np.linalg.norm(dpos) / (3.0 * cfg.sigma_pos) if cfg.sigma_pos > 0 else 0.0
            conf = float(np.clip(1.0 - 0.5 * cfg.p_drop - 0.3 * min(err, 1.0), 0.0, 1.0))
            dets.append({
                "center": (gt["center"] + dpos).tolist(),
                "dims": np.maximum(gt["dims"] * (1.0 + ddims), 0.1).tolist(),
                "yaw": float(wrap_angle(gt["yaw"] + dyaw)),
                "confidence": conf,
            })
        for _ in range(rng.poisson(cfg.fp_rate)):
            depth = rng.uniform(*cfg.depth_range)
            lim = _lateral_limit(cfg, depth)
            scale = rng.uniform(*cfg.scale_range)
            dims = box_dims(scale)
            dets.append({
                "center": [depth, rng.uniform(-lim, lim), dims[1] / 2.0],
                "dims": dims.tolist(),
                "yaw": float(rng.uniform(-np.pi, np.pi)),
                "confidence": float(rng.uniform(*cfg.fp_confidence)),
            })
        frames.append(dets)
    return frames


def with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(cfg, seed=seed)
