"""Differentiable mesh rasterization and distance-ordered multi-object compositing.

Per object the forward pass produces Gouraud-shaded colour from a z-buffer,
and a soft coverage mask that ramps from 0 on the silhouette to 1 inside:
``tanh(kappa * d / 2) ** 2`` with ``d`` the pixel distance to the nearest
silhouette edge. Coverage is exactly zero wherever no triangle projects.

The backward pass is exact reverse mode for the colour (barycentric) and
silhouette (edge distance) paths, through compositing, shading, projection
and the object pose down to (z_S, z_T, t, omega, log s).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import (
    NEAR_PLANE, Camera, InvalidArgument, ObjectNode, Pose, so3_exp, so3_right_jacobian,
)
from .prior import Generator, LatentPair, TexturedMesh


@dataclass(frozen=True)
class RenderSettings:
    sharpness: float = 40.0  # per half patch width
    light_dir: tuple = (0.3, -1.0, 0.5)  # towards the light, camera frame
    ambient: float = 0.4
    patch: tuple = (128, 96)  # width, height

    @property
    def kappa(self) -> float:
        """Silhouette ramp rate in 1/px."""
        return self.sharpness / (self.patch[0] / 2.0)

    def with_sharpness(self, sharpness: float) -> "RenderSettings":
        return RenderSettings(sharpness, self.light_dir, self.ambient, self.patch)


@dataclass
class RenderOut:
    """Full-frame per-object render; only ``window`` was rasterized."""
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    window: tuple = (0, 0, 0, 0)  # x0, y0, x1, y1 (exclusive)

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.full((height, width), np.inf), (0, 0, 0, 0))


@dataclass
class CompositeOut:
    image: np.ndarray
    per_object_gamma: list
    foreground: np.ndarray
    order: list = field(default_factory=list)  # input indices, nearest first


def full_window(cam: Camera):
    return (0, 0, cam.width, cam.height)


def patch_window(cam: Camera, center_uv, patch):
    """Patch-sized window centred on ``center_uv``, clipped to the frame."""
    pw, ph = patch
    x0 = int(np.floor(center_uv[0] - pw / 2.0 + 0.5))
    y0 = int(np.floor(center_uv[1] - ph / 2.0 + 0.5))
    return (x0, y0, x0 + pw, y0 + ph)


def _clip(window, cam: Camera):
    x0, y0, x1, y1 = window
    return max(x0, 0), max(y0, 0), min(x1, cam.width), min(y1, cam.height)


def vertex_normals(X, faces):
    """Area-weighted unit vertex normals and the raw (unnormalised) sums."""
    e1 = X[faces[:, 1]] - X[faces[:, 0]]
    e2 = X[faces[:, 2]] - X[faces[:, 0]]
    fn = np.cross(e1, e2)
    N = np.zeros_like(X)
    for k in range(3):
        np.add.at(N, faces[:, k], fn)
    length = np.linalg.norm(N, axis=1)
    return N / np.maximum(length, 1e-300)[:, None], length, e1, e2


def _normals_vjp(g_n, n, length, e1, e2, faces, nverts):
    g_N = (g_n - n * np.einsum("ij,ij->i", n, g_n)[:, None]) / np.maximum(length, 1e-300)[:, None]
    g_fn = g_N[faces[:, 0]] + g_N[faces[:, 1]] + g_N[faces[:, 2]]
    g_e1 = np.cross(e2, g_fn)
    g_e2 = np.cross(g_fn, e1)
    g_X = np.zeros((nverts, 3))
    np.add.at(g_X, faces[:, 1], g_e1)
    np.add.at(g_X, faces[:, 2], g_e2)
    np.add.at(g_X, faces[:, 0], -(g_e1 + g_e2))
    return g_X


class _ObjectPass:
    """Forward state of one object raster, kept for the backward pass."""

    def __init__(self, X, albedo, faces, edges, edge_faces, cam: Camera, settings: RenderSettings, window):
        self.cam = cam
        self.settings = settings
        self.X = X
        self.faces = faces
        self.albedo = albedo
        H, W = cam.height, cam.width
        self.out = RenderOut.empty(H, W)
        x0, y0, x1, y1 = _clip(window, cam)
        self.window = (x0, y0, x1, y1)
        self.out.window = self.window
        self.active = False
        if x1 <= x0 or y1 <= y0 or len(faces) == 0:
            return
        z = X[:, 2]
        valid_v = z > NEAR_PLANE
        if not valid_v.any():
            return
        zs = np.where(valid_v, z, 1.0)
        uv = np.empty((len(X), 2))
        uv[:, 0] = cam.fx * X[:, 0] / zs + cam.cx
        uv[:, 1] = cam.fy * X[:, 1] / zs + cam.cy
        a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
        area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        face_ok = valid_v[faces].all(axis=1)
        front = face_ok & (area2 < 0.0)
        if not front.any():
            return
        sil = front[edge_faces[:, 0]] != front[edge_faces[:, 1]]
        self.seg_a = np.ascontiguousarray(edges[sil, 0])
        self.seg_b = np.ascontiguousarray(edges[sil, 1])

        n, self.n_len, self.e1, self.e2 = vertex_normals(X, faces)
        light = np.asarray(settings.light_dir, dtype=float)
        self.light = light / np.linalg.norm(light)
        ndl = n @ self.light
        self.lit = ndl > 0.0
        amb = settings.ambient
        self.shade = amb + (1.0 - amb) * np.where(self.lit, ndl, 0.0)
        self.normals = n
        self.vcol = albedo * self.shade[:, None]
        self.uv, self.zs = uv, zs

        h, w = y1 - y0, x1 - x0
        fid, bary, zbuf, rgb = _kernels.raster_forward(
            uv, zs, self.vcol, faces, front, x0, y0, h, w)
        mask, dist, nearest = _kernels.silhouette_forward(
            fid, self.seg_a, self.seg_b, uv, x0, y0, settings.kappa)
        self.fid, self.bary, self.dist, self.nearest, self.mask_w = fid, bary, dist, nearest, mask
        self.out.rgb[y0:y1, x0:x1] = rgb
        self.out.mask[y0:y1, x0:x1] = mask
        self.out.depth[y0:y1, x0:x1] = zbuf
        self.active = True

    def backward(self, g_rgb_full, g_mask_full):
        """Return dL/dX (camera-frame vertices) and dL/dalbedo."""
        nv = len(self.X)
        if not self.active:
            return np.zeros((nv, 3)), np.zeros((nv, 3))
        x0, y0, x1, y1 = self.window
        g_rgb = np.ascontiguousarray(g_rgb_full[y0:y1, x0:x1])
        g_mask = np.ascontiguousarray(g_mask_full[y0:y1, x0:x1])
        g_uv, g_vcol = _kernels.raster_backward(
            g_rgb, g_mask, self.fid, self.bary, self.nearest, self.dist, self.mask_w,
            self.uv, self.vcol, self.faces, self.seg_a, self.seg_b, x0, y0,
            self.settings.kappa)
        cam = self.cam
        X, zs = self.X, self.zs
        g_X = np.zeros((nv, 3))
        g_X[:, 0] = g_uv[:, 0] * cam.fx / zs
        g_X[:, 1] = g_uv[:, 1] * cam.fy / zs
        g_X[:, 2] = -(g_uv[:, 0] * cam.fx * X[:, 0] + g_uv[:, 1] * cam.fy * X[:, 1]) / zs ** 2
        g_albedo = g_vcol * self.shade[:, None]
        g_shade = np.einsum("ij,ij->i", g_vcol, self.albedo)
        amb = self.settings.ambient
        g_ndl = g_shade * (1.0 - amb) * self.lit
        g_n = g_ndl[:, None] * self.light[None, :]
        g_X += _normals_vjp(g_n, self.normals, self.n_len, self.e1, self.e2, self.faces, nv)
        return g_X, g_albedo


def _pass_for_transform(mesh: TexturedMesh, transform, cam, settings, window, edges=None):
    X = mesh.vertices @ transform[:3, :3].T + transform[:3, 3]
    if edges is None:
        from .prior import _edge_adjacency
        edges = _edge_adjacency(np.asarray(mesh.faces))
    return _ObjectPass(X, mesh.albedo, np.asarray(mesh.faces), edges[0], edges[1], cam, settings, window)


def rasterize_object(mesh: TexturedMesh, transform, cam: Camera, sharpness: float | None = None,
                     settings: RenderSettings = RenderSettings(), window=None) -> RenderOut:
    """Render one mesh whose canonical coordinates map to camera space by ``transform``."""
    if sharpness is not None:
        if not sharpness > 0:
            raise InvalidArgument("sharpness must be positive")
        settings = settings.with_sharpness(sharpness)
    if len(mesh.faces) == 0:
        return RenderOut.empty(cam.height, cam.width)
    window = full_window(cam) if window is None else window
    return _pass_for_transform(mesh, np.asarray(transform, float), cam, settings, window).out


def object_distance(node: ObjectNode, cam: Camera) -> float:
    """||t_{c,p}||: distance from the camera centre to the object origin."""
    return float(np.linalg.norm(node.pose.t - cam.pose.t))


def composite_scene(renders, distances) -> CompositeOut:
    """Nearer objects occlude: gamma_p = max(M_p - sum_{q nearer} M_q, 0).

    The foreground is sum_p gamma_p, so gammas and background partition every
    pixel exactly. It equals min(sum_p M_p, 1) wherever the masks are binary.
    """
    if len(renders) != len(distances):
        raise InvalidArgument("one distance per render required")
    if not renders:
        raise InvalidArgument("nothing to composite")
    shape = renders[0].mask.shape
    for r in renders:
        if r.mask.shape != shape or r.rgb.shape[:2] != shape:
            raise InvalidArgument("render resolutions differ")
    order = sorted(range(len(renders)), key=lambda k: (distances[k], k))
    acc = np.zeros(shape)
    fg = np.zeros(shape)
    image = np.zeros(shape + (3,))
    gammas = [None] * len(renders)
    for k in order:
        g = np.maximum(renders[k].mask - acc, 0.0)
        gammas[k] = g
        image += renders[k].rgb * g[..., None]
        fg += g
        acc = acc + renders[k].mask
    return CompositeOut(image, gammas, fg, order)


def composite_vjp(renders, comp: CompositeOut, g_image, g_fg):
    """Gradients of a loss on (image, foreground) w.r.t. each render's rgb and mask."""
    order = comp.order
    g_masks = {}
    g_rgbs = {}
    running = np.zeros_like(comp.foreground)  # sum over farther objects of their active gamma grads
    for pos in range(len(order) - 1, -1, -1):
        k = order[pos]
        gamma = comp.per_object_gamma[k]
        g_rgbs[k] = gamma[..., None] * g_image
        g_gamma = np.einsum("ijc,ijc->ij", renders[k].rgb, g_image) + g_fg
        active = gamma > 0.0
        g_masks[k] = g_gamma * active - running
        running = running + g_gamma * active
    return g_rgbs, g_masks


@dataclass
class SceneObject:
    """Optimisable per-object parameters."""
    latents: LatentPair
    node: ObjectNode

    @property
    def log_scale(self) -> float:
        return float(np.log(self.node.scale))


class Tape:
    """Everything the backward pass needs for one multi-object render."""

    def __init__(self, generator, objects, cam, passes, renders, comp):
        self.generator = generator
        self.objects = objects
        self.cam = cam
        self.passes = passes
        self.renders = renders
        self.comp = comp

    def backward(self, g_image, g_fg):
        """Per-object gradient dicts with keys z_S, z_T, t, omega, log_scale."""
        g_rgbs, g_masks = composite_vjp(self.renders, self.comp, g_image, g_fg)
        Rc = self.cam.pose.R
        grads = []
        for k, (obj, ps) in enumerate(zip(self.objects, self.passes)):
            g_X, g_alb = ps.backward(g_rgbs[k], g_masks[k])
            node = obj.node
            Rp = node.pose.R
            s = node.scale
            V = ps.V
            g_W = g_X @ Rc.T
            hV = g_W @ Rp
            y = s * V
            g_omega = so3_right_jacobian(node.pose.omega).T @ np.cross(y, hV).sum(axis=0)
            grads.append({
                "z_S": self.generator.shape_vjp(s * hV),
                "z_T": self.generator.albedo_vjp(obj.latents.z_texture, ps.albedo, g_alb),
                "t": g_W.sum(axis=0),
                "omega": g_omega,
                "log_scale": float(np.sum(V * hV) * s),
            })
        return grads


def render_scene(generator: Generator, objects, cam: Camera, settings: RenderSettings = RenderSettings(),
                 windows=None):
    """Forward render; returns (CompositeOut, Tape)."""
    if not objects:
        raise InvalidArgument("at least one object required")
    Rc, tc = cam.pose.R, cam.pose.t
    edges, edge_faces = generator.edges
    passes, renders, dists = [], [], []
    for k, obj in enumerate(objects):
        generator.check(obj.latents)
        V = generator.deform_shape(obj.latents.z_shape)
        albedo = generator.shade_texture(obj.latents.z_texture)
        node = obj.node
        Rp = node.pose.R
        X = ((node.scale * V) @ Rp.T + (node.pose.t - tc)) @ Rc
        window = full_window(cam) if windows is None else windows[k]
        ps = _ObjectPass(X, albedo, generator.faces, edges, edge_faces, cam, settings, window)
        ps.V = V
        passes.append(ps)
        renders.append(ps.out)
        dists.append(object_distance(node, cam))
    comp = composite_scene(renders, dists)
    return comp, Tape(generator, objects, cam, passes, renders, comp)


render_scene_with_grads = render_scene


def object_center_uv(node: ObjectNode, cam: Camera):
    Xc = cam.pose.R.T @ (node.pose.t - cam.pose.t)
    z = max(Xc[2], NEAR_PLANE)
    return np.array([cam.fx * Xc[0] / z + cam.cx, cam.fy * Xc[1] / z + cam.cy])


def write_ppm(path, image):
    """Binary P6, 8-bit RGB, row-major from the top-left pixel."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise InvalidArgument(f"{path}: not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0
