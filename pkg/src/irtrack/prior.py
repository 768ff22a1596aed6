"""Parametric latent object prior: (z_S, z_T) -> textured mesh in canonical units.

The shape branch is a fixed linear displacement basis over a rounded-box car
template; the texture branch is a sigmoid of a per-channel base color plus a
latent-weighted sum of smooth basis functions over the template surface.
Shape only reads z_S and albedo only reads z_T.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import InvalidArgument

log = logging.getLogger(__name__)

TEMPLATE_EXTENTS = np.array([1.0, 0.42, 0.36])  # length, width, height


@dataclass(frozen=True)
class PriorConfig:
    d_shape: int = 8
    d_texture: int = 12
    basis_seed: int = 20240601
    subdivision: int = 9
    shape_amplitude: float = 0.05  # max per-vertex basis operator norm
    texture_gain: float = 3.0
    n_modes: int = 4


@dataclass
class LatentPair:
    z_shape: np.ndarray
    z_texture: np.ndarray

    def __post_init__(self):
        self.z_shape = np.asarray(self.z_shape, dtype=float).reshape(-1)
        self.z_texture = np.asarray(self.z_texture, dtype=float).reshape(-1)

    @classmethod
    def zeros(cls, cfg: PriorConfig = PriorConfig()) -> "LatentPair":
        return cls(np.zeros(cfg.d_shape), np.zeros(cfg.d_texture))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.z_shape, self.z_texture])

    def copy(self) -> "LatentPair":
        return LatentPair(self.z_shape.copy(), self.z_texture.copy())

    def to_dict(self) -> dict:
        return {"z_S": self.z_shape.tolist(), "z_T": self.z_texture.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentPair":
        return cls(d["z_S"], d["z_T"])


@dataclass
class TexturedMesh:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    albedo: np.ndarray  # (N, 3) in [0, 1]

    def to_obj(self) -> str:
        """Wavefront text with per-vertex colors appended to ``v`` lines."""
        lines = ["# irtrack mesh"]
        for p, c in zip(self.vertices, self.albedo):
            lines.append("v %.6f %.6f %.6f %.4f %.4f %.4f" % (*p, *c))
        for f in self.faces:
            lines.append("f %d %d %d" % tuple(int(i) + 1 for i in f))
        return "\n".join(lines) + "\n"


def rounded_box(n: int, extents=TEMPLATE_EXTENTS, power: float = 4.0):
    """Closed, outward-oriented quad-sphere mesh of a superellipsoid box.

    Each cube face gets an n x n grid (6 n^2 + 2 unique vertices); points are
    pushed onto the unit L^power sphere and scaled to ``extents``.
    """
    g = np.linspace(-1.0, 1.0, n + 1)
    a, b = np.meshgrid(g, g, indexing="ij")
    a, b = a.ravel(), b.ravel()
    one = np.ones_like(a)
    pts, tris = [], []
    offset = 0
    for axis in range(3):
        for sign in (-1.0, 1.0):
            p = np.empty((a.size, 3))
            p[:, axis] = sign * one
            p[:, (axis + 1) % 3] = a
            p[:, (axis + 2) % 3] = b
            pts.append(p)
            for i in range(n):
                for j in range(n):
                    v00 = offset + i * (n + 1) + j
                    v10 = v00 + n + 1
                    tris.append((v00, v10, v10 + 1))
                    tris.append((v00, v10 + 1, v00 + 1))
            offset += a.size
    pts = np.concatenate(pts)
    tris = np.asarray(tris)
    key = np.round(pts * (4 * n)).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # keep vertex order deterministic: sort unique vertices by first occurrence
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    verts = pts[first[order]]
    faces = remap[inverse.reshape(-1)][tris]
    norm = np.sum(np.abs(verts) ** power, axis=1) ** (1.0 / power)
    verts = verts / norm[:, None]
    verts = verts / np.abs(verts).max(axis=0) * (np.asarray(extents) / 2.0)
    # orient outward (convex, centered at the origin)
    tri = verts[faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", nrm, tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    return verts, faces


def triangle_areas(vertices, faces) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def _shape_basis(template, d_shape, rng, n_modes, amplitude):
    n = template.shape[0]
    q = template / (TEMPLATE_EXTENTS / 2.0)
    cols = []
    for _ in range(d_shape):
        field = np.zeros((n, 3))
        for _ in range(n_modes):
            freq = rng.normal(0.0, 0.5, size=3)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.normal(0.0, 1.0, size=3) * TEMPLATE_EXTENTS
            field += np.sin(np.pi * (q @ freq) + phase)[:, None] * amp
        cols.append(field.reshape(-1))
    B, _ = np.linalg.qr(np.stack(cols, axis=1))
    B = B.reshape(n, 3, d_shape)
    block_norm = max(np.linalg.norm(B[i], 2) for i in range(n))
    return B * (amplitude / block_norm)


def _texture_basis(template, d_spatial):
    q = template / (TEMPLATE_EXTENTS / 2.0)
    x, y, z = q.T
    funcs = [
        x, y, z, x * y, x * z, y * z,
        x * x - 0.5, z * z - 0.5, np.cos(np.pi * x),
        np.sin(np.pi * x) * z, np.cos(np.pi * y), x * y * z,
    ]
    if d_spatial > len(funcs):
        raise InvalidArgument(f"at most {len(funcs) + 3} texture dimensions supported")
    return np.stack(funcs[:d_spatial], axis=1)


class Generator:
    """Frozen latent -> mesh map. Immutable after construction."""

    def __init__(self, cfg: PriorConfig = PriorConfig()):
        if cfg.d_texture < 3:
            raise InvalidArgument("texture embedding needs at least 3 dims")
        self.cfg = cfg
        self.template, self.faces = rounded_box(cfg.subdivision)
        rng = np.random.default_rng(cfg.basis_seed)
        self.shape_basis = _shape_basis(self.template, cfg.d_shape, rng, cfg.n_modes, cfg.shape_amplitude)
        self.texture_basis = _texture_basis(self.template, cfg.d_texture - 3)
        self.lipschitz = float(np.linalg.norm(self.shape_basis.reshape(-1, cfg.d_shape), 2))
        self._edges, self._edge_faces = _edge_adjacency(self.faces)
        for arr in (self.template, self.faces, self.shape_basis, self.texture_basis):
            arr.setflags(write=False)
        log.info("prior: %d vertices, %d faces, shape Lipschitz bound %.4f",
                 len(self.template), len(self.faces), self.lipschitz)

    @property
    def edges(self):
        """Unique undirected edges (E, 2) and their two adjacent faces (E, 2)."""
        return self._edges, self._edge_faces

    def check(self, lat: LatentPair):
        if lat.z_shape.shape != (self.cfg.d_shape,) or lat.z_texture.shape != (self.cfg.d_texture,):
            raise InvalidArgument(
                f"latent dims {lat.z_shape.shape[0]}/{lat.z_texture.shape[0]} do not match "
                f"configured {self.cfg.d_shape}/{self.cfg.d_texture}")

    def deform_shape(self, z_shape) -> np.ndarray:
        z = np.asarray(z_shape, dtype=float)
        return self.template + self.shape_basis @ z

    def texture_logits(self, z_texture) -> np.ndarray:
        z = np.asarray(z_texture, dtype=float)
        base = self.cfg.texture_gain * z[:3]
        spatial = self.texture_basis @ z[3:]
        return base[None, :] + spatial[:, None]

    def shade_texture(self, z_texture) -> np.ndarray:
        """Per-vertex albedo in (0, 1); evaluated on the undeformed surface."""
        return _sigmoid(self.texture_logits(z_texture))

    def albedo_vjp(self, z_texture, albedo, grad_albedo) -> np.ndarray:
        """Pull a per-vertex albedo gradient back to z_T."""
        g = grad_albedo * albedo * (1.0 - albedo)
        out = np.empty(self.cfg.d_texture)
        out[:3] = self.cfg.texture_gain * g.sum(axis=0)
        out[3:] = self.texture_basis.T @ g.sum(axis=1)
        return out

    def shape_vjp(self, grad_vertices) -> np.ndarray:
        return np.einsum("nij,ni->j", self.shape_basis, grad_vertices)

    def generate_mesh(self, lat: LatentPair) -> TexturedMesh:
        self.check(lat)
        return TexturedMesh(self.deform_shape(lat.z_shape), self.faces, self.shade_texture(lat.z_texture))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _edge_adjacency(faces):
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(len(faces)), 3)
    key = np.sort(half, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key, owner = key[order], owner[order]
    if len(key) % 2 or np.any(key[0::2] != key[1::2]):
        raise InvalidArgument("template is not a closed 2-manifold")
    return key[0::2].copy(), np.stack([owner[0::2], owner[1::2]], axis=1)


_DEFAULT = {}


def default_generator(cfg: PriorConfig = PriorConfig()) -> Generator:
    if cfg not in _DEFAULT:
        _DEFAULT[cfg] = Generator(cfg)
    return _DEFAULT[cfg]
