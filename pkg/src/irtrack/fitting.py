"""Test-time inverse rendering: loss stack, Adam and the colour-then-shape-then-pose schedule."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import Camera, InvalidArgument, ObjectNode, Pose
from .prior import Generator, LatentPair
from .renderer import (
    CompositeOut, RenderSettings, SceneObject, object_center_uv, patch_window, render_scene,
)

log = logging.getLogger(__name__)

PARAM_GROUPS = ("z_T", "z_S", "log_scale", "t", "omega")
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FitConfig:
    lam: float = 10.0
    alpha_T: float = 0.7
    alpha_S: float = 0.7
    steps_color: int = 2
    steps_shape: int = 3
    steps_pose_tail: int = 2
    lr_z_T: float = 0.2
    lr_z_S: float = 0.02
    lr_t: float = 0.25
    lr_omega: float = 0.08
    lr_log_scale: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-4  # keeps round-off gradients at an optimum from becoming full steps
    anneal: float = 1.0  # sharpness factor applied when the joint phase starts
    schedule: bool = True
    use_rgb: bool = True
    use_perceptual: bool = True
    use_embed: bool = True
    embed_mode: str = "shrink"  # or "penalty"
    shared_moment: tuple = ("z_T", "z_S", "t", "omega")  # groups whose second moment is shared across components

    def __post_init__(self):
        rates = (self.lr_z_T, self.lr_z_S, self.lr_t, self.lr_omega, self.lr_log_scale)
        if min(rates) <= 0:
            raise InvalidArgument("learning rates must be positive")
        if min(self.steps_color, self.steps_shape, self.steps_pose_tail) < 0:
            raise InvalidArgument("step counts must be non-negative")
        if self.embed_mode not in ("shrink", "penalty"):
            raise InvalidArgument(f"unknown embed_mode {self.embed_mode!r}")
        object.__setattr__(self, "shared_moment", tuple(self.shared_moment))
        bad = set(self.shared_moment) - set(PARAM_GROUPS)
        if bad:
            raise InvalidArgument(f"unknown parameter groups {sorted(bad)}")

    def lr(self, group: str) -> float:
        return getattr(self, "lr_" + group)

    @property
    def total_steps(self) -> int:
        return self.steps_color + self.steps_shape

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shared_moment"] = list(self.shared_moment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown FitConfig fields {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses

def masked_rgb_loss(observed, rendered: CompositeOut, with_grad: bool = False):
    """Squared residual on foreground pixels, divided by the soft foreground count.

    Pixels with zero foreground weight never contribute, whatever the
    observed image holds there.
    """
    I = np.asarray(observed, dtype=float)
    if I.shape != rendered.image.shape:
        raise InvalidArgument("observed and rendered resolutions differ")
    M = rendered.foreground
    count = M.sum()
    if count <= 0.0:
        return (0.0, np.zeros_like(I), np.zeros_like(M)) if with_grad else 0.0
    r = I - rendered.image
    r2 = np.einsum("ijc,ijc->ij", r, r)
    num = float(np.sum(r2 * M * M))
    value = num / count
    if not with_grad:
        return value
    g_image = -2.0 * r * (M * M / count)[..., None]
    g_fg = 2.0 * r2 * M / count - num / count ** 2
    return value, g_image, g_fg


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pool2_T(g, shape):
    out = np.zeros(shape)
    q = 0.25 * g
    h, w = g.shape[0] * 2, g.shape[1] * 2
    for di in (0, 1):
        for dj in (0, 1):
            out[di:h:2, dj:w:2] = q
    return out


def _box4(x):
    h, w = x.shape[0] // 4 * 4, x.shape[1] // 4 * 4
    if h == 0 or w == 0:
        return np.zeros((0, 0) + x.shape[2:])
    return x[:h, :w].reshape(h // 4, 4, w // 4, 4, -1).mean(axis=(1, 3))


def _box4_T(g, shape):
    out = np.zeros(shape)
    h, w = g.shape[0] * 4, g.shape[1] * 4
    out[:h, :w] = np.repeat(np.repeat(g / 16.0, 4, axis=0), 4, axis=1)
    return out


def _sobel(y):
    """3x3 Sobel responses (valid region), normalised by 1/8."""
    gx = (y[:-2, 2:] + 2 * y[1:-1, 2:] + y[2:, 2:] - y[:-2, :-2] - 2 * y[1:-1, :-2] - y[2:, :-2]) / 8.0
    gy = (y[2:, :-2] + 2 * y[2:, 1:-1] + y[2:, 2:] - y[:-2, :-2] - 2 * y[:-2, 1:-1] - y[:-2, 2:]) / 8.0
    return gx, gy


def _sobel_T(gx, gy, shape):
    out = np.zeros(shape)
    gx = gx / 8.0
    gy = gy / 8.0
    out[:-2, 2:] += gx
    out[1:-1, 2:] += 2 * gx
    out[2:, 2:] += gx
    out[:-2, :-2] -= gx
    out[1:-1, :-2] -= 2 * gx
    out[2:, :-2] -= gx
    out[2:, :-2] += gy
    out[2:, 1:-1] += 2 * gy
    out[2:, 2:] += gy
    out[:-2, :-2] -= gy
    out[:-2, 1:-1] -= 2 * gy
    out[:-2, 2:] -= gy
    return out


def perceptual_features(patch, phase: str = "joint", levels: int = 3):
    """Feature maps of an (h, w, 3) patch; every map is linear in the patch."""
    feats = []
    x = np.asarray(patch, dtype=float)
    for level in range(levels):
        if level:
            x = _pool2(x)
        feats.append(_box4(x))
        if phase == "texture":
            break
        if min(x.shape[:2]) >= 3:
            feats.extend(_sobel(x @ _LUMA))
    return feats


def _perceptual_diff(D, phase, levels=3):
    """Loss and gradient of the feature distance for a patch difference D."""
    if phase not in ("texture", "joint"):
        raise InvalidArgument(f"unknown perceptual phase {phase!r}")
    shapes = [D.shape]
    xs = [D]
    for level in range(1, 1 if phase == "texture" else levels):
        xs.append(_pool2(xs[-1]))
        shapes.append(xs[-1].shape)
    terms = []  # (value, grad wrt xs[level])
    for level, x in enumerate(xs):
        c = _box4(x)
        if c.size:
            terms.append((level, np.mean(c * c), _box4_T(2.0 * c / c.size, x.shape)))
        if phase == "joint" and min(x.shape[:2]) >= 3:
            y = x @ _LUMA
            gx, gy = _sobel(y)
            n = gx.size
            val_x, val_y = np.mean(gx * gx), np.mean(gy * gy)
            gyy = _sobel_T(2.0 * gx / n, np.zeros_like(gy), y.shape)
            terms.append((level, val_x, gyy[..., None] * _LUMA))
            gyy = _sobel_T(np.zeros_like(gx), 2.0 * gy / n, y.shape)
            terms.append((level, val_y, gyy[..., None] * _LUMA))
    if not terms:
        return 0.0, np.zeros_like(D)
    weight = 1.0 / len(terms)
    value = weight * sum(t[1] for t in terms)
    grads = [np.zeros(s) for s in shapes]
    for level, _, g in terms:
        grads[level] += weight * g
    for level in range(len(xs) - 1, 0, -1):
        grads[level - 1] += _pool2_T(grads[level], shapes[level - 1])
    return float(value), grads[0]


def perceptual_loss(observed_patch, rendered_patch, phase: str = "joint") -> float:
    """Multi-scale colour/edge feature distance (deterministic LPIPS stand-in).

    ``texture`` compares only the finest 4x4 colour means; ``joint`` averages
    colour means and luminance gradients over a 3-level pyramid.
    """
    a = np.asarray(observed_patch, dtype=float)
    b = np.asarray(rendered_patch, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgument("patch sizes differ")
    return _perceptual_diff(b - a, phase)[0]


def _crop(img, window):
    """Zero-padded crop; ``window`` may extend past the frame."""
    x0, y0, x1, y1 = window
    H, W = img.shape[:2]
    out = np.zeros((y1 - y0, x1 - x0) + img.shape[2:])
    sx0, sy0, sx1, sy1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def _uncrop_add(dst, patch, window):
    x0, y0, x1, y1 = window
    H, W = dst.shape[:2]
    sx0, sy0, sx1, sy1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
    if sx1 > sx0 and sy1 > sy0:
        dst[sy0:sy1, sx0:sx1] += patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]


def scene_perceptual_loss(observed, rendered: CompositeOut, windows, phase: str, with_grad: bool = False):
    """Mean patch loss over objects on the foreground-weighted residual.

    Both images are weighted by the rendered foreground before comparison so
    that background content outside the fitted objects never enters.
    """
    I = np.asarray(observed, dtype=float)
    M = rendered.foreground
    diff = rendered.image - I
    D = diff * M[..., None]
    per_object = []
    g_D = np.zeros_like(D)
    for window in windows:
        val, g = _perceptual_diff(_crop(D, window), phase)
        per_object.append(val)
        if with_grad:
            _uncrop_add(g_D, g, window)
    n = max(len(windows), 1)
    value = float(sum(per_object)) / n
    if not with_grad:
        return value, per_object
    g_D /= n
    g_image = g_D * M[..., None]
    g_fg = np.einsum("ijc,ijc->ij", g_D, diff)
    return value, per_object, g_image, g_fg


def combined_loss(observed, rendered: CompositeOut, cfg: FitConfig, windows, phase="joint",
                  with_grad: bool = False):
    """L_RGB + lam * L_perceptual with a per-term breakdown."""
    out = {"rgb": 0.0, "perceptual": 0.0}
    g_image = np.zeros_like(rendered.image)
    g_fg = np.zeros_like(rendered.foreground)
    if cfg.use_rgb:
        if with_grad:
            out["rgb"], gi, gf = masked_rgb_loss(observed, rendered, True)
            g_image += gi
            g_fg += gf
        else:
            out["rgb"] = masked_rgb_loss(observed, rendered)
    if cfg.use_perceptual:
        res = scene_perceptual_loss(observed, rendered, windows, phase, with_grad)
        out["perceptual"] = res[0]
        out["perceptual_per_object"] = res[1]
        if with_grad:
            g_image += cfg.lam * res[2]
            g_fg += cfg.lam * res[3]
    out["total"] = out["rgb"] + cfg.lam * out["perceptual"]
    if with_grad:
        return out, g_image, g_fg
    return out


# ---------------------------------------------------------------------------
# regularisation and optimiser

def shrink_latent(z, z_avg, alpha: float):
    """z <- alpha z + (1 - alpha) z_avg."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in (0, 1], got {alpha}")
    z = np.asarray(z, dtype=float)
    return alpha * z + (1.0 - alpha) * np.asarray(z_avg, dtype=float)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, x) -> "AdamState":
        x = np.asarray(x, dtype=float)
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(param, grad, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              shared: bool = False):
    """One bias-corrected Adam update. Returns (new_param, new_state).

    With ``shared`` the second moment is the squared gradient norm of the whole
    group, so the step keeps the gradient's direction and has length <= lr.
    """
    p = np.asarray(param, dtype=float)
    g = np.asarray(grad, dtype=float)
    if p.shape != g.shape:
        raise InvalidArgument("parameter and gradient shapes differ")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    g2 = np.full_like(g, float(np.sum(g * g))) if shared else g * g
    v = beta2 * state.v + (1.0 - beta2) * g2
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitResult:
    latents: LatentPair
    pose: Pose
    scale: float
    loss: dict
    trace: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def node(self) -> ObjectNode:
        return ObjectNode(self.pose, self.scale)


def _params_of(latents: LatentPair, node: ObjectNode) -> dict:
    return {
        "z_T": latents.z_texture.copy(),
        "z_S": latents.z_shape.copy(),
        "log_scale": np.array(np.log(node.scale)),
        "t": node.pose.t.copy(),
        "omega": node.pose.omega.copy(),
    }


def _objects_of(params) -> list:
    return [
        SceneObject(LatentPair(p["z_S"], p["z_T"]),
                    ObjectNode(Pose(p["t"], p["omega"]), float(np.exp(p["log_scale"]))))
        for p in params
    ]


def schedule_plan(cfg: FitConfig):
    """List of (active groups, perceptual phase, sharpness factor) per step."""
    plan = []
    if not cfg.schedule:
        return [(PARAM_GROUPS, "joint", 1.0)] * cfg.total_steps
    for _ in range(cfg.steps_color):
        plan.append((("z_T",), "texture", 1.0))
    for k in range(cfg.steps_shape):
        groups = ("z_S", "log_scale")
        if k >= cfg.steps_shape - cfg.steps_pose_tail:
            groups = groups + ("t", "omega")
        plan.append((groups, "joint", cfg.anneal))
    return plan


def final_sharpness(cfg: FitConfig, settings: RenderSettings) -> float:
    plan = schedule_plan(cfg)
    return settings.sharpness * (plan[-1][2] if plan else 1.0)


def _penalty(params, cfg):
    """Optional quadratic pull toward the mean embedding (zero)."""
    val = 0.0
    grads = []
    for p in params:
        g = {}
        for key, alpha in (("z_T", cfg.alpha_T), ("z_S", cfg.alpha_S)):
            mu = (1.0 - alpha) / alpha
            val += 0.5 * mu * float(p[key] @ p[key])
            g[key] = mu * p[key]
        grads.append(g)
    return val, grads


def evaluate(observed, objects_params, cam, cfg, generator, settings, windows, phase="joint",
             with_grad=False):
    comp, tape = render_scene(generator, _objects_of(objects_params), cam, settings, windows)
    penalty = cfg.use_embed and cfg.embed_mode == "penalty"
    if not with_grad:
        loss = combined_loss(observed, comp, cfg, windows, phase)
        if penalty:
            loss["embed"] = _penalty(objects_params, cfg)[0]
            loss["total"] += loss["embed"]
        return loss, comp
    loss, g_image, g_fg = combined_loss(observed, comp, cfg, windows, phase, with_grad=True)
    grads = tape.backward(g_image, g_fg)
    if penalty:
        val, pg = _penalty(objects_params, cfg)
        loss["embed"] = val
        loss["total"] += val
        for g, extra in zip(grads, pg):
            for key, v in extra.items():
                g[key] = g[key] + v
    return loss, comp, grads


def fit_frame(observed, init_objects, cam: Camera, cfg: FitConfig = FitConfig(),
              generator: Generator | None = None, settings: RenderSettings = RenderSettings(),
              windows=None):
    """Jointly refine latents and poses of all objects against one frame.

    ``init_objects`` is a list of (LatentPair, ObjectNode). Returns one
    FitResult per object, in input order.
    """
    from .prior import default_generator

    generator = generator or default_generator()
    if not init_objects:
        raise InvalidArgument("at least one object required")
    params = [_params_of(lat, node) for lat, node in init_objects]
    if windows is None:
        windows = [patch_window(cam, object_center_uv(node, cam), settings.patch) for _, node in init_objects]
    states = [{g: AdamState.like(p[g]) for g in PARAM_GROUPS} for p in params]
    flags = [[] for _ in params]
    traces = [[] for _ in params]
    z_avg_S = np.zeros(generator.cfg.d_shape)
    z_avg_T = np.zeros(generator.cfg.d_texture)

    plan = schedule_plan(cfg)
    comp = None
    for step, (groups, phase, sharp) in enumerate(plan):
        st = settings.with_sharpness(settings.sharpness * sharp)
        loss, comp, grads = evaluate(observed, params, cam, cfg, generator, st, windows, phase, with_grad=True)
        if step == 0 and float(comp.foreground.sum()) == 0.0:
            for f in flags:
                f.append("culled")
            break
        per_obj = loss.get("perceptual_per_object", [0.0] * len(params))
        for k, (p, g) in enumerate(zip(params, grads)):
            traces[k].append({"step": step + 1, "phase": phase, "rgb": loss["rgb"],
                              "perceptual": per_obj[k], "total": loss["total"]})
            if not all(np.all(np.isfinite(g[name])) for name in groups):
                flags[k].append(f"nonfinite_grad_step{step + 1}")
                continue
            for name in groups:
                p[name], states[k][name] = adam_step(
                    p[name], g[name], states[k][name], cfg.lr(name), cfg.beta1, cfg.beta2, cfg.eps,
                    name in cfg.shared_moment)
            if cfg.use_embed and cfg.embed_mode == "shrink":
                if "z_T" in groups:
                    p["z_T"] = shrink_latent(p["z_T"], z_avg_T, cfg.alpha_T)
                if "z_S" in groups:
                    p["z_S"] = shrink_latent(p["z_S"], z_avg_S, cfg.alpha_S)

    st = settings.with_sharpness(final_sharpness(cfg, settings))
    final, _ = evaluate(observed, params, cam, cfg, generator, st, windows, "joint")
    results = []
    for k, p in enumerate(params):
        per = final.get("perceptual_per_object", [0.0] * len(params))[k]
        traces[k].append({"step": len(plan) + 1, "phase": "final", "rgb": final["rgb"],
                          "perceptual": per, "total": final["total"]})
        results.append(FitResult(
            latents=LatentPair(p["z_S"], p["z_T"]),
            pose=Pose(p["t"], p["omega"]),
            scale=float(np.exp(p["log_scale"])),
            loss={"rgb": final["rgb"], "perceptual": per, "total": final["total"]},
            trace=traces[k],
            flags=flags[k],
        ))
    return results


def write_trace_csv(path, results):
    """Per-object, per-step loss trace as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["object", "step", "phase", "rgb", "perceptual", "total"])
        for k, res in enumerate(results):
            for row in res.trace:
                w.writerow([k, row["step"], row["phase"], "%.9g" % row["rgb"],
                            "%.9g" % row["perceptual"], "%.9g" % row["total"]])


def with_variant(cfg: FitConfig, variant: str) -> FitConfig:
    """FitConfig for an ablation variant name (tracker-only variants pass through)."""
    table = {
        "full": {},
        "no-L_embed": {"use_embed": False},
        "no-L_RGB": {"use_rgb": False},
        "no-L_perceptual": {"use_perceptual": False},
        "no-schedule": {"schedule": False},
        "w_z=0": {},
    }
    if variant not in table:
        raise InvalidArgument(f"unknown variant {variant!r}")
    return replace(cfg, **table[variant])
