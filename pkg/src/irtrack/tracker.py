"""3D multi-object tracking on inverse-rendered observations.

State per track is the 11-vector [x, y, z, s, yaw, w, h, l, vx, vy, vz]
(velocities in m/frame) filtered with a constant-velocity Kalman model.
Association scores mix 3D box IoU, latent cosine similarity and a
distance-decay term; the assignment is solved with the Hungarian method.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Camera, InvalidArgument, in_frustum, wrap_angle, yaw_of
from .prior import LatentPair

log = logging.getLogger(__name__)

STATE_DIM = 11
OBS_DIM = 8  # x, y, z, s, yaw, w, h, l
YAW = 4
IDX_POS = slice(0, 3)
IDX_DIMS = slice(5, 8)
IDX_VEL = slice(8, 11)


class DegenerateCovariance(InvalidArgument):
    """Innovation covariance is singular; the P/R configuration is broken."""


@dataclass(frozen=True)
class AffinityConfig:
    w_iou: float = 0.5
    w_z: float = 0.25
    w_c: float = 0.25
    gate_distance: float = 10.0
    min_affinity: float = 0.4
    n_life: int = 3

    def __post_init__(self):
        if min(self.w_iou, self.w_z, self.w_c) < 0 or self.w_iou + self.w_z + self.w_c <= 0:
            raise InvalidArgument("affinity weights must be non-negative with a positive sum")
        if self.gate_distance <= 0:
            raise InvalidArgument("gate_distance must be positive")
        if self.n_life < 0:
            raise InvalidArgument("n_life must be non-negative")


@dataclass(frozen=True)
class KalmanConfig:
    q_pos: float = 0.01  # positions, scale, yaw, dims
    q_vel: float = 0.003
    r_pos: float = 0.25
    r_scale: float = 0.04
    r_yaw: float = float(np.deg2rad(5.0) ** 2)
    r_dims: float = 0.1
    p0_pos: float = 0.25
    p0_vel: float = 0.1
    observe_dims: bool = True  # False: dims stay at the first detection

    def A(self) -> np.ndarray:
        A = np.eye(STATE_DIM)
        A[0:3, 8:11] = np.eye(3)
        return A

    def Q(self) -> np.ndarray:
        return np.diag([self.q_pos] * 8 + [self.q_vel] * 3)

    def H(self) -> np.ndarray:
        H = np.zeros((OBS_DIM, STATE_DIM))
        H[:, :OBS_DIM] = np.eye(OBS_DIM)
        return H

    def R(self) -> np.ndarray:
        dims = self.r_dims if self.observe_dims else 1e12
        return np.diag([self.r_pos] * 3 + [self.r_scale, self.r_yaw] + [dims] * 3)

    def P0(self) -> np.ndarray:
        return np.diag([self.p0_pos] * 3 + [self.r_scale, self.r_yaw] + [self.r_dims] * 3
                       + [self.p0_vel] * 3)


@dataclass(frozen=True)
class TrackerConfig:
    affinity: AffinityConfig = AffinityConfig()
    kalman: KalmanConfig = KalmanConfig()
    min_hits: int = 4  # matches before a new track is reported
    coast_frames: int = 2  # lost frames a confirmed track keeps being reported
    coast_decay: float = 0.5  # score multiplier per lost frame

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        d = dict(d)
        aff = AffinityConfig(**d.pop("affinity", {}))
        kal = KalmanConfig(**d.pop("kalman", {}))
        return cls(affinity=aff, kalman=kal, **d)


@dataclass
class Observation:
    t: np.ndarray
    s: float
    yaw: float
    dims: np.ndarray  # (w, h, l)
    latents: LatentPair
    loss: dict = field(default_factory=dict)
    confidence: float = 1.0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.dims = np.asarray(self.dims, dtype=float).reshape(3)
        if not self.s > 0:
            raise InvalidArgument("observation scale must be positive")

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.t, [self.s, self.yaw], self.dims])

    def box(self) -> dict:
        return {"center": self.t, "dims": self.dims, "yaw": self.yaw}


@dataclass
class TrackState:
    x: np.ndarray
    P: np.ndarray
    z_ema: LatentPair
    id: int
    status: str = "tracked"
    lost_count: int = 0
    age: int = 1  # observed time steps T
    score_sum: float = 0.0
    last_score: float = 0.0
    birth_frame: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.x[IDX_POS]

    @property
    def dims(self) -> np.ndarray:
        return self.x[IDX_DIMS]

    @property
    def yaw(self) -> float:
        return float(self.x[YAW])

    @property
    def scale(self) -> float:
        return float(self.x[3])

    @property
    def score(self) -> float:
        return self.score_sum / max(self.age, 1)

    def box(self) -> dict:
        return {"center": self.center, "dims": self.dims, "yaw": self.yaw}

    def copy(self) -> "TrackState":
        return replace(self, x=self.x.copy(), P=self.P.copy(), z_ema=self.z_ema.copy())


def object_scale(dims) -> float:
    """Canonical scale from detected box dims: the largest side."""
    d = np.asarray(dims, dtype=float)
    if d.shape != (3,) or np.any(d <= 0):
        raise InvalidArgument("box dims must be three positive numbers")
    return float(d.max())


def make_observation(detection: dict, fit) -> Observation:
    """Observation from a detection box and its refined fit.

    Location, heading and scale come from the fit; box dims from the detection.
    """
    dims = np.asarray(detection["dims"], dtype=float)
    object_scale(dims)
    return Observation(
        t=fit.pose.t.copy(),
        s=float(fit.scale),
        yaw=float(wrap_angle(yaw_of(fit.pose.omega))),
        dims=dims,
        latents=fit.latents.copy(),
        loss=dict(fit.loss),
        confidence=float(detection.get("confidence", 1.0)),
    )


# ---------------------------------------------------------------------------
# Kalman filter

def _symmetrize(P):
    return 0.5 * (P + P.T)


def predict(track: TrackState, A, Q) -> TrackState:
    """x <- A x, P <- A P A^T + Q."""
    out = track.copy()
    out.x = A @ track.x
    out.x[YAW] = wrap_angle(out.x[YAW])
    out.P = _symmetrize(A @ track.P @ A.T + Q)
    return out


def kalman_update(track: TrackState, y, H, R) -> TrackState:
    """Textbook update with the yaw innovation wrapped to (-pi, pi]."""
    y = np.asarray(y, dtype=float)
    x, P = track.x, track.P
    innov = y - H @ x
    if H.shape[0] > YAW and H[YAW, YAW] == 1.0:
        innov[YAW] = wrap_angle(innov[YAW])
    S = H @ P @ H.T + R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e14:
        raise DegenerateCovariance("innovation covariance is singular")
    K = np.linalg.solve(S, H @ P).T  # P H^T S^-1 (S, P symmetric)
    out = track.copy()
    out.x = x + K @ innov
    out.x[YAW] = wrap_angle(out.x[YAW])
    out.P = _symmetrize(P - K @ H @ P)
    return out


def ema_update(z_ema: LatentPair, z_new: LatentPair, T: int) -> LatentPair:
    """z <- beta z_new + (1 - beta) z_ema, beta = 2 / (T - 1) clamped to (0, 1]."""
    if T < 1:
        raise InvalidArgument("T must be at least 1")
    beta = 1.0 if T <= 3 else 2.0 / (T - 1)
    return LatentPair(beta * z_new.z_shape + (1.0 - beta) * z_ema.z_shape,
                      beta * z_new.z_texture + (1.0 - beta) * z_ema.z_texture)


# ---------------------------------------------------------------------------
# association

def box_corners_bev(center, dims, yaw) -> np.ndarray:
    """Counter-clockwise BEV corners of a box; length lies along the heading."""
    w, _, l = dims
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=float)[:2]


def _clip_polygon(subject, clipper):
    """Sutherland-Hodgman: ``subject`` clipped by convex counter-clockwise ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        def cross_point(p, q):
            d = q - p
            denom = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
            return p + t * d

        src, out = out, []
        for j in range(len(src)):
            p, q = src[j], src[(j + 1) % len(src)]
            pin, qin = inside(p), inside(q)
            if pin:
                out.append(p)
                if not qin:
                    out.append(cross_point(p, q))
            elif qin:
                out.append(cross_point(p, q))
    return np.array(out)


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def iou3d(box_a: dict, box_b: dict) -> float:
    """Volume IoU of two yaw-rotated boxes (BEV polygon clip x vertical overlap)."""
    da = np.asarray(box_a["dims"], dtype=float)
    db = np.asarray(box_b["dims"], dtype=float)
    if np.any(da <= 0) or np.any(db <= 0):
        raise InvalidArgument("box dims must be positive")
    ca = np.asarray(box_a["center"], dtype=float)
    cb = np.asarray(box_b["center"], dtype=float)
    reach = 0.5 * (np.hypot(da[0], da[2]) + np.hypot(db[0], db[2]))
    if np.hypot(*(ca[:2] - cb[:2])) >= reach:
        return 0.0
    zlo = max(ca[2] - da[1] / 2, cb[2] - db[1] / 2)
    zhi = min(ca[2] + da[1] / 2, cb[2] + db[1] / 2)
    if zhi <= zlo:
        return 0.0
    poly = _clip_polygon(box_corners_bev(ca, da, box_a["yaw"]), box_corners_bev(cb, db, box_b["yaw"]))
    inter = polygon_area(poly) * (zhi - zlo)
    union = np.prod(da) + np.prod(db) - inter
    return float(np.clip(inter / union, 0.0, 1.0))


def cosine_similarity(a: LatentPair, b: LatentPair) -> float:
    u, v = a.vector(), b.vector()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def affinity_matrix(tracks, observations, cfg: AffinityConfig = AffinityConfig()) -> np.ndarray:
    """A[i, j] = w_iou IoU + w_z cos + w_c exp(-d / gate); -inf beyond the gate."""
    A = np.full((len(tracks), len(observations)), -np.inf)
    for i, trk in enumerate(tracks):
        for j, obs in enumerate(observations):
            d = float(np.linalg.norm(trk.center - obs.t))
            if d > cfg.gate_distance:
                continue
            A[i, j] = (cfg.w_iou * iou3d(trk.box(), obs.box())
                       + cfg.w_z * cosine_similarity(trk.z_ema, obs.latents)
                       + cfg.w_c * np.exp(-d / cfg.gate_distance))
    return A


def hungarian_assign(score, min_affinity: float = -np.inf):
    """Maximum-total-score partial matching; -inf pairs are never used.

    Returns a list of (row, col) sorted by row. Pairs scoring below
    ``min_affinity`` are dropped after the optimal assignment is found.
    """
    S = np.asarray(score, dtype=float)
    if S.ndim != 2:
        raise InvalidArgument("score must be a matrix")
    if S.size == 0:
        return []
    if np.any(np.isnan(S)) or np.any(S == np.inf):
        raise InvalidArgument("scores must be finite or -inf")
    allowed = np.isfinite(S)
    if not allowed.any():
        return []
    n, m = S.shape
    # dummy rows/cols let every row and column stay unmatched at zero score;
    # forbidden and off-diagonal dummy cells cost more than any total gain
    big = (np.abs(S[allowed]).max() + 1.0) * (n + m + 1)
    cost = np.zeros((n + m, m + n))
    cost[:n, :m] = np.where(allowed, -S, big)
    cost[:n, m:] = np.where(np.eye(n, dtype=bool), 0.0, big)
    cost[n:, :m] = np.where(np.eye(m, dtype=bool), 0.0, big)
    rows, cols = linear_sum_assignment(cost)
    out = [(int(r), int(c)) for r, c in zip(rows, cols)
           if r < n and c < m and allowed[r, c] and S[r, c] >= min_affinity]
    return sorted(out)


def brute_force_assign(score):
    """Exhaustive optimum over partial matchings (tests only; tiny sizes)."""
    S = np.asarray(score, dtype=float)
    n, m = S.shape
    best, best_pairs = 0.0, []
    cols = list(range(m))
    for k in range(0, min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for perm in itertools.permutations(cols, k):
                vals = S[list(rows), list(perm)] if k else np.zeros(0)
                if np.any(~np.isfinite(vals)):
                    continue
                v = float(vals.sum())
                if v > best + 1e-12:
                    best, best_pairs = v, list(zip(rows, perm))
    return best, sorted(best_pairs)


# ---------------------------------------------------------------------------
# lifecycle

class Tracker:
    """Sequential tracker for one sequence; ids are never reused."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig(), camera: Camera | None = None):
        self.cfg = cfg
        self.camera = camera
        self.tracks: list = []
        self.next_id = 1
        self.frame = -1
        self._hits = {}
        self._A = cfg.kalman.A()
        self._Q = cfg.kalman.Q()
        self._H = cfg.kalman.H()
        self._R = cfg.kalman.R()

    def predicted(self):
        """Tracks propagated one frame ahead (state is not modified)."""
        return [predict(t, self._A, self._Q) for t in self.tracks]

    def _new_track(self, obs: Observation) -> TrackState:
        x = np.zeros(STATE_DIM)
        x[:OBS_DIM] = obs.y
        x[YAW] = wrap_angle(x[YAW])
        trk = TrackState(x=x, P=self.cfg.kalman.P0(), z_ema=obs.latents.copy(), id=self.next_id,
                         score_sum=obs.confidence, last_score=obs.confidence,
                         birth_frame=max(self.frame, 0))
        self._hits[trk.id] = 1
        self.next_id += 1
        return trk

    def step(self, observations):
        """Advance one frame. Returns the list of emitted track records."""
        self.frame += 1
        aff = self.cfg.affinity
        preds = self.predicted()
        A = affinity_matrix(preds, observations, aff)
        pairs = hungarian_assign(A, aff.min_affinity)
        matched_t = {i for i, _ in pairs}
        matched_o = {j for _, j in pairs}
        tracks = []
        for i, j in pairs:
            trk = kalman_update(preds[i], observations[j].y, self._H, self._R)
            trk.age += 1
            trk.z_ema = ema_update(trk.z_ema, observations[j].latents, trk.age)
            trk.status = "tracked"
            trk.lost_count = 0
            trk.score_sum += float(A[i, j])
            trk.last_score = float(A[i, j])
            self._hits[trk.id] += 1
            tracks.append(trk)
        for i, trk in enumerate(preds):
            if i in matched_t:
                continue
            trk.status = "lost"
            trk.lost_count += 1
            if trk.lost_count > aff.n_life:
                continue
            if self.camera is not None and not in_frustum(self.camera, trk.center):
                continue
            tracks.append(trk)
        for j, obs in enumerate(observations):
            if j not in matched_o:
                tracks.append(self._new_track(obs))
        tracks.sort(key=lambda t: t.id)
        self.tracks = tracks
        return self.records()

    def confirmed(self, trk: TrackState) -> bool:
        # tracks born on the first frame are reported at once: no history exists yet
        return self._hits.get(trk.id, 0) >= self.cfg.min_hits or trk.birth_frame == 0

    def records(self):
        out = []
        for trk in self.tracks:
            if not self.confirmed(trk):
                continue
            if trk.status == "lost":
                if trk.lost_count > self.cfg.coast_frames:
                    continue
                score = trk.score * self.cfg.coast_decay ** trk.lost_count
            else:
                score = trk.score
            out.append(track_record(trk, score))
        return out


def track_record(trk: TrackState, score: float) -> dict:
    return {
        "id": int(trk.id),
        "center": [float(v) for v in trk.center],
        "dims": [float(v) for v in trk.dims],
        "yaw": float(trk.yaw),
        "scale": float(trk.scale),
        "z_S": [float(v) for v in trk.z_ema.z_shape],
        "z_T": [float(v) for v in trk.z_ema.z_texture],
        "status": trk.status,
        "score": float(score),
    }


def step_tracker(state: Tracker, observations):
    """Functional entry point: advances ``state`` and returns (tracks, records)."""
    records = state.step(observations)
    return state.tracks, records
