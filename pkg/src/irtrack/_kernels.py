"""Compiled rasterization kernels (forward z-buffer + soft silhouette, and their adjoints).

All image-space arrays are window-local: pixel (i, j) sits at
(u, v) = (x0 + j, y0 + i).
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def raster_forward(uv, zc, vcol, faces, front, x0, y0, h, w):
    face_id = -np.ones((h, w), dtype=np.int32)
    bary = np.zeros((h, w, 3))
    zbuf = np.full((h, w), np.inf)
    for f in range(faces.shape[0]):
        if not front[f]:
            continue
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        ax, ay = uv[a, 0], uv[a, 1]
        bx, by = uv[b, 0], uv[b, 1]
        cx, cy = uv[c, 0], uv[c, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        jmin = max(int(math.ceil(min(ax, bx, cx))) - x0, 0)
        jmax = min(int(math.floor(max(ax, bx, cx))) - x0, w - 1)
        imin = max(int(math.ceil(min(ay, by, cy))) - y0, 0)
        imax = min(int(math.floor(max(ay, by, cy))) - y0, h - 1)
        inv = 1.0 / area
        for i in range(imin, imax + 1):
            py = y0 + i
            for j in range(jmin, jmax + 1):
                px = x0 + j
                w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) * inv
                w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) * inv
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * zc[a] + w1 * zc[b] + w2 * zc[c]
                if z < zbuf[i, j]:
                    zbuf[i, j] = z
                    face_id[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2
    rgb = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            f = face_id[i, j]
            if f < 0:
                continue
            for k in range(3):
                rgb[i, j, k] = (bary[i, j, 0] * vcol[faces[f, 0], k]
                                + bary[i, j, 1] * vcol[faces[f, 1], k]
                                + bary[i, j, 2] * vcol[faces[f, 2], k])
    return face_id, bary, zbuf, rgb


@njit(cache=True)
def _segment_distance(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    rx = px - ax
    ry = py - ay
    ll = ex * ex + ey * ey
    tau = 0.0
    if ll > 0.0:
        tau = (rx * ex + ry * ey) / ll
    if tau <= 0.0:
        return math.sqrt(rx * rx + ry * ry)
    if tau >= 1.0:
        qx = px - bx
        qy = py - by
        return math.sqrt(qx * qx + qy * qy)
    return abs(ex * ry - ey * rx) / math.sqrt(ll)


@njit(cache=True)
def silhouette_forward(face_id, seg_a, seg_b, uv, x0, y0, kappa):
    """Coverage tanh(kappa d / 2)^2 inside the hard silhouette, 0 outside."""
    h, w = face_id.shape
    mask = np.zeros((h, w))
    dist = np.zeros((h, w))
    nearest = -np.ones((h, w), dtype=np.int32)
    ns = seg_a.shape[0]
    for i in range(h):
        py = y0 + i
        for j in range(w):
            if face_id[i, j] < 0:
                continue
            px = x0 + j
            best = np.inf
            arg = -1
            for s in range(ns):
                d = _segment_distance(px, py, uv[seg_a[s], 0], uv[seg_a[s], 1],
                                      uv[seg_b[s], 0], uv[seg_b[s], 1])
                if d < best:
                    best = d
                    arg = s
            if arg < 0:
                mask[i, j] = 1.0
                continue
            t = math.tanh(0.5 * kappa * best)
            mask[i, j] = t * t
            dist[i, j] = best
            nearest[i, j] = arg
    return mask, dist, nearest


@njit(cache=True)
def raster_backward(g_rgb, g_mask, face_id, bary, nearest, dist, mask,
                    uv, vcol, faces, seg_a, seg_b, x0, y0, kappa):
    """Accumulate pixel gradients onto projected vertex positions and vertex colors."""
    n = uv.shape[0]
    g_uv = np.zeros((n, 2))
    g_vcol = np.zeros((n, 3))
    h, w = face_id.shape
    for i in range(h):
        py = y0 + i
        for j in range(w):
            f = face_id[i, j]
            if f < 0:
                continue
            px = x0 + j
            # colour path through the barycentric interpolation
            gr0 = g_rgb[i, j, 0]
            gr1 = g_rgb[i, j, 1]
            gr2 = g_rgb[i, j, 2]
            if gr0 != 0.0 or gr1 != 0.0 or gr2 != 0.0:
                ia = faces[f, 0]
                ib = faces[f, 1]
                ic = faces[f, 2]
                b0 = bary[i, j, 0]
                b1 = bary[i, j, 1]
                b2 = bary[i, j, 2]
                g_vcol[ia, 0] += b0 * gr0
                g_vcol[ia, 1] += b0 * gr1
                g_vcol[ia, 2] += b0 * gr2
                g_vcol[ib, 0] += b1 * gr0
                g_vcol[ib, 1] += b1 * gr1
                g_vcol[ib, 2] += b1 * gr2
                g_vcol[ic, 0] += b2 * gr0
                g_vcol[ic, 1] += b2 * gr1
                g_vcol[ic, 2] += b2 * gr2
                gb0 = gr0 * vcol[ia, 0] + gr1 * vcol[ia, 1] + gr2 * vcol[ia, 2]
                gb1 = gr0 * vcol[ib, 0] + gr1 * vcol[ib, 1] + gr2 * vcol[ib, 2]
                gb2 = gr0 * vcol[ic, 0] + gr1 * vcol[ic, 1] + gr2 * vcol[ic, 2]
                gbar = gb0 * b0 + gb1 * b1 + gb2 * b2
                h0 = gb0 - gbar
                h1 = gb1 - gbar
                h2 = gb2 - gbar
                ax, ay = uv[ia, 0], uv[ia, 1]
                bx, by = uv[ib, 0], uv[ib, 1]
                cx, cy = uv[ic, 0], uv[ic, 1]
                inv = 1.0 / ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))
                # w0 = cross(B-P, C-P), w1 = cross(C-P, A-P), w2 = cross(A-P, B-P)
                g_uv[ia, 0] += (h1 * (-(cy - py)) + h2 * (by - py)) * inv
                g_uv[ia, 1] += (h1 * (cx - px) + h2 * (-(bx - px))) * inv
                g_uv[ib, 0] += (h0 * (cy - py) + h2 * (-(ay - py))) * inv
                g_uv[ib, 1] += (h0 * (-(cx - px)) + h2 * (ax - px)) * inv
                g_uv[ic, 0] += (h0 * (-(by - py)) + h1 * (ay - py)) * inv
                g_uv[ic, 1] += (h0 * (bx - px) + h1 * (-(ax - px))) * inv
            # silhouette path
            s = nearest[i, j]
            gm = g_mask[i, j]
            if s < 0 or gm == 0.0:
                continue
            d = dist[i, j]
            t = math.sqrt(mask[i, j])
            gd = gm * kappa * t * (1.0 - t * t)
            if gd == 0.0:
                continue
            sa = seg_a[s]
            sb = seg_b[s]
            ax, ay = uv[sa, 0], uv[sa, 1]
            bx, by = uv[sb, 0], uv[sb, 1]
            ex = bx - ax
            ey = by - ay
            rx = px - ax
            ry = py - ay
            ll = ex * ex + ey * ey
            tau = 0.0
            if ll > 0.0:
                tau = (rx * ex + ry * ey) / ll
            if d <= 0.0:
                continue
            if tau <= 0.0:
                g_uv[sa, 0] += gd * (ax - px) / d
                g_uv[sa, 1] += gd * (ay - py) / d
            elif tau >= 1.0:
                g_uv[sb, 0] += gd * (bx - px) / d
                g_uv[sb, 1] += gd * (by - py) / d
            else:
                L = math.sqrt(ll)
                cr = ex * ry - ey * rx
                sg = 1.0 if cr >= 0.0 else -1.0
                acr = abs(cr)
                # d = |cross(e, r)| / |e|, e = B - A, r = P - A
                g_uv[sb, 0] += gd * (sg * ry / L - acr * ex / (L * L * L))
                g_uv[sb, 1] += gd * (sg * (-rx) / L - acr * ey / (L * L * L))
                g_uv[sa, 0] += gd * (sg * (ey - ry) / L + acr * ex / (L * L * L))
                g_uv[sa, 1] += gd * (sg * (rx - ex) / L + acr * ey / (L * L * L))
    return g_uv, g_vcol


@njit(cache=True)
def hard_coverage(uv, faces, front, x0, y0, h, w):
    """Plain point-in-triangle coverage count (no z-test), used by tests/tools."""
    cov = np.zeros((h, w), dtype=np.bool_)
    for f in range(faces.shape[0]):
        if not front[f]:
            continue
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        ax, ay = uv[a, 0], uv[a, 1]
        bx, by = uv[b, 0], uv[b, 1]
        cx, cy = uv[c, 0], uv[c, 1]
        jmin = max(int(math.ceil(min(ax, bx, cx))) - x0, 0)
        jmax = min(int(math.floor(max(ax, bx, cx))) - x0, w - 1)
        imin = max(int(math.ceil(min(ay, by, cy))) - y0, 0)
        imax = min(int(math.floor(max(ay, by, cy))) - y0, h - 1)
        for i in range(imin, imax + 1):
            for j in range(jmin, jmax + 1):
                px = x0 + j
                py = y0 + i
                e0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
                e1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
                e2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
                if (e0 >= 0 and e1 >= 0 and e2 >= 0) or (e0 <= 0 and e1 <= 0 and e2 <= 0):
                    cov[i, j] = True
    return cov
