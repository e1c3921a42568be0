"""Compiled substep loop mirroring the numpy force code in ``sim``."""
import math

import numpy as np
from numba import njit

OK, DEGENERATE, NONFINITE = 0, 1, 2
_DEG_NSQ = (2 * 1e-14) ** 2
_QUARTER_PI = math.pi / 4
_HALF_PI = math.pi / 2


@njit(cache=True)
def _lookup(m, theta, reparam, reparam_max):
    t = abs(theta)
    if t > _HALF_PI:
        t = _HALF_PI
    row = t / _QUARTER_PI
    r = reparam
    if r < 0.0:
        r = 0.0
    elif r > reparam_max:
        r = reparam_max
    col = r / reparam_max * 4.0
    r0 = min(int(math.floor(row)), 1)
    c0 = min(int(math.floor(col)), 3)
    tr = row - r0
    tc = col - c0
    return ((1 - tr) * (1 - tc) * m[r0, c0] + (1 - tr) * tc * m[r0, c0 + 1]
            + tr * (1 - tc) * m[r0 + 1, c0] + tr * tc * m[r0 + 1, c0 + 1])


@njit(cache=True)
def _cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True)
def integrate(x, v, mass, free, damp, edges, edge_rest, ks, hinges, rest_sin,
              bend, reparam_max, faces, wind_dir, wind_coef, gravity, dt, n_steps):
    """Run ``n_steps`` semi-implicit Euler substeps in place; returns a status code."""
    n = x.shape[0]
    f = np.empty((n, 3))
    for _ in range(n_steps):
        for i in range(n):
            for k in range(3):
                f[i, k] = gravity[k] * mass[i] - damp[i] * v[i, k]
        # stretch springs
        for s in range(edges.shape[0]):
            a = edges[s, 0]
            b = edges[s, 1]
            d0 = x[b, 0] - x[a, 0]
            d1 = x[b, 1] - x[a, 1]
            d2 = x[b, 2] - x[a, 2]
            length = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            c = ks * (length - edge_rest[s]) / length
            f[a, 0] += c * d0
            f[a, 1] += c * d1
            f[a, 2] += c * d2
            f[b, 0] -= c * d0
            f[b, 1] -= c * d1
            f[b, 2] -= c * d2
        # bending hinges
        for h in range(hinges.shape[0]):
            ia = hinges[h, 0]
            ib = hinges[h, 1]
            ic = hinges[h, 2]
            id_ = hinges[h, 3]
            e0 = x[ib, 0] - x[ia, 0]
            e1 = x[ib, 1] - x[ia, 1]
            e2 = x[ib, 2] - x[ia, 2]
            elen = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            n10, n11, n12 = _cross(e0, e1, e2, x[ic, 0] - x[ia, 0], x[ic, 1] - x[ia, 1],
                                   x[ic, 2] - x[ia, 2])
            n20, n21, n22 = _cross(-e0, -e1, -e2, x[id_, 0] - x[ib, 0], x[id_, 1] - x[ib, 1],
                                   x[id_, 2] - x[ib, 2])
            n1sq = n10 * n10 + n11 * n11 + n12 * n12
            n2sq = n20 * n20 + n21 * n21 + n22 * n22
            if n1sq <= _DEG_NSQ or n2sq <= _DEG_NSQ or elen <= 0.0:
                return DEGENERATE
            n1l = math.sqrt(n1sq)
            n2l = math.sqrt(n2sq)
            eh0 = e0 / elen
            eh1 = e1 / elen
            eh2 = e2 / elen
            m10, m11, m12 = n10 / n1l, n11 / n1l, n12 / n1l
            m20, m21, m22 = n20 / n2l, n21 / n2l, n22 / n2l
            c0, c1, c2 = _cross(m10, m11, m12, m20, m21, m22)
            theta = math.atan2(c0 * eh0 + c1 * eh1 + c2 * eh2,
                               m10 * m20 + m11 * m21 + m12 * m22)
            h1 = n1l / elen
            h2 = n2l / elen
            sin_half = math.sin(theta / 2)
            k_e = _lookup(bend, theta, abs(sin_half) / (h1 + h2), reparam_max)
            coef = k_e * (sin_half - rest_sin[h]) * elen / (h1 + h2)
            g10, g11, g12 = n10 / n1sq, n11 / n1sq, n12 / n1sq
            g20, g21, g22 = n20 / n2sq, n21 / n2sq, n22 / n2sq
            pc_b = ((x[ic, 0] - x[ib, 0]) * eh0 + (x[ic, 1] - x[ib, 1]) * eh1
                    + (x[ic, 2] - x[ib, 2]) * eh2)
            pd_b = ((x[id_, 0] - x[ib, 0]) * eh0 + (x[id_, 1] - x[ib, 1]) * eh1
                    + (x[id_, 2] - x[ib, 2]) * eh2)
            pc_a = ((x[ic, 0] - x[ia, 0]) * eh0 + (x[ic, 1] - x[ia, 1]) * eh1
                    + (x[ic, 2] - x[ia, 2]) * eh2)
            pd_a = ((x[id_, 0] - x[ia, 0]) * eh0 + (x[id_, 1] - x[ia, 1]) * eh1
                    + (x[id_, 2] - x[ia, 2]) * eh2)
            # force = -coef * dtheta/dx
            f[ic, 0] += coef * elen * g10
            f[ic, 1] += coef * elen * g11
            f[ic, 2] += coef * elen * g12
            f[id_, 0] += coef * elen * g20
            f[id_, 1] += coef * elen * g21
            f[id_, 2] += coef * elen * g22
            f[ia, 0] += coef * (pc_b * g10 + pd_b * g20)
            f[ia, 1] += coef * (pc_b * g11 + pd_b * g21)
            f[ia, 2] += coef * (pc_b * g12 + pd_b * g22)
            f[ib, 0] -= coef * (pc_a * g10 + pd_a * g20)
            f[ib, 1] -= coef * (pc_a * g11 + pd_a * g21)
            f[ib, 2] -= coef * (pc_a * g12 + pd_a * g22)
        # wind, a third of each face's force per vertex
        if wind_coef != 0.0:
            for t in range(faces.shape[0]):
                p = faces[t, 0]
                q = faces[t, 1]
                r = faces[t, 2]
                nn0, nn1, nn2 = _cross(x[q, 0] - x[p, 0], x[q, 1] - x[p, 1], x[q, 2] - x[p, 2],
                                       x[r, 0] - x[p, 0], x[r, 1] - x[p, 1], x[r, 2] - x[p, 2])
                proj = wind_coef * abs(nn0 * wind_dir[0] + nn1 * wind_dir[1] + nn2 * wind_dir[2])
                for k in range(3):
                    w = proj * wind_dir[k] / 3.0
                    f[p, k] += w
                    f[q, k] += w
                    f[r, k] += w
        for i in range(n):
            if free[i]:
                for k in range(3):
                    v[i, k] += dt * f[i, k] / mass[i]
                    x[i, k] += dt * v[i, k]
            else:
                v[i, 0] = 0.0
                v[i, 1] = 0.0
                v[i, 2] = 0.0
    for i in range(n):
        for k in range(3):
            if not (math.isfinite(x[i, k]) and math.isfinite(v[i, k])):
                return NONFINITE
    return OK
