"""Numba nearest-hit ray casting over planes, axis-aligned boxes and spheres.

The formulas mirror _trace_numpy exactly (same operations, same order) so
both backends produce bit-identical hit records.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TMIN = 1e-6


@njit(cache=True)
def trace_kernel(origin, dirs, plane_z, has_plane,
                 box_lo, box_hi, sph_c, sph_r,
                 out_t, out_id):
    h, w = out_t.shape
    n_box = box_lo.shape[0]
    n_sph = sph_c.shape[0]
    for py in range(h):
        for px in range(w):
            best_t = np.inf
            best_id = -1
            dx = dirs[py, px, 0]
            dy = dirs[py, px, 1]
            dz = dirs[py, px, 2]
            if has_plane and dz != 0.0:
                t = (plane_z - origin[2]) / dz
                if TMIN < t < best_t:
                    best_t = t
                    best_id = 0
            for b in range(n_box):
                tn = -np.inf
                tf = np.inf
                ok = True
                for ax in range(3):
                    o = origin[ax]
                    d = dirs[py, px, ax]
                    lo = box_lo[b, ax]
                    hi = box_hi[b, ax]
                    if d == 0.0:
                        if o < lo or o > hi:
                            ok = False
                            break
                    else:
                        t1 = (lo - o) / d
                        t2 = (hi - o) / d
                        if t1 > t2:
                            t1, t2 = t2, t1
                        if t1 > tn:
                            tn = t1
                        if t2 < tf:
                            tf = t2
                if ok and tn <= tf and tn > TMIN and tn < best_t:
                    best_t = tn
                    best_id = 1 + b
            for s in range(n_sph):
                ocx = origin[0] - sph_c[s, 0]
                ocy = origin[1] - sph_c[s, 1]
                ocz = origin[2] - sph_c[s, 2]
                a = dx * dx + dy * dy + dz * dz
                bq = ocx * dx + ocy * dy + ocz * dz
                cq = ocx * ocx + ocy * ocy + ocz * ocz - sph_r[s] * sph_r[s]
                disc = bq * bq - a * cq
                if disc >= 0.0:
                    t = (-bq - np.sqrt(disc)) / a
                    if TMIN < t < best_t:
                        best_t = t
                        best_id = 1 + n_box + s
            out_t[py, px] = best_t
            out_id[py, px] = best_id
