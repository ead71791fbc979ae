"""Vectorized nearest-hit ray casting, one primitive at a time over all
pixels. Formula-for-formula identical to _trace_numba."""

from __future__ import annotations

import numpy as np

TMIN = 1e-6


def trace(origin, dirs, plane_z, has_plane, box_lo, box_hi, sph_c, sph_r):
    h, w = dirs.shape[:2]
    best_t = np.full((h, w), np.inf)
    best_id = np.full((h, w), -1, dtype=np.int32)

    if has_plane:
        dz = dirs[:, :, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz != 0.0, (plane_z - origin[2]) / np.where(dz != 0.0, dz, 1.0), np.inf)
        hit = (t > TMIN) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        best_id = np.where(hit, 0, best_id)

    for b in range(box_lo.shape[0]):
        tn = np.full((h, w), -np.inf)
        tf = np.full((h, w), np.inf)
        ok = np.ones((h, w), dtype=bool)
        for ax in range(3):
            o = origin[ax]
            d = dirs[:, :, ax]
            lo, hi = box_lo[b, ax], box_hi[b, ax]
            zero = d == 0.0
            if zero.any() and (o < lo or o > hi):
                ok &= ~zero
            ds = np.where(zero, 1.0, d)
            t1 = (lo - o) / ds
            t2 = (hi - o) / ds
            swap = t1 > t2
            t1s = np.where(swap, t2, t1)
            t2s = np.where(swap, t1, t2)
            t1s = np.where(zero, -np.inf, t1s)
            t2s = np.where(zero, np.inf, t2s)
            tn = np.maximum(tn, t1s)
            tf = np.minimum(tf, t2s)
        hit = ok & (tn <= tf) & (tn > TMIN) & (tn < best_t)
        best_t = np.where(hit, tn, best_t)
        best_id = np.where(hit, 1 + b, best_id)

    n_box = box_lo.shape[0]
    for s in range(sph_c.shape[0]):
        oc = origin - sph_c[s]
        a = dirs[:, :, 0] ** 2 + dirs[:, :, 1] ** 2 + dirs[:, :, 2] ** 2
        bq = oc[0] * dirs[:, :, 0] + oc[1] * dirs[:, :, 1] + oc[2] * dirs[:, :, 2]
        cq = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - sph_r[s] * sph_r[s]
        disc = bq * bq - a * cq
        safe = np.maximum(disc, 0.0)
        t = (-bq - np.sqrt(safe)) / a
        hit = (disc >= 0.0) & (t > TMIN) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        best_id = np.where(hit, 1 + n_box + s, best_id)

    return best_t, best_id
