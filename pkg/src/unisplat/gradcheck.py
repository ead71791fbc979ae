"""Finite-difference audits for the renderer backward pass and the loss
gradients. Used by the `gradcheck` CLI subcommand and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianSet
from .losses import loss_dyn, loss_mse, loss_scale
from .oracle import make_camera
from .renderer import render, render_backward

FD_STEP = 1e-4
REL_TOL = 1e-3
ABS_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool


def _tolerate(analytic: np.ndarray, fd: np.ndarray, name: str) -> CheckResult:
    err = np.abs(analytic - fd)
    bound = ABS_FLOOR + REL_TOL * np.abs(fd)
    ok = bool(np.all(err <= bound))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(np.abs(fd) > ABS_FLOOR, err / np.abs(fd), 0.0)
    return CheckResult(name, float(err.max(initial=0.0)),
                       float(rel.max(initial=0.0)), ok)


def random_case(seed: int, n_gaussians: int = 10, size: int = 8):
    """A small render case: gaussians spread in front of an 8x8 camera, and
    fixed random upstream gradients defining a scalar objective."""
    rng = np.random.default_rng(seed)
    cam = make_camera(0.0, width=size, height=size, hfov_deg=60.0)
    n = n_gaussians
    depth = rng.uniform(2.0, 6.0, n)
    half = np.tan(np.radians(30.0)) * depth * 0.7
    means = np.stack([
        depth,
        rng.uniform(-1.0, 1.0, n) * half,
        rng.uniform(-1.0, 1.0, n) * half,
    ], axis=1)
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    gs = GaussianSet(
        means=means,
        opacities=rng.uniform(0.2, 0.8, n),
        scales=rng.uniform(0.15, 0.5, (n, 3)),
        rotations=quats,
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        dynamics=rng.uniform(0.05, 0.95, n),
        sources=np.zeros(n, dtype=np.uint8),
    )
    g_color = rng.standard_normal((size, size, 3))
    g_dyn = rng.standard_normal((size, size))
    bg = rng.uniform(0.0, 1.0, 3)
    return gs, cam, g_color, g_dyn, bg


def _objective(gs, cam, g_color, g_dyn, bg) -> float:
    fr = render(gs, cam, bg)
    return float(np.sum(fr.color * g_color) + np.sum(fr.dyn * g_dyn))


def check_render_case(seed: int, n_gaussians: int = 10, size: int = 8) -> list[CheckResult]:
    """Central finite differences against the analytic backward for color,
    opacity, mean and dynamic score of every primitive."""
    gs, cam, g_color, g_dyn, bg = random_case(seed, n_gaussians, size)
    grads = render_backward(gs, cam, g_color, g_dyn, bg)
    results = []
    for name, arr in (("color", gs.colors), ("opacity", gs.opacities),
                      ("mean", gs.means), ("dyn", gs.dynamics)):
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + FD_STEP
            hi = _objective(gs, cam, g_color, g_dyn, bg)
            flat[j] = orig - FD_STEP
            lo = _objective(gs, cam, g_color, g_dyn, bg)
            flat[j] = orig
            fd_flat[j] = (hi - lo) / (2.0 * FD_STEP)
        results.append(_tolerate(grads[name], fd, f"render/{name}"))
    return results


def _fd_scalar(fn, x: np.ndarray) -> np.ndarray:
    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + FD_STEP
        hi = fn()
        flat[j] = orig - FD_STEP
        lo = fn()
        flat[j] = orig
        fd_flat[j] = (hi - lo) / (2.0 * FD_STEP)
    return fd


def check_losses(seed: int, size: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    pred = rng.uniform(0.1, 0.9, (size, size, 3))
    gt = rng.uniform(0.0, 1.0, (size, size, 3))
    mask = rng.random((size, size)) > 0.3
    _, g = loss_mse(pred, gt, mask)
    fd = _fd_scalar(lambda: loss_mse(pred, gt, mask)[0], pred)
    results.append(_tolerate(g, fd, "loss/mse"))

    pdyn = rng.uniform(0.05, 0.95, (size, size))
    dmask = rng.random((size, size)) > 0.5
    _, g = loss_dyn(pdyn, dmask)
    fd = _fd_scalar(lambda: loss_dyn(pdyn, dmask)[0], pdyn)
    results.append(_tolerate(g, fd, "loss/dyn"))

    sp = rng.uniform(0.5, 4.0, 5)
    st = rng.uniform(0.5, 4.0, 5)
    _, g = loss_scale(sp, st)
    fd = _fd_scalar(lambda: loss_scale(sp, st)[0], sp)
    results.append(_tolerate(g, fd, "loss/scale"))
    return results


def run_audit(seed: int = 0, cases: int = 20, verbose: bool = True) -> bool:
    """Full audit: `cases` render cases plus the loss checks; True iff all pass."""
    all_ok = True
    for c in range(cases):
        for res in check_render_case(seed + c):
            all_ok &= res.passed
            if verbose:
                status = "ok" if res.passed else "FAIL"
                print(f"[{status}] case {c} {res.name}: max_abs={res.max_abs_err:.3e} "
                      f"max_rel={res.max_rel_err:.3e}")
    for res in check_losses(seed):
        all_ok &= res.passed
        if verbose:
            status = "ok" if res.passed else "FAIL"
            print(f"[{status}] {res.name}: max_abs={res.max_abs_err:.3e} "
                  f"max_rel={res.max_rel_err:.3e}")
    return all_ok
