"""Image and artifact output.

Color frames are written as binary PPM (P6, 8-bit) always, plus PNG when
Pillow is importable. Auxiliary channels go to 16-bit PGM (P5): depth in
millimeters, alpha/dyn scaled by 65535. Metrics are line-delimited JSON; the
manifest records the resolved config, its hash, seeds and versions.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

try:
    from PIL import Image

    _HAVE_PIL = True
except ImportError:  # pragma: no cover - optional
    _HAVE_PIL = False


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(img: np.ndarray, path) -> None:
    """img: (H, W, 3) floats in [0, 1]."""
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_u8(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a P6 PPM")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm16(channel: np.ndarray, path, scale: float) -> None:
    """channel * scale clamped into uint16; P5 with maxval 65535."""
    h, w = channel.shape
    data = np.clip(np.round(channel * scale), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def write_png(img: np.ndarray, path) -> bool:
    if not _HAVE_PIL:
        return False
    Image.fromarray(to_u8(img)).save(path)
    return True


def write_frame_images(frame, base_path, png: bool = True) -> list[str]:
    """Write color (PPM/PNG) + depth/alpha/dyn PGMs for a RenderedFrame;
    returns the paths written."""
    written = []
    ppm = f"{base_path}.ppm"
    write_ppm(frame.color, ppm)
    written.append(ppm)
    if png and write_png(frame.color, f"{base_path}.png"):
        written.append(f"{base_path}.png")
    write_pgm16(frame.depth, f"{base_path}_depth.pgm", scale=1000.0)  # millimeters
    write_pgm16(frame.alpha, f"{base_path}_alpha.pgm", scale=65535.0)
    write_pgm16(frame.dyn, f"{base_path}_dyn.pgm", scale=65535.0)
    written += [f"{base_path}_depth.pgm", f"{base_path}_alpha.pgm", f"{base_path}_dyn.pgm"]
    return written


def _json_safe(v):
    if isinstance(v, float) and not np.isfinite(v):
        return "inf" if v > 0 else "-inf"
    return v


def metrics_line(record: dict) -> str:
    safe = {k: _json_safe(v) for k, v in record.items()}
    return json.dumps(safe, sort_keys=True)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
