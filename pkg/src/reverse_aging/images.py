"""PNG/PGM file helpers and the 8-bit <-> [-1,1] value mapping."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image


def to_unit(img_u8: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float32 in [-1,1]."""
    return (img_u8.astype(np.float32) / np.float32(127.5) - 1).transpose(2, 0, 1).copy()


def from_unit(x: np.ndarray) -> np.ndarray:
    """(3,H,W) in [-1,1] -> (H,W,3) uint8."""
    v = np.rint((np.asarray(x, dtype=np.float64) + 1) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def _atomic_save(path, write):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    write(tmp)
    os.replace(tmp, path)


def save_png(path, img: np.ndarray) -> None:
    """Save uint8 RGB (H,W,3), grayscale (H,W) or a boolean mask."""
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    _atomic_save(path, lambda p: Image.fromarray(img).save(p, format="PNG"))


def save_pgm16(path, values: np.ndarray) -> float:
    """Write a 16-bit binary PGM scaled so the max maps to 65535.

    Returns the scale factor (stored value = round(value * scale)); the factor
    is also written as a header comment.
    """
    vmax = float(values.max()) if values.size else 0.0
    scale = 65535.0 / vmax if vmax > 0 else 1.0
    data = np.clip(np.rint(values * scale), 0, 65535).astype(">u2")
    h, w = values.shape
    header = f"P5\n# scale {scale!r}\n{w} {h}\n65535\n".encode()
    _atomic_save(path, lambda p: Path(p).write_bytes(header + data.tobytes()))
    return scale


def load_pgm16(path) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    lines, pos, scale = [], 0, 1.0
    while len(lines) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode()
        pos = end + 1
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "scale":
                scale = float(parts[1])
            continue
        lines.extend(line.split())
    w, h = int(lines[1]), int(lines[2])
    data = np.frombuffer(raw[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / scale, scale
