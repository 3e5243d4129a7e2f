"""Reconstruction-residual damage detection and binary mask cleanup.

The healthy fake produced by the reverse-aging generator is compared with the
real tile in gray levels; the median-centred absolute difference is
thresholded, small 4-connected fragments are removed, the survivors are
dilated with an octagon and regions touching the border are cleared.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor_core as tc
from .models import generator_forward

GRAY_WEIGHTS = np.array([0.2989, 0.5870, 0.1140])
FOUR = ndimage.generate_binary_structure(2, 1)
EIGHT = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class DetectConfig:
    eps_mode: str = "absolute"
    eps_value: float = 0.15
    min_area: int = 2
    octagon_radius: int = 3
    apply_clear_border: bool = True

    def __post_init__(self):
        if self.eps_mode not in ("absolute", "peak_fraction"):
            raise ValueError(f"eps_mode must be 'absolute' or 'peak_fraction', got {self.eps_mode!r}")
        if not self.eps_value > 0:
            raise ValueError("eps_value must be > 0")
        if self.min_area < 0 or self.octagon_radius < 0:
            raise ValueError("min_area and octagon_radius must be >= 0")


def scaled_min_area(tile_size: int, at_256: int = 30) -> int:
    """Area threshold for a 256-px tile rescaled to another tile side."""
    return max(1, round(at_256 * (tile_size / 256) ** 2))


@dataclass
class Blob:
    area: int
    bbox: tuple[int, int, int, int]
    centroid: tuple[float, float]

    def to_dict(self) -> dict:
        return {"area": self.area, "bbox": list(self.bbox), "centroid": list(self.centroid)}


@dataclass
class AnomalyResult:
    diff: np.ndarray
    mask: np.ndarray
    blobs: list = field(default_factory=list)
    fake: np.ndarray | None = None


def predict_fake(gen_r, tile: np.ndarray) -> np.ndarray:
    """Healthy fake for a (3,S,S) or (N,3,S,S) tile in [-1,1]."""
    x = np.asarray(tile, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    with tc.no_grad():
        y = generator_forward(gen_r, tc.Tensor(x)).data
    return y[0] if single else y


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luminance of a (3,H,W) image with values in [0,1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"to_gray expects (3,H,W), got {rgb.shape}")
    return np.tensordot(GRAY_WEIGHTS, rgb, axes=1)


def center_abs_diff(gray_real: np.ndarray, gray_fake: np.ndarray) -> np.ndarray:
    if gray_real.shape != gray_fake.shape:
        raise ValueError(f"gray maps differ: {gray_real.shape} vs {gray_fake.shape}")
    r = np.asarray(gray_real, np.float64) - np.asarray(gray_fake, np.float64)
    return np.abs(r - np.median(r))


def threshold_mask(diff: np.ndarray, cfg: DetectConfig) -> np.ndarray:
    if cfg.eps_mode == "absolute":
        return diff > cfg.eps_value
    peak = diff.max(initial=0.0)
    if peak <= 0:
        return np.zeros(diff.shape, bool)
    return diff > cfg.eps_value * peak


def area_open(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Drop 4-connected components with fewer than ``min_area`` pixels."""
    if min_area <= 1:
        return mask.copy()
    labels, n = ndimage.label(mask, structure=FOUR)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def octagon(r: int) -> np.ndarray:
    """Chamfered square: max(|dx|,|dy|) <= r and |dx|+|dy| <= floor(3r/2)."""
    d = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return (np.abs(dx) + np.abs(dy)) <= (3 * r) // 2


def dilate_octagon(mask: np.ndarray, r: int) -> np.ndarray:
    if r < 0:
        raise ValueError("radius must be >= 0")
    if r == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=octagon(r))


def clear_border(mask: np.ndarray) -> np.ndarray:
    """Remove every 8-connected component that touches the image edge."""
    labels, _ = ndimage.label(mask, structure=EIGHT)
    edge = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    out = mask.copy()
    out[np.isin(labels, edge[edge > 0])] = False
    return out


def blob_stats(mask: np.ndarray) -> list[Blob]:
    """One Blob per 8-connected component, ordered by (min_row, min_col)."""
    labels, n = ndimage.label(mask, structure=EIGHT)
    blobs = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == lab)
        rows, cols = rows + sl[0].start, cols + sl[1].start
        blobs.append(Blob(int(rows.size),
                          (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
                          (float(rows.mean()), float(cols.mean()))))
    blobs.sort(key=lambda b: (b.bbox[0], b.bbox[1]))
    return blobs


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def clean_mask(diff: np.ndarray, cfg: DetectConfig) -> np.ndarray:
    """Threshold, area open, octagon dilation, optional border clearing."""
    mask = threshold_mask(diff, cfg)
    mask = area_open(mask, cfg.min_area)
    mask = dilate_octagon(mask, cfg.octagon_radius)
    if cfg.apply_clear_border:
        mask = clear_border(mask)
    return mask


def detect_pair(real: np.ndarray, fake: np.ndarray, cfg: DetectConfig) -> AnomalyResult:
    """Detection on a real/fake pair of (3,S,S) images in [-1,1]."""
    if real.shape != fake.shape:
        raise ValueError(f"real and fake differ: {real.shape} vs {fake.shape}")
    diff = center_abs_diff(to_gray((real + 1) / 2), to_gray((fake + 1) / 2))
    mask = clean_mask(diff, cfg)
    return AnomalyResult(diff, mask, blob_stats(mask), fake)


def detect(gen_r, tile: np.ndarray, cfg: DetectConfig) -> AnomalyResult:
    return detect_pair(np.asarray(tile, np.float32), predict_fake(gen_r, tile), cfg)
