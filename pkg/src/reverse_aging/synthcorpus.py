"""Procedural concrete tiles with labeled surface damage.

Healthy tiles are near-gray value noise with sparse speckle.  Damaged tiles
add one pop-out crater, exfoliation patch or sand-leak streak, and carry a
truth mask equal to the exact set of modified pixels.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon

from .detector import blob_stats, detect, iou
from .images import save_png, to_unit

KINDS = ("popout", "exfoliation", "sand_leak")
SPLITS = ("trainD", "trainH", "testD", "testH")
SPECKLE_AMPLITUDE = 0.06
TINT_FRACTION = 0.1


@dataclass(frozen=True)
class TextureParams:
    base_gray: float = 0.55
    noise_amplitude: float = 0.05
    noise_scale: float = 8.0
    speckle_density: float = 0.01

    def validate(self):
        for name in ("base_gray", "noise_amplitude", "speckle_density"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0,1], got {v}")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")


@dataclass
class LabeledTile:
    image: np.ndarray           # (S,S,3) uint8
    truth_mask: np.ndarray      # (S,S) bool
    kind: str = "none"


@dataclass
class CorpusConfig:
    tile_size: int = 64
    train_D: int = 200
    train_H: int = 200
    test_D: int = 50
    test_H: int = 50
    # bounds for a 64-px tile; scaled by (tile_size/64)^2 via area_bounds()
    area_bounds: dict = field(default_factory=lambda: {
        "popout": (60, 260), "exfoliation": (80, 320), "sand_leak": (60, 220)})
    damage_contrast: float = 0.3
    base_gray_range: tuple = (0.53, 0.57)
    texture: TextureParams = field(default_factory=TextureParams)
    seed: int = 0

    def counts(self) -> dict:
        return {"trainD": self.train_D, "trainH": self.train_H, "testD": self.test_D, "testH": self.test_H}

    def area_bounds_for(self, kind: str) -> tuple[int, int]:
        lo, hi = self.area_bounds[kind]
        f = (self.tile_size / 64) ** 2
        return max(1, round(lo * f)), max(1, round(hi * f))

    def validate(self):
        if self.tile_size < 16:
            raise ValueError("tile_size must be >= 16")
        if any(c < 0 for c in self.counts().values()):
            raise ValueError("split counts must be >= 0")
        for kind in KINDS:
            raw_lo, raw_hi = self.area_bounds[kind]
            if not 0 < raw_lo <= raw_hi:
                raise ValueError(f"area bounds for {kind} must satisfy 0 < min <= max")
            lo, hi = self.area_bounds_for(kind)
            if not 0 < lo <= hi < self.tile_size ** 2:
                raise ValueError(f"area bounds for {kind} must satisfy 0 < min <= max < tile area")
        self.texture.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["area_bounds"] = {k: list(v) for k, v in self.area_bounds.items()}
        d["base_gray_range"] = list(self.base_gray_range)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _value_noise(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [-1,1]."""
    n = int(np.ceil(size / scale)) + 2
    lattice = rng.uniform(-1, 1, (n, n))
    coords = np.arange(size) / scale
    i0 = np.floor(coords).astype(int)
    t = coords - i0
    t = t * t * (3 - 2 * t)
    rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def gen_texture(seed: int, size: int, p: TextureParams = TextureParams()) -> np.ndarray:
    """Healthy concrete-like RGB tile, (size, size, 3) uint8."""
    if size < 16:
        raise ValueError("size must be >= 16")
    p.validate()
    rng = np.random.default_rng(seed)
    fine = _value_noise(rng, size, p.noise_scale)
    coarse = _value_noise(rng, size, p.noise_scale * 4)
    gray = p.base_gray + p.noise_amplitude * (0.7 * fine + 0.3 * coarse)
    speck = rng.random((size, size)) < p.speckle_density
    gray = gray + speck * rng.choice([-1.0, 1.0], (size, size)) * SPECKLE_AMPLITUDE
    tint = rng.uniform(-1, 1, 3) * p.noise_amplitude * TINT_FRACTION
    rgb = np.clip(gray[:, :, None] + tint[None, None, :], 0, 1)
    return np.rint(rgb * 255).astype(np.uint8)


def _margin(size: int) -> int:
    return max(4, size // 8)


def _shape_popout(rng, size, lo, hi):
    """Filled ellipse plus a one-pixel rim ring; returns (interior, rim)."""
    m = _margin(size)
    area = rng.uniform(lo, hi)
    ratio = rng.uniform(0.6, 1.0)
    # rim adds roughly one perimeter; size the interior so the union hits the target
    a = np.sqrt(area / (np.pi * ratio))
    a = max(a - 1.0, 1.5)
    b = max(a * ratio, 1.5)
    rot = rng.uniform(-np.pi, np.pi)
    reach = int(np.ceil(max(a, b))) + 2
    if size - 2 * (m + reach) < 1:
        return None
    cy = rng.uniform(m + reach, size - m - reach)
    cx = rng.uniform(m + reach, size - m - reach)
    inner = np.zeros((size, size), bool)
    outer = np.zeros((size, size), bool)
    rr, cc = draw_ellipse(cy, cx, b, a, (size, size), rotation=rot)
    inner[rr, cc] = True
    rr, cc = draw_ellipse(cy, cx, b + 1.2, a + 1.2, (size, size), rotation=rot)
    outer[rr, cc] = True
    return inner, outer & ~inner


def _shape_exfoliation(rng, size, lo, hi):
    m = _margin(size)
    area = rng.uniform(lo, hi)
    n = int(rng.integers(7, 11))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.7, 1.3, n)
    # scale so the polygon area matches the target
    poly_area = 0.5 * np.abs(np.sum(radii * np.roll(radii, -1) * np.sin(np.roll(angles, -1) - angles)))
    s = np.sqrt(area / max(poly_area, 1e-6))
    reach = int(np.ceil(s * radii.max())) + 1
    if size - 2 * (m + reach) < 1:
        return None
    cy = rng.uniform(m + reach, size - m - reach)
    cx = rng.uniform(m + reach, size - m - reach)
    rr, cc = draw_polygon(cy + s * radii * np.sin(angles), cx + s * radii * np.cos(angles), (size, size))
    mask = np.zeros((size, size), bool)
    mask[rr, cc] = True
    return mask, None


def _shape_sand_leak(rng, size, lo, hi):
    m = _margin(size)
    area = rng.uniform(lo, hi)
    width = rng.uniform(3.0, 5.5)
    length = int(round(area / width))
    if length > size - 2 * m or length < 2:
        return None
    top = int(rng.integers(m, size - m - length + 1))
    x0 = rng.uniform(m + width, size - m - 2 * width)
    phase, amp = rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0)
    mask = np.zeros((size, size), bool)
    cols = np.arange(size)
    for k, r in enumerate(range(top, top + length)):
        # streak narrows towards its lower end
        w = width * (1.0 - 0.4 * k / length)
        c = x0 + amp * np.sin(phase + k / 4.0)
        mask[r] = np.abs(cols - c) <= w / 2
    return mask, None


_SHAPES = {"popout": _shape_popout, "exfoliation": _shape_exfoliation, "sand_leak": _shape_sand_leak}


def inject_damage(tile: np.ndarray, kind: str, seed: int, cfg: CorpusConfig,
                  max_tries: int = 200) -> LabeledTile:
    """Paint one damage region; the truth mask is exactly the changed pixels."""
    if kind not in _SHAPES:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    size = tile.shape[0]
    lo, hi = cfg.area_bounds_for(kind)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        shape = _SHAPES[kind](rng, size, lo, hi)
        if shape is None:
            continue
        core, rim = shape
        truth = core if rim is None else core | rim
        if lo <= truth.sum() <= hi:
            break
    else:
        raise ValueError(f"cannot fit {kind} with area in [{lo},{hi}] on a {size}px tile")

    c = cfg.damage_contrast
    img = tile.astype(np.float64) / 255
    out = img.copy()
    gray = img.mean(axis=2)
    if kind == "popout":
        # dark crater, shading deepens towards the centre
        depth = c * (0.8 + 0.2 * rng.random(core.sum()))
        out[core] = img[core] - depth[:, None]
        out[rim] = img[rim] + 0.4 * c
    elif kind == "exfoliation":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        flat = gray[truth].mean()
        out[truth] = flat + sign * c + 0.3 * (img[truth] - flat)
    else:
        tint = np.array([1.0, 0.85, 0.6])
        out[truth] = img[truth] - c * tint
    new = np.rint(np.clip(out, 0, 1) * 255).astype(np.int16)
    old = tile.astype(np.int16)
    # every truth pixel must differ from the input
    same = (new == old).all(axis=2) & truth
    new[same] = np.where(old[same] > 0, old[same] - 1, old[same] + 1)
    new[~truth] = old[~truth]
    return LabeledTile(new.astype(np.uint8), truth.copy(), kind)


def _tile_seeds(master: int, split: str, index: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([master, SPLITS.index(split), index])
    s = ss.generate_state(2)
    return int(s[0]), int(s[1])


def make_tile(cfg: CorpusConfig, split: str, index: int) -> LabeledTile:
    tex_seed, dmg_seed = _tile_seeds(cfg.seed, split, index)
    rng = np.random.default_rng(tex_seed)
    lo, hi = cfg.base_gray_range
    params = TextureParams(float(rng.uniform(lo, hi)), cfg.texture.noise_amplitude,
                           cfg.texture.noise_scale, cfg.texture.speckle_density)
    img = gen_texture(tex_seed, cfg.tile_size, params)
    if split.endswith("H"):
        return LabeledTile(img, np.zeros(img.shape[:2], bool), "none")
    kind = KINDS[int(np.random.default_rng(dmg_seed).integers(len(KINDS)))]
    return inject_damage(img, kind, dmg_seed, cfg)


def gen_corpus(cfg: CorpusConfig, out_dir) -> list[dict]:
    """Write ``{trainD,trainH,testD,testH}/*.png``, ``truth/*.png`` and ``manifest.jsonl``."""
    cfg.validate()
    out = Path(out_dir)
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    manifest = []
    for split, count in cfg.counts().items():
        for i in range(count):
            tile = make_tile(cfg, split, i)
            name = f"{split}_{i:05d}"
            save_png(out / split / f"{name}.png", tile.image)
            rec = {"file": f"{split}/{name}.png", "split": split, "index": i,
                   "seed": _tile_seeds(cfg.seed, split, i)[0], "kind": tile.kind,
                   "domain": split[-1], "truth": None}
            if tile.kind != "none":
                save_png(out / "truth" / f"{name}.png", tile.truth_mask)
                rec["truth"] = f"truth/{name}.png"
                rec["truth_area"] = int(tile.truth_mask.sum())
            manifest.append(rec)
    with open(out / "manifest.jsonl", "w") as f:
        f.write(json.dumps({"config": cfg.to_dict(), "digest": cfg.digest()}, sort_keys=True) + "\n")
        for rec in manifest:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def read_manifest(corpus_dir) -> tuple[dict, list[dict]]:
    lines = Path(corpus_dir, "manifest.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    return head, [json.loads(line) for line in lines[1:]]



def eval_detection(test_tiles, gen_r, cfg, predicted_masks=None) -> dict:
    """Score detection on a labeled test split of LabeledTile objects.

    ``predicted_masks`` replaces the detector output; it exists to self-test
    the metric plumbing.
    """
    if not test_tiles:
        raise ValueError("empty test split")
    records, ious, fps = [], [], []
    for i, t in enumerate(test_tiles):
        if predicted_masks is not None:
            mask = predicted_masks[i]
            n_blobs = len(blob_stats(mask))
        else:
            res = detect(gen_r, to_unit(t.image), cfg)
            mask, n_blobs = res.mask, len(res.blobs)
        rec = {"index": i, "kind": t.kind, "n_blobs": n_blobs}
        if t.kind != "none":
            rec["iou"] = iou(mask, t.truth_mask)
            ious.append(rec["iou"])
        else:
            rec["false_positive"] = n_blobs > 0
            fps.append(rec["false_positive"])
        records.append(rec)
    return {"mean_iou_damaged": float(np.mean(ious)) if ious else float("nan"),
            "healthy_fp_rate": float(np.mean(fps)) if fps else float("nan"),
            "n_damaged": len(ious), "n_healthy": len(fps),
            "n_tiles": len(test_tiles), "per_tile": records}
