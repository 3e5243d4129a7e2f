"""Cut large survey images into unit tiles and build a balanced unpaired dataset."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TileGrid:
    unit: int
    cols: int
    rows: int

    @property
    def fitted_width(self) -> int:
        return self.unit * self.cols

    @property
    def fitted_height(self) -> int:
        return self.unit * self.rows

    @property
    def n_tiles(self) -> int:
        return self.cols * self.rows


@dataclass
class Tile:
    image: np.ndarray       # (unit, unit, 3) uint8
    source: str
    row: int
    col: int

    @property
    def name(self) -> str:
        return f"{self.source}_{self.row}_{self.col}"

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.source, self.row, self.col)


@dataclass
class UnpairedDataset:
    domain_D: list
    domain_H: list
    seed: int
    manifest: list = field(default_factory=list)

    def __post_init__(self):
        if not self.manifest:
            self.manifest = [self._record(t, "D") for t in self.domain_D] + \
                            [self._record(t, "H") for t in self.domain_H]

    def _record(self, t: Tile, domain: str) -> dict:
        return {"file": f"{t.name}.png", "source": t.source, "row": t.row, "col": t.col,
                "domain": domain, "seed": self.seed}


def grid_fit(width: int, height: int, unit: int = 256) -> TileGrid:
    """Largest whole grid of ``unit`` tiles that fits inside the image."""
    if unit < 1:
        raise ValueError("unit must be >= 1")
    if width < unit or height < unit:
        raise ValueError(f"image {width}x{height} is smaller than the {unit}px unit")
    return TileGrid(unit, width // unit, height // unit)


def resize_bilinear(img: np.ndarray, to_width: int, to_height: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment; uint8 in, uint8 out."""
    if to_width < 1 or to_height < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = img.shape[:2]
    if (w, h) == (to_width, to_height):
        return img.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis(h, to_height)
    c0, c1, fc = axis(w, to_width)
    src = img if img.ndim == 3 else img[:, :, None]
    out = np.empty((to_height, to_width, src.shape[2]), np.uint8)
    # blocks of output rows keep float64 temporaries small on survey-size images
    for lo in range(0, to_height, 256):
        sl = slice(lo, min(lo + 256, to_height))
        f = fr[sl, None, None]
        rows = src[r0[sl]].astype(np.float64) * (1 - f) + src[r1[sl]].astype(np.float64) * f
        block = rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
        out[sl] = np.clip(np.rint(block), 0, 255)
    return out.reshape((to_height, to_width) + img.shape[2:])


def fit_image(img: np.ndarray, unit: int = 256) -> tuple[np.ndarray, TileGrid]:
    h, w = img.shape[:2]
    grid = grid_fit(w, h, unit)
    return resize_bilinear(img, grid.fitted_width, grid.fitted_height), grid


def tile(img: np.ndarray, grid: TileGrid, source: str = "image") -> list[Tile]:
    """Row-major list of disjoint unit tiles covering the fitted image."""
    if img.shape[:2] != (grid.fitted_height, grid.fitted_width):
        raise ValueError(f"image is {img.shape[1]}x{img.shape[0]}, grid expects "
                         f"{grid.fitted_width}x{grid.fitted_height}")
    u = grid.unit
    return [Tile(img[r * u:(r + 1) * u, c * u:(c + 1) * u].copy(), source, r, c)
            for r in range(grid.rows) for c in range(grid.cols)]


def untile(tiles: list[Tile], grid: TileGrid) -> np.ndarray:
    rows = [np.concatenate([t.image for t in tiles[r * grid.cols:(r + 1) * grid.cols]], axis=1)
            for r in range(grid.rows)]
    return np.concatenate(rows, axis=0)


def assemble_unpaired(d_tiles: list[Tile], h_tiles: list[Tile], seed: int) -> UnpairedDataset:
    """Subsample both domains, without replacement, to the smaller size."""
    if not d_tiles or not h_tiles:
        raise ValueError("both domains need at least one tile")
    shared = {t.key for t in d_tiles} & {t.key for t in h_tiles}
    if shared:
        raise ValueError(f"tiles appear in both domains: {sorted(shared)[:3]}")
    m = min(len(d_tiles), len(h_tiles))
    rng = np.random.default_rng(seed)
    pick_d = rng.choice(len(d_tiles), m, replace=False)
    pick_h = rng.choice(len(h_tiles), m, replace=False)
    return UnpairedDataset([d_tiles[i] for i in pick_d], [h_tiles[i] for i in pick_h], seed)


def write_manifest(records: list[dict], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def dataset_from_manifest(records: list[dict], tiles: dict) -> UnpairedDataset:
    """Rebuild a dataset from its manifest; ``tiles`` maps (source,row,col) to Tile."""
    d = [tiles[(r["source"], r["row"], r["col"])] for r in records if r["domain"] == "D"]
    h = [tiles[(r["source"], r["row"], r["col"])] for r in records if r["domain"] == "H"]
    seed = records[0]["seed"] if records else 0
    return UnpairedDataset(d, h, seed, list(records))
