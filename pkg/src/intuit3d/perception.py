"""From a fitted field to object point clouds: occupancy extraction, FPS, colour masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import read_ply, write_ply

BACKGROUND = "background"


@dataclass(frozen=True)
class GridSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    resolution: tuple[int, int, int] = (40, 40, 40)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        res = np.broadcast_to(np.asarray(self.resolution), (3,))
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("grid bounds must be 3-vectors")
        if np.any(hi <= lo):
            raise ValueError("grid bounds must be well ordered")
        if np.any(res < 2):
            raise ValueError("grid resolution must be at least 2 per axis")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))
        object.__setattr__(self, "resolution", tuple(int(r) for r in res))

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.resolution) - 1)

    @property
    def cell_edge(self) -> float:
        """Occupancy step length; the largest axis spacing for anisotropic grids."""
        return float(np.max(self.spacing))

    def points(self) -> np.ndarray:
        axes = [np.linspace(l, h, r) for l, h, r in zip(self.lo, self.hi, self.resolution)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def covering(self, lo, hi) -> "GridSpec":
        """The sub-lattice of this grid's points spanning the box [lo, hi], clipped to the grid."""
        out_lo, out_hi, res = [], [], []
        for l, h, r, a, b in zip(self.lo, self.hi, self.resolution, np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)):
            axis = np.linspace(l, h, r)
            step = (h - l) / (r - 1)
            i0 = int(np.clip(np.floor((a - l) / step + 1e-9), 0, r - 2))
            i1 = int(np.clip(np.ceil((b - l) / step - 1e-9), i0 + 1, r - 1))
            out_lo.append(axis[i0])
            out_hi.append(axis[i1])
            res.append(i1 - i0 + 1)
        return GridSpec(tuple(out_lo), tuple(out_hi), tuple(res))

    @classmethod
    def cube(cls, center, half: float, resolution: int = 40) -> "GridSpec":
        c = np.asarray(center, dtype=np.float64)
        return cls(tuple(c - half), tuple(c + half), (resolution,) * 3)


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: list[str] | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError("positions and colors differ in length")
        if self.labels is not None and len(self.labels) != len(self.positions):
            raise ValueError("labels differ in length from positions")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else [self.labels[i] for i in idx]
        return PointCloud(self.positions[idx], self.colors[idx], labels)

    def select(self, label: str) -> "PointCloud":
        if self.labels is None:
            raise ValueError("cloud has no labels")
        return self.subset([i for i, l in enumerate(self.labels) if l == label])


def occupancy(sigma: np.ndarray, delta: float) -> np.ndarray:
    return 1.0 - np.exp(-np.asarray(sigma) * delta)


def extract_points(field, grid: GridSpec, density_threshold: float = 0.99, chunk: int = 8192) -> PointCloud:
    """Grid points whose occupancy 1 - exp(-sigma * cell_edge) exceeds the threshold."""
    if density_threshold < 0:
        raise ValueError("density threshold must be non-negative")
    pts = grid.points()
    if len(pts) == 0:
        raise ValueError("empty extraction grid")
    delta = grid.cell_edge
    keep_pos, keep_col = [], []
    dirs = np.zeros((min(chunk, len(pts)), 3))
    dirs[:, 2] = -1.0
    for s in range(0, len(pts), chunk):
        p = pts[s : s + chunk]
        color, sigma = field.query(p, dirs[: len(p)])
        occ = occupancy(sigma.value, delta)
        sel = occ > density_threshold
        keep_pos.append(p[sel])
        keep_col.append(np.clip(color.value[sel], 0.0, 1.0))
    return PointCloud(np.concatenate(keep_pos), np.concatenate(keep_col))


def centroid_start(positions: np.ndarray) -> int:
    positions = np.asarray(positions, dtype=np.float64)
    d = np.sum((positions - positions.mean(axis=0)) ** 2, axis=1)
    return int(np.argmin(d))


def farthest_point_sampling(cloud: PointCloud | np.ndarray, k: int, start_index: int | None = None) -> np.ndarray:
    """Greedy max-min selection; ties go to the lowest index."""
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    start = centroid_start(pos) if start_index is None else int(start_index)
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    dist = np.sum((pos - pos[start]) ** 2, axis=1)
    for s in range(1, k):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen[s] = nxt
        dist = np.minimum(dist, np.sum((pos - pos[nxt]) ** 2, axis=1))
    return chosen


@dataclass(frozen=True)
class ColorRule:
    name: str
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"rule {self.name!r} needs a positive radius")
        if self.name == BACKGROUND:
            raise ValueError(f"{BACKGROUND!r} is reserved for unmatched points")


ColorSegmentationRule = Sequence[ColorRule]


def segment_by_color(cloud: PointCloud, rules: ColorSegmentationRule) -> PointCloud:
    """Label each point by the first rule whose RGB ball holds its colour."""
    if not rules:
        raise ValueError("at least one colour rule is required")
    labels = np.full(len(cloud), -1, dtype=np.int64)
    for r, rule in enumerate(rules):
        d2 = np.sum((cloud.colors - np.asarray(rule.center)) ** 2, axis=1)
        hit = (labels < 0) & (d2 <= rule.radius**2)
        labels[hit] = r
    names = [rules[l].name if l >= 0 else BACKGROUND for l in labels]
    return PointCloud(cloud.positions, cloud.colors, names)


def subsample(cloud: PointCloud, ratio: float, start_index: int | None = None) -> PointCloud:
    if not 0 < ratio <= 1:
        raise ValueError("subsample ratio must lie in (0, 1]")
    if len(cloud) == 0:
        return cloud
    k = max(1, int(round(ratio * len(cloud))))
    return cloud.subset(farthest_point_sampling(cloud, k, start_index))


def label_ids(labels: Sequence[str], rules: ColorSegmentationRule) -> np.ndarray:
    """Rule index + 1 per point; 0 marks background."""
    lookup = {rule.name: k + 1 for k, rule in enumerate(rules)}
    return np.array([lookup.get(l, 0) for l in labels], dtype=np.int64)


def export_ply(cloud: PointCloud, path: str | Path, rules: ColorSegmentationRule = ()) -> None:
    ids = None if cloud.labels is None else label_ids(cloud.labels, rules)
    write_ply(path, cloud.positions, cloud.colors, ids)


def import_ply(path: str | Path, rules: ColorSegmentationRule = ()) -> PointCloud:
    pos, col, ids = read_ply(path)
    names = [BACKGROUND] + [r.name for r in rules]
    labels = [names[i] if 0 <= i < len(names) else BACKGROUND for i in ids] if rules else None
    return PointCloud(pos, col, labels)


def rules_from_colors(group_colors: dict, names: dict | None = None, radius: float = 0.25) -> list[ColorRule]:
    """One rule per group colour, in ascending group order."""
    rules = []
    for gid in sorted(group_colors):
        name = (names or {}).get(gid, f"group_{gid}")
        rules.append(ColorRule(name, tuple(float(c) for c in group_colors[gid]), radius))
    return rules
