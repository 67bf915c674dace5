"""Image metrics, open-loop rollout curves, baselines and report files."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .dynamics import DynamicsModel, rollout
from .graph import ParticleState
from .objectives import chamfer_np
from .scenarios import Trajectory

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _to_255(img: np.ndarray) -> np.ndarray:
    return img * 255.0


def image_mse(a, b) -> float:
    """Mean squared difference of [0, 1] images, measured on the 0-255 scale."""
    a, b = _check_pair(a, b)
    return float(np.mean((_to_255(a) - _to_255(b)) ** 2))


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered window positions."""
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def image_ssim(a, b) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5) on the 0-255 scale, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW} pixels per side, got {a.shape[:2]}")
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    w = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA)
    vals = []
    for ch in range(a.shape[2]):
        x, y = _to_255(a[..., ch]), _to_255(b[..., ch])
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.clip(np.mean(vals), -1.0, 1.0))


@dataclass
class RolloutCurve:
    values: np.ndarray  # (horizon,)
    split: str = "interpolate"
    per_trajectory: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.split not in ("interpolate", "extrapolate"):
            raise ValueError(f"unknown split tag {self.split!r}")
        if np.any(self.values < 0):
            raise ValueError("Chamfer curves are non-negative")

    @property
    def horizon(self) -> int:
        return len(self.values)

    def mean(self) -> float:
        return float(np.mean(self.values))


# a predictor maps (trajectory, horizon) -> (horizon, N, 3) predicted positions for frames 1..horizon
Predictor = Callable[[Trajectory, int], np.ndarray]


def model_predictor(model: DynamicsModel, rigid: bool = True) -> Predictor:
    def predict(traj: Trajectory, horizon: int) -> np.ndarray:
        init = traj.state_at(0, model.graph_config.n_history)
        states = rollout(init, traj.actuated_positions(1, horizon + 1), model, rigid=rigid)
        return np.stack([s.positions for s in states])

    return predict


def oracle_predictor(traj: Trajectory, horizon: int) -> np.ndarray:
    return traj.positions[1 : horizon + 1].copy()


def copy_last_state_baseline(initial: ParticleState, actuated_trajectory: np.ndarray) -> list[np.ndarray]:
    """Frame-0 free positions repeated; driven particles teacher-forced."""
    traj = np.asarray(actuated_trajectory, dtype=np.float64)
    drv = initial.driven
    out = []
    for frame in traj:
        pos = initial.positions.copy()
        pos[drv] = frame
        out.append(pos)
    return out


def copy_predictor(traj: Trajectory, horizon: int) -> np.ndarray:
    return np.stack(copy_last_state_baseline(traj.state_at(0), traj.actuated_positions(1, horizon + 1)))


def rollout_error_curve(predictor: Predictor | DynamicsModel, dataset: Sequence[Trajectory], horizon: int, split: str = "interpolate") -> RolloutCurve:
    """Per-step Chamfer over free particles (per group, summed), averaged over trajectories."""
    if isinstance(predictor, DynamicsModel):
        predictor = model_predictor(predictor)
    if not dataset:
        raise ValueError("empty evaluation dataset")
    rows = []
    for traj in dataset:
        if traj.n_frames < horizon + 1:
            raise ValueError(f"trajectory has {traj.n_frames} frames, horizon {horizon} needs {horizon + 1}")
        pred = predictor(traj, horizon)
        free = ~traj.driven
        gids = np.unique(traj.group_ids[free])
        row = []
        for s in range(horizon):
            err = 0.0
            for g in gids:
                sel = free & (traj.group_ids == g)
                err += chamfer_np(pred[s][sel], traj.positions[s + 1][sel])
            row.append(err)
        rows.append(row)
    rows = np.array(rows)
    return RolloutCurve(rows.mean(axis=0), split, rows)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def emit_report(metrics: dict, path: str | Path, config: dict | None = None, figure: bool = True) -> dict[str, Path]:
    """Write ``report.json``, ``curves.csv`` and (optionally) ``curves.png`` under ``path``.

    ``metrics`` holds scalar entries plus an optional ``curves`` mapping of
    name -> RolloutCurve.  Returns the written file paths.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    curves: dict[str, RolloutCurve] = dict(metrics.get("curves", {}))
    scalars = {k: v for k, v in metrics.items() if k != "curves"}
    splits: dict[str, dict] = {}
    for name, c in sorted(curves.items()):
        splits.setdefault(c.split, {})[name] = {"mean_chamfer": c.mean(), "final_chamfer": float(c.values[-1]), "horizon": c.horizon}
    report = {
        "config_hash": config_hash(config or {}),
        "config": config or {},
        "metrics": scalars,
        "splits": splits,
    }
    out = {"json": root / "report.json", "csv": root / "curves.csv"}
    out["json"].write_text(json.dumps(report, indent=1, sort_keys=True, default=float))
    with open(out["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "split", "step", "chamfer"])
        for name, c in sorted(curves.items()):
            for s, v in enumerate(c.values):
                w.writerow([name, c.split, s + 1, repr(float(v))])
    if figure and curves:
        out["png"] = root / "curves.png"
        plot_curves(curves, out["png"])
    return out


def plot_curves(curves: dict[str, RolloutCurve], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
    for name, c in sorted(curves.items()):
        ax.plot(np.arange(1, c.horizon + 1), c.values, label=f"{name} ({c.split})")
    ax.set_xlabel("rollout step")
    ax.set_ylabel("Chamfer distance")
    ax.legend(fontsize=7)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def read_report(path: str | Path) -> tuple[dict, dict[str, list[tuple[str, int, float]]]]:
    root = Path(path)
    report = json.loads((root / "report.json").read_text())
    rows: dict[str, list] = {}
    with open(root / "curves.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["curve"], []).append((rec["split"], int(rec["step"]), float(rec["chamfer"])))
    return report, rows
