"""Cameras, radiance fields and differentiable volume rendering.

Camera convention: right-handed, the camera looks down its local -z axis with
x to the right and y up.  Pixel ``(u, v)`` has its centre at
``(u + 0.5, v + 0.5)`` and ``v`` grows downwards.

Rendering uses midpoint quadrature per stratum: with density ``s_k`` and
stratum length ``d_k``, sample k contributes ``T_k * s_k * d_k * exp(-s_k d_k / 2) * c_k``
where ``T_k = exp(-sum_{j<k} s_j d_j)``; ``T_k * exp(-s_k d_k / 2)`` is the
transmittance at the stratum midpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .numerics import AdamState, adam_step, autodiff as ad, init_linear

# --------------------------------------------------------------------------
# cameras


@dataclass
class CameraModel:
    camera_to_world: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64)
        if self.camera_to_world.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        rot = self.camera_to_world[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def position(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg: float = 40.0, width: int = 32, height: int = 32) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        c2w = np.eye(4)
        c2w[:3, 0] = right
        c2w[:3, 1] = true_up
        c2w[:3, 2] = -forward
        c2w[:3, 3] = eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(c2w, f, f, width / 2, height / 2, width, height)

    def to_json(self) -> dict:
        return {
            "camera_to_world": self.camera_to_world.reshape(-1).tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CameraModel":
        return cls(
            np.asarray(data["camera_to_world"], dtype=np.float64).reshape(4, 4),
            float(data["fx"]),
            float(data["fy"]),
            float(data["cx"]),
            float(data["cy"]),
            int(data["width"]),
            int(data["height"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CameraModel":
        return cls.from_json(json.loads(Path(path).read_text()))

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> continuous pixel coordinates, depth, and in-image mask."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rot = self.camera_to_world[:3, :3]
        local = (points - self.camera_to_world[:3, 3]) @ rot
        depth = -local[:, 2]
        safe = np.where(depth > 1e-12, depth, 1.0)
        u = self.cx + self.fx * local[:, 0] / safe
        v = self.cy - self.fy * local[:, 1] / safe
        uv = np.stack([u, v], axis=1)
        ok = (depth > 1e-12) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return uv, depth, ok


@dataclass
class PosedImage:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: CameraModel
    background: tuple | None = None  # backdrop colour behind the scene; None is black

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.background is not None:
            self.background = tuple(float(v) for v in np.broadcast_to(np.asarray(self.background, dtype=np.float64), (3,)))
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(f"image shape {self.image.shape} does not match camera {self.camera.height}x{self.camera.width}")
        if self.image.min(initial=0.0) < 0.0 or self.image.max(initial=0.0) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"degenerate ray interval [{self.t_near}, {self.t_far}]")


def pixel_directions(camera: CameraModel, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit world-space directions through pixel centres."""
    x = (np.asarray(u, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    y = -(np.asarray(v, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    local = np.stack([x, y, -np.ones_like(x)], axis=-1)
    world = local @ camera.camera_to_world[:3, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def ray_for_pixel(camera: CameraModel, u: int, v: int, t_near: float, t_far: float) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside a {camera.width}x{camera.height} image")
    return Ray(camera.position, pixel_directions(camera, np.array(u), np.array(v)), t_near, t_far)


def camera_rays(camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Origins and directions for every pixel, row-major (H*W, 3)."""
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    dirs = pixel_directions(camera, u.reshape(-1), v.reshape(-1))
    return np.broadcast_to(camera.position, dirs.shape).copy(), dirs


def aabb_interval(origins: np.ndarray, dirs: np.ndarray, lo, hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab-method ray/box clipping: near, far and a hit mask (near clamped at 0)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    hit = far > near + 1e-9
    return near, np.where(hit, far, near + 1.0), hit


# --------------------------------------------------------------------------
# fields


@dataclass
class FieldSample:
    color: np.ndarray
    sigma: float

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.sigma < 0:
            raise ValueError("density must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("colour components must lie in [0, 1]")


class RadianceField(Protocol):
    def query(self, points: np.ndarray, dirs: np.ndarray) -> tuple[ad.Node, ad.Node]:
        """(M, 3) points and unit directions -> colour (M, 3) and density (M,) nodes."""
        ...


@dataclass
class UniformField:
    """Constant density and colour, optionally restricted to a box."""

    sigma: float
    color: Sequence[float] = (1.0, 1.0, 1.0)
    lo: Sequence[float] | None = None
    hi: Sequence[float] | None = None

    def query(self, points, dirs):
        points = np.asarray(points, dtype=np.float64)
        m = points.shape[0]
        sig = np.full(m, float(self.sigma))
        if self.lo is not None:
            inside = np.all((points >= self.lo) & (points <= self.hi), axis=1)
            sig = np.where(inside, sig, 0.0)
        return ad.const(np.tile(np.asarray(self.color, dtype=np.float64), (m, 1))), ad.const(sig)


@dataclass
class GaussianBlobField:
    """Sum of isotropic Gaussian density blobs; colour is the density-weighted mean."""

    centers: np.ndarray
    colors: np.ndarray
    radius: float = 0.03
    amplitude: float = 100.0

    def densities(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64)
        m = points.shape[0]
        sig = np.zeros(m)
        col = np.zeros((m, 3))
        if len(self.centers) == 0:
            return sig, col
        inv = 1.0 / (2.0 * self.radius**2)
        cutoff = 16.0  # exp(-16) ~ 1e-7 relative
        chunk = 4096
        for s in range(0, m, chunk):
            p = points[s : s + chunk]
            d2 = np.sum((p[:, None, :] - self.centers[None, :, :]) ** 2, axis=-1) * inv
            k = np.where(d2 < cutoff, self.amplitude * np.exp(-d2), 0.0)
            sig[s : s + chunk] = k.sum(axis=1)
            col[s : s + chunk] = k @ self.colors
        nz = sig > 0
        col[nz] /= sig[nz, None]
        return sig, np.clip(col, 0.0, 1.0)

    def query(self, points, dirs):
        sig, col = self.densities(points)
        return ad.const(col), ad.const(sig)


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


class VoxelGridField:
    """Trilinearly interpolated grid of (colour logits, density logit).

    Colour is ``sigmoid`` of the interpolated logits and density is
    ``density_scale * softplus`` of the interpolated logit; outside the
    bounds density is 0. A large ``density_scale`` lets bounded optimiser
    steps in logit space span densities of order 1/voxel.
    """

    def __init__(
        self,
        lo,
        hi,
        resolution,
        params: dict[str, np.ndarray] | None = None,
        init_sigma: float = 0.1,
        init_color: float = 0.5,
        density_scale: float = 1.0,
    ):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.resolution = tuple(int(r) for r in np.broadcast_to(resolution, (3,)))
        if any(r < 2 for r in self.resolution):
            raise ValueError("voxel grid needs at least 2 samples per axis")
        if np.any(self.hi <= self.lo):
            raise ValueError("voxel grid bounds must be well ordered")
        if not density_scale > 0:
            raise ValueError("density_scale must be positive")
        self.density_scale = float(density_scale)
        if params is None:
            n = int(np.prod(self.resolution))
            params = {
                "color_logit": np.full((n, 3), _logit(init_color)),
                "density_logit": np.full((n, 1), _softplus_inv(init_sigma / self.density_scale)),
            }
        self.params = params

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.resolution) - 1)

    def with_params(self, params) -> "VoxelGridField":
        return VoxelGridField(self.lo, self.hi, self.resolution, params, density_scale=self.density_scale)

    def param_nodes(self) -> dict[str, ad.Node]:
        return {k: ad.param(v, k) for k, v in self.params.items()}

    def corners(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flat corner indices (M, 8), trilinear weights (M, 8), inside mask (M,)."""
        res = np.asarray(self.resolution)
        g = (np.asarray(points, dtype=np.float64) - self.lo) / self.spacing
        inside = np.all((g >= 0) & (g <= res - 1), axis=1)
        g = np.clip(g, 0, res - 1)
        base = np.minimum(np.floor(g).astype(np.int64), res - 2)
        frac = g - base
        idx = np.empty((g.shape[0], 8), dtype=np.int64)
        w = np.empty((g.shape[0], 8))
        k = 0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = base + (dx, dy, dz)
                    idx[:, k] = (c[:, 0] * res[1] + c[:, 1]) * res[2] + c[:, 2]
                    w[:, k] = (
                        (frac[:, 0] if dx else 1 - frac[:, 0])
                        * (frac[:, 1] if dy else 1 - frac[:, 1])
                        * (frac[:, 2] if dz else 1 - frac[:, 2])
                    )
                    k += 1
        w[~inside] = 0.0
        return idx, w, inside

    def query(self, points, dirs, params: dict[str, ad.Node] | None = None):
        p = params if params is not None else {k: ad.const(v) for k, v in self.params.items()}
        idx, w, inside = self.corners(points)
        color = ad.sigmoid(ad.weighted_gather(p["color_logit"], idx, w))
        dens = ad.softplus(ad.weighted_gather(p["density_logit"], idx, w))
        dens = ad.mul(ad.reshape(dens, (-1,)), ad.const(self.density_scale * inside.astype(np.float64)))
        return color, dens


# --------------------------------------------------------------------------
# rendering


def sample_depths(near: np.ndarray, far: np.ndarray, n_samples: int, rng: np.random.Generator | None = None):
    """Stratum sample depths (R, S) and stratum lengths (R, S).

    Samples sit at stratum midpoints unless ``rng`` is given, in which case
    each is jittered uniformly inside its stratum.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    if np.any(far <= near):
        raise ValueError("degenerate ray: t_near >= t_far")
    delta = (far - near) / n_samples
    offs = np.full((near.shape[0], n_samples), 0.5) if rng is None else rng.uniform(size=(near.shape[0], n_samples))
    t = near + (np.arange(n_samples) + offs) * delta
    return t, np.broadcast_to(delta, t.shape).copy()


def transmittance(densities, deltas, k: int) -> float:
    """exp(-sum_{j<k} sigma_j * delta_j)."""
    densities = np.asarray(densities, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(densities < 0) or np.any(deltas <= 0):
        raise ValueError("densities must be >= 0 and deltas > 0")
    return float(np.exp(-np.sum(densities[:k] * deltas[:k])))


def render_rays(
    field,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    n_samples: int = 64,
    params: dict[str, ad.Node] | None = None,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
    background=None,
) -> ad.Node:
    """Differentiable colours (R, 3); rays with ``mask == False`` render the background (black by default)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    r = origins.shape[0]
    t, delta = sample_depths(near, far, n_samples, rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    d_rep = np.repeat(dirs, n_samples, axis=0)
    if params is None:
        color, sigma = field.query(pts.reshape(-1, 3), d_rep)
    else:
        color, sigma = field.query(pts.reshape(-1, 3), d_rep, params=params)
    if mask is not None:
        sigma = ad.mul(sigma, ad.const(np.repeat(np.asarray(mask, dtype=np.float64), n_samples)))
    optical = ad.mul(ad.reshape(sigma, (r, n_samples)), ad.const(delta))
    # T at the stratum midpoint, times sigma * delta
    log_t_mid = ad.add(ad.cumsum_exclusive(optical), ad.scale(optical, 0.5))
    weights = ad.mul(ad.exp(ad.scale(log_t_mid, -1.0)), optical)
    shaded = ad.scale_rows(color, ad.reshape(weights, (-1,)))
    out = ad.sum_axis(ad.reshape(shaded, (r, n_samples, 3)), 1)
    if background is None:
        return out
    # residual transmittance shows the backdrop
    t_end = ad.exp(ad.scale(ad.sum_axis(optical, 1), -1.0))
    backdrop = ad.const(np.broadcast_to(np.asarray(background, dtype=np.float64), (r, 3)).copy())
    return ad.add(out, ad.scale_rows(backdrop, t_end))


def render_ray(field, ray: Ray, n_samples: int = 64) -> np.ndarray:
    return render_rays(field, ray.origin[None], ray.direction[None], [ray.t_near], [ray.t_far], n_samples).value[0]


def render_image(
    field,
    camera: CameraModel,
    n_samples: int = 64,
    near: float | None = None,
    far: float | None = None,
    bounds: tuple | None = None,
    chunk: int = 1024,
    background=None,
) -> np.ndarray:
    """Render every pixel; the ray interval comes from ``bounds`` (AABB) or ``near``/``far``."""
    origins, dirs = camera_rays(camera)
    t_near, t_far, hit = _intervals(origins, dirs, near, far, bounds)
    out = np.zeros((origins.shape[0], 3))
    if background is not None:
        out[:] = np.asarray(background, dtype=np.float64)
    for s in range(0, origins.shape[0], chunk):
        sl = slice(s, s + chunk)
        if not hit[sl].any():
            continue
        out[sl] = render_rays(field, origins[sl], dirs[sl], t_near[sl], t_far[sl], n_samples, mask=hit[sl], background=background).value
    return np.clip(out, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def _intervals(origins, dirs, near, far, bounds):
    if bounds is not None:
        return aabb_interval(origins, dirs, bounds[0], bounds[1])
    if near is None or far is None:
        raise ValueError("give either bounds or near/far")
    n = origins.shape[0]
    return np.full(n, float(near)), np.full(n, float(far)), np.ones(n, dtype=bool)


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    target: np.ndarray  # (R, 3)
    backdrop: np.ndarray | None = None  # (R, 3); None means black everywhere

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        back = None if self.backdrop is None else self.backdrop[idx]
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.hit[idx], self.target[idx], back)


def collect_rays(views: Sequence[PosedImage], bounds=None, near=None, far=None) -> RayBatch:
    """Every pixel of every view as a ray with its target colour and backdrop."""
    parts = []
    for view in views:
        o, d = camera_rays(view.camera)
        tn, tf, hit = _intervals(o, d, near, far, bounds)
        back = np.broadcast_to(np.asarray(view.background or (0.0, 0.0, 0.0), dtype=np.float64), (o.shape[0], 3))
        parts.append((o, d, tn, tf, hit, view.image.reshape(-1, 3), back))
    cols = [np.concatenate([p[i] for p in parts]) for i in range(7)]
    if not np.any(cols[6]):
        cols[6] = None
    return RayBatch(*cols)


def view_reconstruction_loss(field, batch: RayBatch, n_samples: int = 64, params=None) -> ad.Node:
    """Mean over rays of the squared L2 colour error."""
    if len(batch) == 0:
        raise ValueError("empty ray batch")
    pred = render_rays(field, batch.origins, batch.dirs, batch.near, batch.far, n_samples, params=params, mask=batch.hit, background=batch.backdrop)
    err = ad.sqnorm(ad.sub(pred, ad.const(batch.target)))
    return ad.mean(err)


@dataclass
class FitConfig:
    steps: int = 2000
    ray_batch: int = 1024
    lr: float = 0.05
    n_samples: int = 64
    seed: int = 0
    lr_end: float | None = None  # log-linear decay from lr to lr_end when set
    occupancy_weight: float = 0.0  # weight of the voxel occupancy prior; 0 is the plain view loss
    occupancy_cell: float | None = None  # cell edge the prior's occupancy is measured on; default the grid spacing

    def lr_at(self, step: int) -> float:
        if self.lr_end is None or self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return float(self.lr * (self.lr_end / self.lr) ** frac)


@dataclass
class FitResult:
    field: VoxelGridField
    loss_history: list[float] = field(default_factory=list)


def occupancy_prior(grid: VoxelGridField, density_logit: ad.Node, cell: float) -> ad.Node:
    """Mean of alpha * (1 - alpha) over voxels, alpha = 1 - exp(-sigma * cell).

    Zero only for empty or opaque voxels, so it favours solid surfaces over
    the diffuse fog that also reproduces a handful of low-resolution views.
    """
    x = ad.scale(ad.softplus(density_logit), grid.density_scale * float(cell))
    return ad.mean(ad.sub(ad.exp(ad.scale(x, -1.0)), ad.exp(ad.scale(x, -2.0))))


def fit_field(
    views: Sequence[PosedImage],
    lo,
    hi,
    resolution,
    config: FitConfig = FitConfig(),
    init: VoxelGridField | None = None,
    callback=None,
) -> FitResult:
    """Fit a voxel grid to posed views by Adam on the view-reconstruction loss.

    Rays are clipped to the grid box; each step draws ``ray_batch`` rays
    (with replacement) from a generator seeded by ``config.seed``. With
    ``config.occupancy_weight > 0`` the occupancy prior is added to the loss.
    """
    if len(views) < 2:
        raise ValueError("field fitting needs at least two views")
    rng = np.random.default_rng(config.seed)
    grid = init if init is not None else VoxelGridField(lo, hi, resolution)
    rays = collect_rays(views, bounds=(grid.lo, grid.hi))
    params = {k: v.copy() for k, v in grid.params.items()}
    state = AdamState()
    history: list[float] = []
    cell = float(config.occupancy_cell) if config.occupancy_cell is not None else float(np.max(grid.spacing))
    for step in range(config.steps):
        idx = rng.integers(0, len(rays), size=min(config.ray_batch, len(rays)))
        nodes = {k: ad.param(v, k) for k, v in params.items()}
        loss = view_reconstruction_loss(grid, rays.subset(idx), config.n_samples, params=nodes)
        if config.occupancy_weight > 0:
            prior = occupancy_prior(grid, nodes["density_logit"], cell)
            loss = ad.add(loss, ad.scale(prior, config.occupancy_weight))
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"field fitting diverged at step {step}")
        history.append(value)
        grads = ad.grad(loss)
        params, state = adam_step(params, grads, state, config.lr_at(step))
        if callback is not None:
            callback(step, value)
    return FitResult(grid.with_params(params), history)


def running_minimum(history: Sequence[float]) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(history, dtype=np.float64))


def image_mse_unit(a: np.ndarray, b: np.ndarray) -> float:
    """Per-pixel mean squared error on the [0, 1] scale."""
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


# --------------------------------------------------------------------------
# image-conditioned field


class FeatureExtractor(Protocol):
    dim: int

    def features(self, points: np.ndarray, views: Sequence[PosedImage]) -> np.ndarray:
        """(n_views, M, dim) features; zero where a point does not project into a view."""
        ...


@dataclass
class ZeroExtractor:
    dim: int = 3

    def features(self, points, views):
        return np.zeros((len(views), np.asarray(points).reshape(-1, 3).shape[0], self.dim))


@dataclass
class PixelColorExtractor:
    """Reference extractor: the bilinearly sampled RGB at the projected pixel."""

    dim: int = 3

    def features(self, points, views):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((len(views), points.shape[0], 3))
        for k, view in enumerate(views):
            uv, _, ok = view.camera.project(points)
            if not ok.any():
                continue
            out[k, ok] = _bilinear(view.image, uv[ok])
        return out


def _bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    y = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), int)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


class ConditionedField:
    """(x, d, mean-pooled view feature) -> (colour, density) by a small MLP."""

    def __init__(self, extractor, hidden: int = 32, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.extractor = extractor
        self.hidden = hidden
        self.in_dim = 6 + extractor.dim
        if params is None:
            rng = np.random.default_rng(seed)
            w0, b0 = init_linear(rng, self.in_dim, hidden)
            w1, b1 = init_linear(rng, hidden, 4)
            params = {"w0": w0, "b0": b0, "w1": w1, "b1": b1}
        self.params = params

    def pooled_features(self, points, views) -> np.ndarray:
        if len(views) < 1:
            raise ValueError("conditioning needs at least one view")
        return self.extractor.features(points, views).mean(axis=0)

    def query_with(self, points, dirs, feats, params=None):
        p = params if params is not None else {k: ad.const(v) for k, v in self.params.items()}
        x = np.concatenate([np.asarray(points).reshape(-1, 3), np.asarray(dirs).reshape(-1, 3), feats], axis=1)
        h = ad.relu(ad.linear(ad.const(x), p["w0"], p["b0"]))
        out = ad.linear(h, p["w1"], p["b1"])
        n = x.shape[0]
        color = ad.sigmoid(ad.gather(ad.reshape(out, (n * 4,)), (np.arange(n)[:, None] * 4 + np.arange(3)).reshape(-1)))
        sigma = ad.softplus(ad.gather(ad.reshape(out, (n * 4,)), np.arange(n) * 4 + 3))
        return ad.reshape(color, (n, 3)), sigma


def conditioned_query(cfield: ConditionedField, x, d, views: Sequence[PosedImage]) -> FieldSample:
    feats = cfield.pooled_features(np.asarray(x)[None], views)
    color, sigma = cfield.query_with(np.asarray(x)[None], np.asarray(d)[None], feats)
    return FieldSample(color.value[0], float(sigma.value[0]))
