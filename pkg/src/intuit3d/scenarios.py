"""Toy particle scenes standing in for a full physics engine.

World units are metres, z is up and the table top is z = 0.  Free particles
are integrated with symplectic Euler (``substeps`` per frame) under gravity,
a linear repulsive spring within two radii and a pairwise velocity smoothing
term.  Walls are projections with zero restitution.  Rigid groups are
re-projected onto their rest shape after every substep.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import CanonicalShape, rigid_project
from .field import CameraModel, GaussianBlobField, PosedImage, render_image
from .graph import Material, ParticleState, neighbor_search
from .io import read_ppm, write_ppm

FLUID_GROUP = 0
CUBE_GROUP = 1
CONTAINER_GROUP = 10
LOWER_CONTAINER_GROUP = 11
PUSHER_GROUP = 12

GROUP_COLORS = {
    FLUID_GROUP: (0.15, 0.35, 0.95),
    CUBE_GROUP: (0.95, 0.2, 0.15),
    CONTAINER_GROUP: (0.6, 0.6, 0.6),
    LOWER_CONTAINER_GROUP: (0.45, 0.45, 0.45),
    PUSHER_GROUP: (0.3, 0.8, 0.3),
}
GRANULAR_COLOR = (0.9, 0.7, 0.15)

DOMAIN_LO = np.array([-0.6, -0.6, -0.05])
DOMAIN_HI = np.array([0.6, 0.6, 1.5])
WALL_HALF = 0.5


class SimulationError(RuntimeError):
    pass


@dataclass
class ScenarioParams:
    kind: str = "shake"
    n_particles: int = 60  # free particles, cube points included
    cube: bool = True
    radius: float = 0.035
    container_half: float = 0.16
    container_height: float = 0.35
    wall_spacing: float = 0.08
    amplitude: float = 0.06
    period: float = 1.2  # seconds, dominant action period
    gravity: float = 9.8
    substeps: int = 4
    frame_dt: float = 1.0 / 30.0
    stiffness: float = 3000.0
    viscosity: float = 4.0
    friction: float = 0.0
    warmup_frames: int = 30
    tilt_max_deg: float = 100.0  # pour
    push_speed: float = 0.006  # pour/push action scale, metres per frame
    push_start: float = 0.25  # push: initial pusher distance from pile centre

    def __post_init__(self):
        if self.kind not in ("shake", "push", "pour"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.cube and self.kind == "shake" and self.n_particles < 9:
            raise ValueError("a cube needs 8 particles plus at least one fluid particle")
        if self.radius <= 0 or self.container_half <= 2 * self.radius or self.container_height <= 2 * self.radius:
            raise ValueError("non-degenerate geometry required")
        if self.substeps < 1 or self.frame_dt <= 0 or self.wall_spacing <= 0:
            raise ValueError("substeps, frame_dt and wall_spacing must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def default_params(kind: str) -> ScenarioParams:
    if kind == "shake":
        return ScenarioParams(kind="shake")
    if kind == "push":
        return ScenarioParams(
            kind="push", n_particles=60, cube=False, radius=0.03, amplitude=0.0, viscosity=6.0,
            friction=0.3, container_half=0.5, container_height=0.3, wall_spacing=0.06, push_speed=0.006,
        )
    if kind == "pour":
        return ScenarioParams(
            kind="pour", n_particles=40, cube=False, radius=0.025, container_half=0.1,
            container_height=0.2, wall_spacing=0.07, tilt_max_deg=110.0, period=2.0, warmup_frames=60,
        )
    raise ValueError(f"unknown scenario kind {kind!r}")


def extrapolate_params(params: ScenarioParams) -> ScenarioParams:
    """Strictly outside the training ranges: twice the particles, a wider container."""
    return replace(params, n_particles=2 * params.n_particles, container_half=1.4 * params.container_half)


@dataclass
class Trajectory:
    positions: np.ndarray  # (T, N, 3)
    materials: np.ndarray  # (N,)
    group_ids: np.ndarray  # (N,)
    actions: np.ndarray  # (T, action_dim)
    group_colors: dict[int, tuple[float, float, float]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[0] < 2:
            raise ValueError("a trajectory needs at least two frames")
        if self.positions.shape[1] != len(self.materials) or len(self.materials) != len(self.group_ids):
            raise ValueError("per-particle arrays disagree with the position array")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def driven(self) -> np.ndarray:
        return np.isin(self.materials, (Material.ACTUATED, Material.ENVIRONMENT))

    def colors(self) -> np.ndarray:
        return np.array([self.group_colors[int(g)] for g in self.group_ids], dtype=np.float64)

    def state_at(self, t: int, n_history: int = 3) -> ParticleState:
        """Frame t with true velocity history for driven particles, zeros elsewhere."""
        hist = np.zeros((self.n_particles, n_history, 3))
        drv = self.driven
        for k in range(n_history):
            a = t - n_history + k
            if a >= 0:
                hist[drv, k] = self.positions[a + 1, drv] - self.positions[a, drv]
        return ParticleState(self.positions[t], hist, self.materials, self.group_ids, t)

    def actuated_positions(self, start: int, stop: int) -> np.ndarray:
        return self.positions[start:stop][:, self.driven]


# --------------------------------------------------------------------------
# geometry helpers


def panel_points(origin, edge_u, edge_v, density: float) -> np.ndarray:
    """Grid on a parallelogram panel, corners inclusive; ``density`` in points per metre."""
    if density <= 0:
        raise ValueError("sampling density must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    eu = np.asarray(edge_u, dtype=np.float64)
    ev = np.asarray(edge_v, dtype=np.float64)
    lu, lv = np.linalg.norm(eu), np.linalg.norm(ev)
    if lu <= 0 or lv <= 0 or np.linalg.norm(np.cross(eu, ev)) < 1e-12:
        raise ValueError("degenerate panel")
    nu = int(round(lu * density)) + 1
    nv = int(round(lv * density)) + 1
    a, b = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
    return origin + a.reshape(-1, 1) * eu + b.reshape(-1, 1) * ev


def _dedupe(points: np.ndarray) -> np.ndarray:
    keys = np.round(points, 9)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(idx)]


def open_box_points(half_x: float, half_y: float, height: float, spacing: float, bottom_center=(0, 0, 0)) -> np.ndarray:
    """Floor and four walls of an open-top box."""
    d = 1.0 / spacing
    c = np.asarray(bottom_center, dtype=np.float64)
    lo = c + (-half_x, -half_y, 0.0)
    ex, ey, ez = np.array([2 * half_x, 0, 0]), np.array([0, 2 * half_y, 0]), np.array([0, 0, height])
    parts = [
        panel_points(lo, ex, ey, d),
        panel_points(lo, ex, ez, d),
        panel_points(lo + ey, ex, ez, d),
        panel_points(lo, ey, ez, d),
        panel_points(lo + ex, ey, ez, d),
    ]
    return _dedupe(np.concatenate(parts))


def actuated_points(shape: dict, density: float) -> np.ndarray:
    """Surface samples for a known shape description.

    ``shape["type"]`` is ``"panel"`` (origin, edge_u, edge_v) or ``"open_box"``
    (half_x, half_y, height[, bottom_center]).
    """
    if density <= 0:
        raise ValueError("sampling density must be positive")
    kind = shape.get("type")
    if kind == "panel":
        return panel_points(shape["origin"], shape["edge_u"], shape["edge_v"], density)
    if kind == "open_box":
        if min(shape["half_x"], shape["half_y"], shape["height"]) <= 0:
            raise ValueError("degenerate box")
        return open_box_points(shape["half_x"], shape["half_y"], shape["height"], 1.0 / density, shape.get("bottom_center", (0, 0, 0)))
    raise ValueError(f"unknown shape type {kind!r}")


def _lattice(n: int, lo, hi, spacing: float, rng: np.random.Generator, jitter: float = 0.05) -> np.ndarray:
    """First n points of a lattice filling the box bottom-up, slightly jittered."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    counts = np.maximum(np.floor((hi - lo) / spacing).astype(int) + 1, 1)
    layer = counts[0] * counts[1]
    layers = int(np.ceil(n / layer))
    pts = []
    for k in range(layers):
        for i in range(counts[0]):
            for j in range(counts[1]):
                pts.append(lo + np.array([i, j, k]) * spacing)
    pts = np.array(pts[:n])
    return pts + rng.uniform(-jitter, jitter, size=pts.shape) * spacing


def smooth_path(rng: np.random.Generator, n_frames: int, dt: float, amplitude: float, period: float, dims: int = 2):
    """Sum of three seeded sinusoids per axis, zero at t = 0; positions and velocities per unit time."""
    t = np.arange(n_frames) * dt
    pos = np.zeros((n_frames, dims))
    vel = np.zeros((n_frames, dims))
    for d in range(dims):
        for k in range(3):
            omega = 2 * np.pi / (period * rng.uniform(0.7, 1.4) * (k + 1) ** 0.5)
            phase = rng.uniform(0, 2 * np.pi)
            a = amplitude * rng.uniform(0.3, 1.0) / (k + 1)
            pos[:, d] += a * (np.sin(omega * t + phase) - np.sin(phase))
            vel[:, d] += a * omega * np.cos(omega * t + phase)
    return pos, vel


# --------------------------------------------------------------------------
# particle solver


class _Solver:
    def __init__(self, x, params: ScenarioParams, rigid_groups: Sequence[np.ndarray] = ()):
        self.x = np.asarray(x, dtype=np.float64).copy()
        self.v = np.zeros_like(self.x)
        self.p = params
        self.rigid = [np.asarray(g) for g in rigid_groups]
        self.shapes = [CanonicalShape.from_positions(k, self.x[g]) for k, g in enumerate(self.rigid)]

    def substep(self, dt: float, collide) -> None:
        p = self.p
        x0 = self.x.copy()
        v = self.v
        v[:, 2] -= p.gravity * dt
        pairs = neighbor_search(self.x, 2 * p.radius)
        if len(pairs):
            i, j = pairs[:, 0], pairs[:, 1]
            diff = self.x[i] - self.x[j]
            dist = np.sqrt(np.sum(diff * diff, axis=1))
            nrm = diff / np.maximum(dist, 1e-12)[:, None]
            push = (p.stiffness * (2 * p.radius - dist))[:, None] * nrm
            visc = p.viscosity * (v[j] - v[i])
            dv = np.zeros_like(v)
            np.add.at(dv, i, (push + visc) * dt)
            v += dv
        self.x = self.x + v * dt
        self.x, self.v = collide(self.x, v, dt)
        for g, shape in zip(self.rigid, self.shapes):
            proj = rigid_project(self.x[g], shape)
            fixed, _ = collide(proj.copy(), np.zeros_like(proj), dt)
            # translate the whole body by the largest correction per axis
            corr = fixed - proj
            shift = np.where(np.abs(corr.max(axis=0)) >= np.abs(corr.min(axis=0)), corr.max(axis=0), corr.min(axis=0))
            self.x[g] = proj + shift
            self.v[g] = (self.x[g] - x0[g]) / dt
        if p.friction:
            on_floor = self.x[:, 2] <= p.radius + 1e-9
            self.v[on_floor, :2] *= 1.0 - p.friction

    def frame(self, collide) -> None:
        dt = self.p.frame_dt / self.p.substeps
        for _ in range(self.p.substeps):
            self.substep(dt, collide)
        if not np.all(np.isfinite(self.x)) or np.any(self.x < DOMAIN_LO) or np.any(self.x > DOMAIN_HI):
            raise SimulationError("particle escaped the simulation domain")


def _clamp_box(x, v, lo, hi, wall_vel=None):
    below = x < lo
    above = x > hi
    hit = below | above
    x = np.clip(x, lo, hi)
    if hit.any():
        target = np.zeros_like(v) if wall_vel is None else np.broadcast_to(wall_vel, v.shape)
        v = np.where(hit, target, v)
    return x, v


def _domain(x, v, r):
    return _clamp_box(x, v, np.array([-WALL_HALF + r, -WALL_HALF + r, r]), np.array([WALL_HALF - r, WALL_HALF - r, 1.4]))


def _seed_rng(seed: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), {"shake": 1, "push": 2, "pour": 3}[kind]])


def _assemble(free_pos, free_mat, free_gid, driven_pos, driven_mat, driven_gid, actions, params, seed, colors):
    positions = np.concatenate([free_pos, driven_pos], axis=1)
    return Trajectory(
        positions,
        np.concatenate([free_mat, driven_mat]).astype(np.int64),
        np.concatenate([free_gid, driven_gid]).astype(np.int64),
        actions,
        colors,
        {"scenario": params.kind, "seed": int(seed), "params": params.to_json()},
    )


# --------------------------------------------------------------------------
# scenarios


def simulate_shake(params: ScenarioParams, seed: int, n_frames: int = 60, initial: np.ndarray | None = None) -> Trajectory:
    """Fluid (and one rigid cube) in a container moved along a smooth 2D path.

    ``initial`` overrides the free-particle start positions (container frame);
    warm-up is skipped in that case.
    """
    p = params
    rng = _seed_rng(seed, "shake")
    r, hx, hz = p.radius, p.container_half, p.container_height
    n_cube = 8 if p.cube else 0
    n_fluid = p.n_particles - n_cube
    if initial is None:
        spacing = 2 * r * 1.02
        fluid = _lattice(n_fluid, (-hx + r, -hx + r, r), (hx - r, hx - r, hz), spacing, rng)
        free = fluid
        if n_cube:
            top = fluid[:, 2].max() + 2 * r
            c = np.array([rng.uniform(-hx + 3 * r, hx - 3 * r), rng.uniform(-hx + 3 * r, hx - 3 * r), top])
            cube = c + r * np.array([[a, b, d] for a in (-1, 1) for b in (-1, 1) for d in (-1, 1)], dtype=np.float64)
            free = np.concatenate([fluid, cube])
    else:
        free = np.asarray(initial, dtype=np.float64)
        if free.shape != (p.n_particles, 3):
            raise ValueError(f"initial positions must be ({p.n_particles}, 3)")
    rigid = [np.arange(n_fluid, p.n_particles)] if n_cube else []
    solver = _Solver(free, p, rigid)

    path, vel = smooth_path(rng, n_frames, p.frame_dt, p.amplitude, p.period)
    warm = 0 if initial is not None else p.warmup_frames

    def collider(offset, wall_v):
        lo = np.array([offset[0] - hx + r, offset[1] - hx + r, r])
        hi = np.array([offset[0] + hx - r, offset[1] + hx - r, hz - r])
        wv = np.array([wall_v[0], wall_v[1], 0.0])
        return lambda x, v, dt: _clamp_box(x, v, lo, hi, wv)

    rest = collider((0.0, 0.0), (0.0, 0.0))
    for _ in range(warm):
        solver.frame(rest)
    if warm:
        solver.v[:] = 0.0

    box = open_box_points(hx, hx, hz, p.wall_spacing)
    frames, driven = [], []
    for t in range(n_frames):
        if t > 0:
            # substep the container along the path between frames
            a, b = path[t - 1], path[t]
            for s in range(p.substeps):
                f = (s + 1) / p.substeps
                off = a + f * (b - a)
                solver.substep(p.frame_dt / p.substeps, collider(off, (b - a) / p.frame_dt))
            if not np.all(np.isfinite(solver.x)) or np.any(solver.x < DOMAIN_LO) or np.any(solver.x > DOMAIN_HI):
                raise SimulationError(f"particle escaped the simulation domain at frame {t}")
        frames.append(solver.x.copy())
        driven.append(box + np.array([path[t, 0], path[t, 1], 0.0]))
    free_mat = np.array([Material.FLUID] * n_fluid + [Material.RIGID] * n_cube)
    free_gid = np.array([FLUID_GROUP] * n_fluid + [CUBE_GROUP] * n_cube)
    nb = len(box)
    colors = {FLUID_GROUP: GROUP_COLORS[FLUID_GROUP], CONTAINER_GROUP: GROUP_COLORS[CONTAINER_GROUP]}
    if n_cube:
        colors[CUBE_GROUP] = GROUP_COLORS[CUBE_GROUP]
    return _assemble(
        np.array(frames), free_mat, free_gid,
        np.array(driven), np.full(nb, Material.ACTUATED), np.full(nb, CONTAINER_GROUP),
        path, p, seed, colors,
    )


def simulate_push(params: ScenarioParams, seed: int, n_frames: int = 60) -> Trajectory:
    """Granular pile pushed by a board translating along a straight line."""
    p = params
    rng = _seed_rng(seed, "push")
    r = p.radius
    # one layer of pieces with gaps, so an untouched pile is exactly at rest
    spacing = 2 * r * 1.2
    side = int(np.ceil(np.sqrt(p.n_particles)))
    pile_half = 0.5 * (side - 1) * spacing
    grains = _lattice(p.n_particles, (-pile_half, -pile_half, r), (pile_half, pile_half, r), spacing, rng)
    solver = _Solver(grains, p)
    angle = rng.uniform(-0.3, 0.3)
    normal = np.array([np.cos(angle), np.sin(angle), 0.0])
    tangent = np.array([-normal[1], normal[0], 0.0])
    start = -p.push_start - pile_half
    speed = p.push_speed * rng.uniform(0.8, 1.2)

    def collide_with(offset):
        def collide(x, v, dt):
            x, v = _domain(x, v, r)
            depth = offset + r - x @ normal
            hit = depth > 0
            if hit.any():
                x = x + np.where(hit, depth, 0.0)[:, None] * normal
                vn = v @ normal
                v = v + np.where(hit, np.maximum(speed / p.frame_dt - vn, 0.0), 0.0)[:, None] * normal
            return x, v

        return collide

    for _ in range(p.warmup_frames):
        solver.frame(lambda x, v, dt: _domain(x, v, r))
    solver.v[:] = 0.0

    board = panel_points(-0.2 * tangent, 0.4 * tangent, np.array([0.0, 0.0, 0.12]), 1.0 / p.wall_spacing)
    frames, driven, actions = [], [], []
    offset = start
    for t in range(n_frames):
        if t > 0:
            for s in range(p.substeps):
                offset += speed / p.substeps
                solver.substep(p.frame_dt / p.substeps, collide_with(offset))
            if not np.all(np.isfinite(solver.x)) or np.any(solver.x < DOMAIN_LO) or np.any(solver.x > DOMAIN_HI):
                raise SimulationError(f"particle escaped the simulation domain at frame {t}")
        frames.append(solver.x.copy())
        driven.append(board + offset * normal)
        actions.append([offset, angle])
    nb = len(board)
    return _assemble(
        np.array(frames), np.full(p.n_particles, Material.GRANULAR), np.full(p.n_particles, FLUID_GROUP),
        np.array(driven), np.full(nb, Material.ACTUATED), np.full(nb, PUSHER_GROUP),
        np.array(actions), p, seed,
        {FLUID_GROUP: GRANULAR_COLOR, PUSHER_GROUP: GROUP_COLORS[PUSHER_GROUP]},
    )


def _rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def pour_geometry(params: ScenarioParams) -> dict:
    hx, h = params.container_half, params.container_height
    cup_bottom = np.array([-0.22, 0.0, 0.32])
    pivot_local = np.array([hx, 0.0, h])
    lower_center = np.array([0.08, 0.0, 0.0])
    return {"cup_bottom": cup_bottom, "pivot_local": pivot_local, "lower_center": lower_center, "lower_half": 0.2, "lower_height": 0.16}


def simulate_pour(params: ScenarioParams, seed: int, n_frames: int = 60, tilt_profile: np.ndarray | None = None) -> Trajectory:
    """Fluid poured from a tilting cup into a static lower container.

    The cup rotates about its +x rim; ``tilt_profile`` (radians per frame)
    overrides the seeded back-and-forth tilt.
    """
    p = params
    rng = _seed_rng(seed, "pour")
    r, hx, h = p.radius, p.container_half, p.container_height
    geo = pour_geometry(p)
    bottom, pivot_local = geo["cup_bottom"], geo["pivot_local"]
    pivot = bottom + pivot_local
    lc, lh, lz = geo["lower_center"], geo["lower_half"], geo["lower_height"]

    local0 = _lattice(p.n_particles, (-hx + r, -hx + r, r), (hx - r, hx - r, 5 * h), 2 * r * 1.02, rng)
    solver = _Solver(local0 + bottom, p)
    in_cup = np.ones(p.n_particles, dtype=bool)

    if tilt_profile is None:
        peak = np.radians(p.tilt_max_deg) * rng.uniform(0.8, 1.0)
        t = np.arange(n_frames) * p.frame_dt
        per = p.period * rng.uniform(0.8, 1.2)
        tilt = peak * 0.5 * (1 - np.cos(2 * np.pi * np.minimum(t / per, 1.0)))
    else:
        tilt = np.asarray(tilt_profile, dtype=np.float64)
        if tilt.shape != (n_frames,):
            raise ValueError("tilt_profile needs one angle per frame")

    def cup_world(theta):
        rot = _rot_y(theta)
        return rot, pivot - rot @ pivot_local

    def collide_with(theta, settling=False):
        rot, origin = cup_world(theta)

        def collide(x, v, dt):
            nonlocal in_cup
            local = (x - origin) @ rot
            vloc = v @ rot
            # while settling the walls are unbounded so the spawn column can drop in
            leaving = in_cup & (local[:, 2] > h) & (not settling)
            in_cup = in_cup & ~leaving
            lo = np.array([-hx + r, -hx + r, r])
            hi = np.array([hx - r, hx - r, np.inf])
            cl, cv = _clamp_box(local, vloc, lo, hi)
            x = np.where(in_cup[:, None], cl @ rot.T + origin, x)
            v = np.where(in_cup[:, None], cv @ rot.T, v)
            free = ~in_cup
            if free.any():
                x[free], v[free] = _lower_container(x[free], v[free], lc, lh, lz, r)
                x[free], v[free] = _domain(x[free], v[free], r)
            return x, v

        return collide

    for _ in range(p.warmup_frames):
        solver.frame(collide_with(0.0, settling=True))
    solver.v[:] = 0.0

    cup = open_box_points(hx, hx, h, p.wall_spacing)
    lower = open_box_points(lh, lh, lz, p.wall_spacing, lc)
    frames, driven = [], []
    for k in range(n_frames):
        if k > 0:
            for s in range(p.substeps):
                theta = tilt[k - 1] + (s + 1) / p.substeps * (tilt[k] - tilt[k - 1])
                solver.substep(p.frame_dt / p.substeps, collide_with(theta))
            if not np.all(np.isfinite(solver.x)) or np.any(solver.x < DOMAIN_LO) or np.any(solver.x > DOMAIN_HI):
                raise SimulationError(f"particle escaped the simulation domain at frame {k}")
        rot, origin = cup_world(tilt[k])
        frames.append(solver.x.copy())
        driven.append(np.concatenate([cup @ rot.T + origin, lower]))
    nc, nl = len(cup), len(lower)
    return _assemble(
        np.array(frames), np.full(p.n_particles, Material.FLUID), np.full(p.n_particles, FLUID_GROUP),
        np.array(driven),
        np.array([Material.ACTUATED] * nc + [Material.ENVIRONMENT] * nl),
        np.array([CONTAINER_GROUP] * nc + [LOWER_CONTAINER_GROUP] * nl),
        tilt[:, None], p, seed,
        {
            FLUID_GROUP: GROUP_COLORS[FLUID_GROUP],
            CONTAINER_GROUP: GROUP_COLORS[CONTAINER_GROUP],
            LOWER_CONTAINER_GROUP: GROUP_COLORS[LOWER_CONTAINER_GROUP],
        },
    )


def _lower_container(x, v, center, half, height, r):
    """Particles above the footprint fall in; walls keep them in or out."""
    rel = x[:, :2] - center[:2]
    inside_fp = np.all(np.abs(rel) <= half, axis=1)
    low = x[:, 2] < height + r
    # inside: clamp to the interior
    ins = inside_fp
    if ins.any():
        lo = np.array([center[0] - half + r, center[1] - half + r, r])
        hi = np.array([center[0] + half - r, center[1] + half - r, np.inf])
        x[ins], v[ins] = _clamp_box(x[ins], v[ins], lo, hi)
    # outside but below the rim and touching a wall: push outward
    out = ~inside_fp & low & np.all(np.abs(rel) <= half + r, axis=1)
    if out.any():
        relo = rel[out]
        ax = np.argmax(np.abs(relo) - half, axis=1)
        xs = x[out]
        vs = v[out]
        rows = np.arange(len(xs))
        sign = np.sign(relo[rows, ax])
        xs[rows, ax] = center[ax] + sign * (half + r)
        vs[rows, ax] = 0.0
        x[out], v[out] = xs, vs
    return x, v


def in_lower_container(positions: np.ndarray, params: ScenarioParams) -> np.ndarray:
    geo = pour_geometry(params)
    rel = positions[:, :2] - geo["lower_center"][:2]
    return np.all(np.abs(rel) <= geo["lower_half"], axis=1) & (positions[:, 2] < geo["lower_height"])


SIMULATORS = {"shake": simulate_shake, "push": simulate_push, "pour": simulate_pour}


def simulate(params: ScenarioParams, seed: int, n_frames: int = 60) -> Trajectory:
    return SIMULATORS[params.kind](params, seed, n_frames)


# --------------------------------------------------------------------------
# cameras and ground-truth views


def scene_bounds(params: ScenarioParams) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box that contains every free particle of the scenario."""
    if params.kind == "shake":
        reach = params.container_half + 2.5 * params.amplitude + 0.05
        return np.array([-reach, -reach, 0.0]), np.array([reach, reach, params.container_height + 0.05])
    if params.kind == "push":
        return np.array([-0.5, -0.5, 0.0]), np.array([0.5, 0.5, 0.3])
    return np.array([-0.5, -0.5, 0.0]), np.array([0.5, 0.5, 0.75])


def fit_box(traj: Trajectory, frame: int, pad: float = 0.08) -> tuple[np.ndarray, np.ndarray]:
    """Workspace box for field fitting: the shake container interior at ``frame``, else the scene bounds.

    ``pad`` widens the box so the rendered blob tails near the walls stay inside it.
    """
    params = ScenarioParams(**traj.meta["params"])
    if params.kind == "shake":
        off = np.append(np.asarray(traj.actions[frame], dtype=np.float64), 0.0)
        h = params.container_half + pad
        return off + [-h, -h, -pad], off + [h, h, params.container_height + pad]
    return scene_bounds(params)


def camera_rig(center, radius: float = 1.2, height: float = 0.9, n: int = 6, size: int = 32, fov_deg: float = 40.0) -> list[CameraModel]:
    """``n`` cameras evenly spaced on a ring above ``center``, all looking at it."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(CameraModel.look_at(eye, center, fov_deg=fov_deg, width=size, height=size))
    return cams


def blob_field(positions, colors, blob_radius: float, amplitude: float = 100.0) -> GaussianBlobField:
    return GaussianBlobField(np.asarray(positions, dtype=np.float64).reshape(-1, 3), np.asarray(colors, dtype=np.float64).reshape(-1, 3), blob_radius, amplitude)


def render_ground_truth_views(
    trajectory: Trajectory,
    cameras: Sequence[CameraModel],
    blob_radius: float,
    frames: Sequence[int] | None = None,
    n_samples: int = 64,
    bounds=None,
    amplitude: float = 100.0,
    include_driven: bool = False,
    backgrounds: Sequence | None = None,
) -> list[list[PosedImage]]:
    """Per frame, one image per camera of the particles drawn as Gaussian blobs.

    With ``backgrounds`` every camera is rendered once per backdrop colour,
    backdrop-major; the default is a single black backdrop.
    """
    if len(cameras) < 1:
        raise ValueError("need at least one camera")
    frames = range(trajectory.n_frames) if frames is None else frames
    sel = np.ones(trajectory.n_particles, dtype=bool) if include_driven else ~trajectory.driven
    colors = trajectory.colors()[sel]
    if bounds is None:
        bounds = scene_bounds(ScenarioParams(**trajectory.meta["params"])) if "params" in trajectory.meta else None
    out = []
    for t in frames:
        blobs = blob_field(trajectory.positions[t][sel], colors, blob_radius, amplitude)
        out.append(
            [
                PosedImage(render_image(blobs, cam, n_samples, bounds=bounds, background=bg), cam, bg)
                for bg in (backgrounds if backgrounds is not None else [None])
                for cam in cameras
            ]
        )
    return out


# --------------------------------------------------------------------------
# dataset directory


class DatasetError(ValueError):
    pass


def dataset_write(
    trajectories: Sequence[Trajectory],
    path: str | Path,
    cameras: Sequence[CameraModel] = (),
    views: dict[int, list[list[PosedImage]]] | None = None,
    extra: dict | None = None,
) -> None:
    """manifest.json + little-endian f32 (frame-major, particle-minor) position blobs.

    ``views`` maps a trajectory index to per-frame lists of images; they are
    stored as PPM under ``views/traj_XXXX/``.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cam_files = []
    for k, cam in enumerate(cameras):
        name = f"camera_{k}.json"
        cam.save(root / name)
        cam_files.append(name)
    entries = []
    for k, traj in enumerate(trajectories):
        blob = f"traj_{k:04d}.f32"
        (root / blob).write_bytes(np.ascontiguousarray(traj.positions, dtype="<f4").tobytes())
        entry = {
            "name": f"traj_{k:04d}",
            "file": blob,
            "n_frames": traj.n_frames,
            "n_particles": traj.n_particles,
            "materials": traj.materials.tolist(),
            "group_ids": traj.group_ids.tolist(),
            "group_colors": {str(g): list(c) for g, c in sorted(traj.group_colors.items())},
            "actions": np.asarray(traj.actions, dtype=np.float64).tolist(),
            "meta": traj.meta,
        }
        if views and k in views:
            vdir = f"views/traj_{k:04d}"
            names = []
            entry["view_backgrounds"] = [None if img.background is None else list(img.background) for img in views[k][0]] if views[k] else []
            for t, per_frame in enumerate(views[k]):
                row = []
                for c, img in enumerate(per_frame):
                    fname = f"{vdir}/f{t:03d}_c{c}.ppm"
                    write_ppm(root / fname, img.image)
                    row.append(fname)
                names.append(row)
            entry["views"] = names
        entries.append(entry)
    scenarios = sorted({t.meta.get("scenario", "unknown") for t in trajectories})
    manifest = {
        "format": "intuit3d-dataset-1",
        "scenario": scenarios[0] if len(scenarios) == 1 else scenarios,
        "seeds": [t.meta.get("seed") for t in trajectories],
        "n_trajectories": len(trajectories),
        "cameras": cam_files,
        "trajectories": entries,
        **(extra or {}),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_manifest(path: str | Path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"no manifest.json in {path}")
    return json.loads(mf.read_text())


def dataset_read(path: str | Path) -> list[Trajectory]:
    root = Path(path)
    manifest = read_manifest(root)
    if manifest.get("n_trajectories") != len(manifest["trajectories"]):
        raise DatasetError("manifest trajectory count disagrees with its entries")
    out = []
    for entry in manifest["trajectories"]:
        blob = root / entry["file"]
        if not blob.exists():
            raise DatasetError(f"missing position blob for trajectory {entry['name']}")
        raw = blob.read_bytes()
        t, n = entry["n_frames"], entry["n_particles"]
        if len(raw) != t * n * 3 * 4:
            raise DatasetError(f"trajectory {entry['name']}: blob holds {len(raw)} bytes, expected {t * n * 12}")
        pos = np.frombuffer(raw, dtype="<f4").reshape(t, n, 3).astype(np.float64)
        if len(entry["materials"]) != n:
            raise DatasetError(f"trajectory {entry['name']}: material count disagrees with the blob")
        colors = {int(g): tuple(c) for g, c in entry["group_colors"].items()}
        actions = np.asarray(entry["actions"], dtype=np.float64)
        out.append(Trajectory(pos, np.asarray(entry["materials"]), np.asarray(entry["group_ids"]), actions, colors, entry["meta"]))
    return out


def read_cameras(path: str | Path) -> list[CameraModel]:
    root = Path(path)
    return [CameraModel.load(root / name) for name in read_manifest(root)["cameras"]]


def read_views(path: str | Path, traj_index: int, frame: int) -> list[PosedImage]:
    root = Path(path)
    manifest = read_manifest(root)
    entry = manifest["trajectories"][traj_index]
    if "views" not in entry:
        raise DatasetError(f"trajectory {entry['name']} has no rendered views")
    cams = read_cameras(root)
    names = entry["views"][frame]
    backs = entry.get("view_backgrounds") or [None] * len(names)
    if not cams:
        raise DatasetError(f"trajectory {entry['name']} has views but the dataset has no cameras")
    return [PosedImage(read_ppm(root / name), cams[c % len(cams)], backs[c]) for c, name in enumerate(names)]
