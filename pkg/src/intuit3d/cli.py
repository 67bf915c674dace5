"""Command-line entry point: gen-data, fit-field, extract-points, train-dyn, rollout, eval.

Settings resolve as defaults < ``--config`` JSON < environment (paths only) < flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

ENV_PREFIX = "INTUIT3D_"
PATH_KEYS = ("out", "data", "model", "field")


class CliError(Exception):
    pass


def _optional(cast: Callable) -> Callable:
    def parse(v):
        return None if v is None or str(v).lower() == "none" else cast(v)

    parse.__name__ = cast.__name__
    return parse


class _Command:
    """Collects flag defaults so config files and env vars can be layered under explicit flags."""

    def __init__(self, sub, name: str, help: str, run: Callable):
        self.parser = sub.add_parser(name, help=help, description=help, argument_default=argparse.SUPPRESS)
        self.parser.set_defaults(_command=self)
        self.name = name
        self.run = run
        self.defaults: dict[str, Any] = {}
        self.types: dict[str, Callable] = {}
        self.flag("--config", None, "JSON file of settings (keys as flag names)", str)

    def flag(self, name: str, default, help: str, type: Callable | None = None, **kw):
        dest = name.lstrip("-").replace("-", "_")
        if kw.get("action") == "store_true":
            self.parser.add_argument(name, help=f"{help} (default: off)", **kw)
            self.types[dest] = bool
        else:
            self.parser.add_argument(name, type=type, help=f"{help} (default: {default})", **kw)
            self.types[dest] = type or str
        self.defaults[dest] = default

    def resolve(self, ns: argparse.Namespace, environ) -> argparse.Namespace:
        given = {k: v for k, v in vars(ns).items() if k in self.defaults}
        settings = dict(self.defaults)
        cfg_path = given.get("config")
        if cfg_path:
            try:
                cfg = json.loads(Path(cfg_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise CliError(f"cannot read config {cfg_path}: {exc}") from None
            if not isinstance(cfg, dict):
                raise CliError(f"config {cfg_path} must hold a JSON object")
            for key, value in cfg.items():
                dest = key.replace("-", "_")
                if dest not in self.defaults or dest == "config":
                    raise CliError(f"unknown setting {key!r} for {self.name}")
                settings[dest] = self._cast(dest, value)
        for dest in PATH_KEYS:
            env = environ.get(ENV_PREFIX + dest.upper())
            if dest in self.defaults and env:
                settings[dest] = env
        settings.update(given)
        return argparse.Namespace(**settings)

    def _cast(self, dest: str, value):
        cast = self.types[dest]
        if value is None or cast is bool:
            return value if cast is not bool else bool(value)
        try:
            return cast(value)
        except (TypeError, ValueError) as exc:
            raise CliError(f"setting {dest!r}: {exc}") from None


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise CliError(f"--{n.replace('_', '-')} is required")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .scenarios import (
        SimulationError,
        camera_rig,
        dataset_write,
        default_params,
        extrapolate_params,
        render_ground_truth_views,
        scene_bounds,
        simulate,
    )

    _require(args, "out")
    params = default_params(args.scenario)
    if args.n_particles is not None:
        params = replace(params, n_particles=args.n_particles)
    if args.extrapolate:
        params = extrapolate_params(params)
    if args.trajs < 1 or args.frames < 2:
        raise CliError("--trajs must be >= 1 and --frames >= 2")
    seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.trajs).tolist()
    trajs = []
    for k, s in enumerate(seeds):
        try:
            trajs.append(simulate(params, int(s), args.frames))
        except SimulationError as exc:
            raise CliError(f"trajectory {k} (seed {s}): {exc}") from None
    lo, hi = scene_bounds(params)
    cams = camera_rig(0.5 * (lo + hi), n=args.cameras, size=args.image_size) if args.view_trajs > 0 else []
    views = {}
    frames = list(range(min(args.view_frames, args.frames)))
    for k in range(min(args.view_trajs, args.trajs)):
        views[k] = render_ground_truth_views(
            trajs[k],
            cams,
            args.blob_radius,
            frames=frames,
            n_samples=args.render_samples,
            bounds=(lo, hi),
            amplitude=args.blob_density,
            backgrounds=_backdrops(args.backdrops),
        )
    split = "extrapolate" if args.extrapolate else "interpolate"
    dataset_write(trajs, args.out, cams, views, extra={"split": split, "blob_radius": args.blob_radius, "blob_density": args.blob_density})
    print(f"wrote {len(trajs)} {args.scenario} trajectories ({split}) to {args.out}")
    return 0


def _backdrops(text: str) -> list[tuple]:
    out = []
    for part in text.split(";"):
        rgb = tuple(float(v) for v in part.split(","))
        if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
            raise CliError(f"backdrop {part!r} is not an RGB triple in [0, 1]")
        out.append(rgb)
    return out


def cmd_fit_field(args) -> int:
    from .field import FitConfig, VoxelGridField, fit_field
    from .numerics import save_params
    from .perception import GridSpec
    from .scenarios import ScenarioParams, dataset_read, fit_box, read_views, scene_bounds

    _require(args, "data", "out")
    trajs = dataset_read(args.data)
    if not 0 <= args.traj < len(trajs):
        raise CliError(f"--traj {args.traj} out of range (dataset has {len(trajs)})")
    views = read_views(args.data, args.traj, args.frame)
    if args.box is not None:
        box = np.array([float(v) for v in args.box.split(",")])
        if box.shape != (6,):
            raise CliError("--box needs six comma-separated numbers")
        lo, hi = box[:3], box[3:]
    else:
        lo, hi = fit_box(trajs[args.traj], args.frame)
    slo, shi = scene_bounds(ScenarioParams(**trajs[args.traj].meta["params"]))
    lattice = GridSpec.cube(0.5 * (slo + shi), float(np.max(shi - slo)) / 2, args.extract_res)
    if args.resolution is None:
        # voxels on the default extraction lattice, so extraction reads voxel values directly
        sub = lattice.covering(lo, hi)
        lo, hi, resolution = np.asarray(sub.lo), np.asarray(sub.hi), sub.resolution
    else:
        resolution = args.resolution
    cell = args.occupancy_cell if args.occupancy_cell is not None else lattice.cell_edge
    cfg = FitConfig(
        steps=args.steps,
        ray_batch=args.rays,
        lr=args.lr,
        n_samples=args.samples,
        seed=args.seed,
        lr_end=args.lr_end,
        occupancy_weight=args.occupancy_weight,
        occupancy_cell=cell,
    )
    init = VoxelGridField(lo, hi, resolution, init_sigma=args.init_sigma, density_scale=args.density_scale)
    res = fit_field(views, lo, hi, resolution, cfg, init=init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "lo": [float(v) for v in lo],
        "hi": [float(v) for v in hi],
        "resolution": list(res.field.resolution),
        "data": str(args.data),
        "traj": args.traj,
        "frame": args.frame,
        "n_samples": args.samples,
        "density_scale": args.density_scale,
    }
    save_params(out / "field.ckpt", res.field.params, seed=args.seed, step=args.steps, meta=meta)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for s, v in enumerate(res.loss_history):
            w.writerow([s, repr(v)])
    print(f"fitted field ({args.steps} steps, final batch loss {res.loss_history[-1] if res.loss_history else float('nan'):.3g}) -> {out}")
    return 0


def load_field(path):
    from .field import VoxelGridField
    from .numerics import load_params

    params, header = load_params(path)
    meta = header["meta"]
    return VoxelGridField(meta["lo"], meta["hi"], meta["resolution"], params, density_scale=meta.get("density_scale", 1.0)), meta


def cmd_extract_points(args) -> int:
    from .perception import (
        BACKGROUND,
        GridSpec,
        PointCloud,
        export_ply,
        extract_points,
        rules_from_colors,
        segment_by_color,
        subsample,
    )
    from .scenarios import ScenarioParams, dataset_read, scene_bounds

    _require(args, "field", "out")
    field, meta = load_field(args.field)
    data = args.data or meta.get("data")
    if not data:
        raise CliError("--data is required to build colour rules")
    traj = dataset_read(data)[meta.get("traj", 0)]
    rules = rules_from_colors(traj.group_colors, radius=args.rule_radius)
    # only groups with free particles are objects; the rest is scenery
    objects = {f"group_{int(g)}" for g in np.unique(traj.group_ids[~traj.driven])}
    if "params" in traj.meta:
        lo, hi = scene_bounds(ScenarioParams(**traj.meta["params"]))
    else:
        lo, hi = np.asarray(meta["lo"]), np.asarray(meta["hi"])
    grid = GridSpec.cube(0.5 * (lo + hi), float(np.max(hi - lo)) / 2, args.grid_res)
    cloud = extract_points(field, grid, args.threshold)
    if len(cloud) == 0:
        print(f"warning: no grid point exceeds occupancy {args.threshold}; writing an empty cloud", file=sys.stderr)
    seg = segment_by_color(cloud, rules) if len(cloud) else PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), [])
    parts = []
    for name in [r.name for r in rules if r.name in objects] + ([BACKGROUND] if args.keep_background else []):
        obj = seg.select(name)
        if len(obj):
            parts.append(subsample(obj, args.ratio))
    if parts:
        final = PointCloud(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.colors for p in parts]),
            [l for p in parts for l in p.labels],
        )
    else:
        final = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = out / f"frame_{int(meta.get('frame', 0)):04d}.ply"
    export_ply(final, name, rules)
    _write_json(out / "labels.json", {"0": BACKGROUND, **{str(k + 1): r.name for k, r in enumerate(rules)}})
    print(f"extracted {len(cloud)} points, kept {len(final)} -> {name}")
    return 0


def cmd_train_dyn(args) -> int:
    from .dynamics import DynamicsModel, ModelConfig
    from .graph import GraphConfig
    from .objectives import LossConfig
    from .scenarios import dataset_read
    from .training import TrainConfig, checkpoint_save, train_dynamics, write_history_csv

    _require(args, "data", "out")
    trajs = dataset_read(args.data)
    mcfg = ModelConfig(hidden=args.hidden, propagation_steps=args.propagation_steps)
    tcfg = TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, plateau_patience=args.patience,
        lr_decay_factor=args.decay, seed=args.seed, rollout_steps=args.rollout_steps,
        samples_per_epoch=args.samples_per_epoch, clip_norm=args.clip_norm,
    )
    lcfg = LossConfig(d_min=args.d_min, spacing_weight=args.spacing_weight)
    model = DynamicsModel.initialized(GraphConfig(delta=args.delta), mcfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(row):
        print(f"epoch {row['epoch']}: train {row['train_loss']:.4g} val {row['val_loss']:.4g} lr {row['lr']:.3g}", flush=True)

    res = train_dynamics(trajs, model, tcfg, lcfg, log=log if not args.quiet else None)
    checkpoint_save(res.model, out / "model.ckpt", seed=args.seed, step=args.epochs, extra={"best_epoch": res.best_epoch})
    write_history_csv(res.history, out / "loss.csv")
    _write_json(out / "train_config.json", {"train": asdict(tcfg), "loss": asdict(lcfg), "model": asdict(mcfg), "split": res.split})
    print(f"trained {args.epochs} epochs (best {res.best_epoch}) -> {out}")
    return 0


def cmd_rollout(args) -> int:
    from .dynamics import rollout
    from .io import write_ply
    from .scenarios import dataset_read
    from .training import checkpoint_load

    _require(args, "model", "data", "out")
    model = checkpoint_load(args.model)
    trajs = dataset_read(args.data)
    if not 0 <= args.traj < len(trajs):
        raise CliError(f"--traj {args.traj} out of range (dataset has {len(trajs)})")
    traj = trajs[args.traj]
    if traj.n_frames < args.horizon + 1:
        raise CliError(f"trajectory has {traj.n_frames} frames; --horizon {args.horizon} needs {args.horizon + 1}")
    states = rollout(traj.state_at(0, model.graph_config.n_history), traj.actuated_positions(1, args.horizon + 1), model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    colors = traj.colors()
    for k, s in enumerate(states, start=1):
        write_ply(out / f"frame_{k:04d}.ply", s.positions, colors, traj.group_ids)
    print(f"wrote {len(states)} predicted frames -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .evalreport import copy_predictor, emit_report, model_predictor, rollout_error_curve
    from .scenarios import dataset_read, read_manifest
    from .training import checkpoint_load

    _require(args, "model", "data", "out")
    model = checkpoint_load(args.model)
    trajs = dataset_read(args.data)
    split = args.split
    if split == "auto":
        split = read_manifest(args.data).get("split", "interpolate")
    curves = {
        "model": rollout_error_curve(model_predictor(model), trajs, args.horizon, split),
        "copy_last_state": rollout_error_curve(copy_predictor, trajs, args.horizon, split),
    }
    metrics = {
        "curves": curves,
        "mean_chamfer_model": curves["model"].mean(),
        "mean_chamfer_copy": curves["copy_last_state"].mean(),
        "n_trajectories": len(trajs),
    }
    config = {"model": str(args.model), "data": str(args.data), "horizon": args.horizon, "split": split}
    written = emit_report(metrics, args.out, config, figure=not args.no_figure)
    print(f"{split}: model {metrics['mean_chamfer_model']:.4g} vs copy {metrics['mean_chamfer_copy']:.4g} -> {written['json'].parent}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intuit3d",
        description=f"Toy 3D intuitive-physics pipeline. Path settings may also come from {ENV_PREFIX}OUT, {ENV_PREFIX}DATA, {ENV_PREFIX}MODEL and {ENV_PREFIX}FIELD.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    c = _Command(sub, "gen-data", "simulate a toy scenario and write a dataset directory", cmd_gen_data)
    c.flag("--scenario", "shake", "scenario kind", str, choices=["shake", "push", "pour"])
    c.flag("--trajs", 20, "number of trajectories", int)
    c.flag("--frames", 60, "frames per trajectory", int)
    c.flag("--seed", 0, "run seed; per-trajectory seeds derive from it", int)
    c.flag("--out", None, "output dataset directory", str)
    c.flag("--n-particles", None, "override the free-particle count", _optional(int))
    c.flag("--extrapolate", False, "use out-of-range scene parameters and tag the split", action="store_true")
    c.flag("--view-trajs", 1, "render views for the first N trajectories", int)
    c.flag("--view-frames", 1, "render views for the first N frames of those trajectories", int)
    c.flag("--cameras", 6, "cameras on the ring", int)
    c.flag("--image-size", 32, "image side in pixels", int)
    c.flag("--blob-radius", 0.025, "Gaussian blob radius used to draw particles", float)
    c.flag("--blob-density", 400.0, "peak density of each particle blob", float)
    c.flag("--render-samples", 256, "samples per ray when rendering the views", int)
    c.flag("--backdrops", "0,0,0;1,1,1", "backdrop colours as r,g,b;r,g,b; each camera is rendered once per backdrop", str)

    c = _Command(sub, "fit-field", "fit a voxel radiance field to the rendered views of one frame", cmd_fit_field)
    c.flag("--data", None, "dataset directory", str)
    c.flag("--traj", 0, "trajectory index", int)
    c.flag("--frame", 0, "frame index", int)
    c.flag("--box", None, "fit box as x0,y0,z0,x1,y1,z1; defaults to the scenario workspace", _optional(str))
    c.flag("--resolution", None, "voxels per axis; unset puts voxels on the extraction lattice", _optional(int))
    c.flag("--steps", 1000, "optimisation steps", int)
    c.flag("--rays", 1024, "rays per step", int)
    c.flag("--samples", 96, "samples per ray", int)
    c.flag("--lr", 0.05, "Adam learning rate", float)
    c.flag("--lr-end", None, "final learning rate for log-linear decay", _optional(float))
    c.flag("--init-sigma", 1.0, "initial density (sparse start)", float)
    c.flag("--density-scale", 100.0, "density = scale * softplus(logit)", float)
    c.flag("--occupancy-weight", 0.1, "weight of the voxel occupancy prior (0 disables it)", float)
    c.flag("--occupancy-cell", None, "cell edge for the prior's occupancy", _optional(float))
    c.flag("--extract-res", 40, "extraction grid points per axis the voxels and the prior's cell follow", int)
    c.flag("--seed", 0, "ray sampling seed", int)
    c.flag("--out", None, "output directory for field.ckpt and loss.csv", str)

    c = _Command(sub, "extract-points", "threshold a fitted field into a labelled, FPS-subsampled PLY cloud", cmd_extract_points)
    c.flag("--field", None, "field checkpoint", str)
    c.flag("--data", None, "dataset directory for colour rules (default: the one the field was fitted on)", _optional(str))
    c.flag("--grid-res", 40, "extraction grid points per axis", int)
    c.flag("--threshold", 0.99, "occupancy threshold", float)
    c.flag("--ratio", 0.1, "FPS keep ratio per object", float)
    c.flag("--rule-radius", 0.25, "RGB ball radius of each colour rule", float)
    c.flag("--keep-background", False, "also keep unmatched points", action="store_true")
    c.flag("--out", None, "output directory", str)

    c = _Command(sub, "train-dyn", "train the particle dynamics model", cmd_train_dyn)
    c.flag("--data", None, "dataset directory", str)
    c.flag("--epochs", 30, "training epochs", int)
    c.flag("--seed", 0, "initialisation, split and sampling seed", int)
    c.flag("--lr", 1e-3, "initial learning rate", float)
    c.flag("--batch-size", 4, "samples per Adam step", int)
    c.flag("--samples-per-epoch", 64, "sampled (trajectory, frame) pairs per epoch; none for all", _optional(int))
    c.flag("--rollout-steps", 2, "steps in the rollout loss", int)
    c.flag("--patience", 3, "plateau epochs before decay", int)
    c.flag("--decay", 0.2, "learning-rate decay factor", float)
    c.flag("--clip-norm", None, "global gradient-norm clip", _optional(float))
    c.flag("--hidden", 64, "hidden width", int)
    c.flag("--propagation-steps", 3, "message-passing rounds", int)
    c.flag("--delta", 0.15, "neighbour radius in metres", float)
    c.flag("--d-min", 0.002, "spacing-loss distance floor", float)
    c.flag("--spacing-weight", 10.0, "spacing-loss weight", float)
    c.flag("--quiet", False, "suppress per-epoch logging", action="store_true")
    c.flag("--out", None, "output directory for model.ckpt and loss.csv", str)

    c = _Command(sub, "rollout", "open-loop rollout of one trajectory, one PLY per predicted frame", cmd_rollout)
    c.flag("--model", None, "model checkpoint", str)
    c.flag("--data", None, "dataset directory", str)
    c.flag("--traj", 0, "trajectory index", int)
    c.flag("--horizon", 24, "predicted frames", int)
    c.flag("--out", None, "output directory", str)

    c = _Command(sub, "eval", "rollout Chamfer curves against the copy-last-state baseline", cmd_eval)
    c.flag("--model", None, "model checkpoint", str)
    c.flag("--data", None, "dataset directory", str)
    c.flag("--horizon", 24, "rollout horizon", int)
    c.flag("--split", "auto", "split tag (auto reads the dataset manifest)", str, choices=["auto", "interpolate", "extrapolate"])
    c.flag("--no-figure", False, "skip the PNG figure", action="store_true")
    c.flag("--out", None, "report directory", str)
    return parser


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    cmd: _Command = ns._command
    try:
        args = cmd.resolve(ns, os.environ if environ is None else environ)
        return cmd.run(args)
    except (CliError, ValueError, OSError) as exc:  # dataset and checkpoint errors are ValueErrors
        print(f"intuit3d {cmd.name}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
