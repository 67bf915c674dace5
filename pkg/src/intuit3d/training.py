"""Dynamics training: (trajectory, frame) sampling, k-step loss, Adam, plateau decay."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import DynamicsModel, ModelConfig, predict_positions
from .graph import GraphConfig
from .numerics import AdamState, ExprGraph, adam_step, backward, clip_by_global_norm, load_params, save_params
from .numerics import autodiff as ad
from .objectives import LossConfig, grouped_step_loss, rollout_loss
from .scenarios import Trajectory


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    plateau_patience: int = 3
    lr_decay_factor: float = 0.2
    seed: int = 0
    rollout_steps: int = 2
    samples_per_epoch: int | None = None  # None: every (trajectory, frame) pair once
    train_fraction: float = 0.8
    val_stride: int = 5  # validation frames per held-out trajectory: every val_stride-th
    clip_norm: float | None = None
    rigid: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("patience and batch_size must be >= 1, epochs >= 0")
        if self.rollout_steps not in (1, 2):
            raise ValueError("rollout_steps must be 1 or 2")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ScheduleState:
    best: float
    since_improvement: int
    lr: float

    @classmethod
    def initial(cls, lr: float) -> "ScheduleState":
        return cls(math.inf, 0, lr)


def lr_schedule_update(state: ScheduleState, val_loss: float, patience: int = 3, decay: float = 0.2) -> ScheduleState:
    """Reset on strict improvement; decay after ``patience`` consecutive misses."""
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss < state.best:
        return ScheduleState(val_loss, 0, state.lr)
    since = state.since_improvement + 1
    if since >= patience:
        return ScheduleState(state.best, 0, state.lr * decay)
    return ScheduleState(state.best, since, state.lr)


@dataclass
class TrainResult:
    model: DynamicsModel  # best validation checkpoint
    final_params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    split: dict = field(default_factory=dict)


def split_trajectories(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded 80/20-style split by trajectory index; both sides non-empty when n >= 2."""
    if n < 2:
        raise ValueError("need at least two trajectories to split")
    order = np.random.default_rng([seed, 17]).permutation(n)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def training_pairs(trajectories: Sequence[Trajectory], indices: Sequence[int], n_history: int, steps: int) -> list[tuple[int, int]]:
    pairs = []
    for k in indices:
        for t in range(n_history, trajectories[k].n_frames - steps):
            pairs.append((k, t))
    return pairs


def sample_loss(traj: Trajectory, t: int, model: DynamicsModel, loss_cfg: LossConfig, steps: int, params, rigid: bool) -> ad.Node:
    state = traj.state_at(t, model.graph_config.n_history)
    targets = traj.positions[t + 1 : t + 1 + steps]
    actuated = traj.actuated_positions(t + 1, t + 1 + steps)
    return rollout_loss(state, targets, actuated, model, loss_cfg, params, rigid=rigid)


def validation_loss(trajectories: Sequence[Trajectory], indices: Sequence[int], model: DynamicsModel, loss_cfg: LossConfig, stride: int, rigid: bool) -> float:
    """Mean one-step step loss over held-out frames."""
    vals = []
    nh = model.graph_config.n_history
    for k in indices:
        traj = trajectories[k]
        for t in range(nh, traj.n_frames - 1, stride):
            state = traj.state_at(t, nh)
            pred = predict_positions(state, traj.actuated_positions(t + 1, t + 2)[0], model, rigid=rigid).value
            free = np.flatnonzero(~state.driven)
            g = state.group_ids[free]
            vals.append(float(grouped_step_loss(pred[free], traj.positions[t + 1][free], g, g, loss_cfg).value))
    if not vals:
        raise ValueError("validation split has no usable frames")
    return float(np.mean(vals))


def train_dynamics(
    trajectories: Sequence[Trajectory],
    model: DynamicsModel,
    config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig(),
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on batched k-step losses; validation drives the plateau schedule and best checkpoint."""
    train_idx, val_idx = split_trajectories(len(trajectories), config.train_fraction, config.seed)
    pairs = training_pairs(trajectories, train_idx, model.graph_config.n_history, config.rollout_steps)
    if not pairs:
        raise ValueError("training split has no usable (trajectory, frame) pairs")
    rng = np.random.default_rng([config.seed, 29])
    params = {k: v.copy() for k, v in model.params.items()}
    adam = AdamState()
    sched = ScheduleState.initial(config.lr)
    best_params = {k: v.copy() for k, v in params.items()}
    result = TrainResult(model, params, split={"train": train_idx, "val": val_idx})
    for epoch in range(config.epochs):
        if config.samples_per_epoch is None:
            order = [pairs[i] for i in rng.permutation(len(pairs))]
        else:
            order = [pairs[i] for i in rng.integers(0, len(pairs), size=config.samples_per_epoch)]
        losses = []
        for b in range(0, len(order), config.batch_size):
            batch = order[b : b + config.batch_size]
            nodes = {name: ad.param(v, name) for name, v in params.items()}
            cur = model.with_params(params)
            where = f"epoch {epoch}, batch {b // config.batch_size}: samples {batch}"
            total = None
            try:
                for traj_i, t in batch:
                    term = sample_loss(trajectories[traj_i], t, cur, loss_config, config.rollout_steps, nodes, config.rigid)
                    total = term if total is None else ad.add(total, term)
            except np.linalg.LinAlgError as exc:  # rigid fit on non-finite predictions
                raise FloatingPointError(f"non-finite prediction in {where}") from exc
            loss = ad.scale(total, 1.0 / len(batch))
            value = float(loss.value)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss in {where}")
            grads = backward(ExprGraph(loss))
            grads = {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}
            if config.clip_norm is not None:
                grads = clip_by_global_norm(grads, config.clip_norm)
            params, adam = adam_step(params, grads, adam, sched.lr)
            losses.append(value)
        current = model.with_params(params)
        val = validation_loss(trajectories, val_idx, current, loss_config, config.val_stride, config.rigid)
        if val < sched.best:
            best_params = {k: v.copy() for k, v in params.items()}
            result.best_epoch = epoch
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": sched.lr}
        sched = lr_schedule_update(sched, val, config.plateau_patience, config.lr_decay_factor)
        result.history.append(row)
        if log is not None:
            log(row)
    result.model = model.with_params(best_params)
    result.final_params = params
    return result


def write_history_csv(history: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


def checkpoint_save(model: DynamicsModel, path: str | Path, seed: int = 0, step: int = 0, extra: dict | None = None) -> None:
    meta = {"model": asdict(model.config), "graph": {"delta": model.graph_config.delta, "n_history": model.graph_config.n_history}}
    meta.update(extra or {})
    save_params(path, model.params, seed=seed, step=step, meta=meta)


def checkpoint_load(path: str | Path) -> DynamicsModel:
    params, header = load_params(path)
    meta = header.get("meta", {})
    cfg = ModelConfig(**meta.get("model", {}))
    g = meta.get("graph", {})
    gcfg = GraphConfig(delta=g.get("delta", 0.15), n_history=g.get("n_history", 3))
    return DynamicsModel(gcfg, cfg, params)


def toy_presets() -> tuple[ModelConfig, TrainConfig, LossConfig]:
    """Desk-scale settings used by the CLI defaults and the acceptance runs."""
    return (
        ModelConfig(hidden=64),
        TrainConfig(lr=1e-3, epochs=30, samples_per_epoch=64),
        LossConfig(d_min=0.002, spacing_weight=10.0),
    )
