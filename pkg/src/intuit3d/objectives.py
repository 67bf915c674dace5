"""Correspondence-free point-set losses.

Every loss accepts either plain arrays or autodiff nodes and returns a scalar
node, so the same code serves evaluation and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .numerics import autodiff as ad

BRUTE_FORCE_LIMIT = 2000


@dataclass(frozen=True)
class LossConfig:
    # d_min gates the *squared* nearest-neighbour distance
    d_min: float = 0.08
    spacing_weight: float = 10.0

    def __post_init__(self):
        if self.d_min < 0 or self.spacing_weight < 0:
            raise ValueError("d_min and spacing_weight must be non-negative")


def _node(x) -> ad.Node:
    return x if isinstance(x, ad.Node) else ad.const(x)


def pairwise_sqdist(a, b) -> ad.Node:
    """(|a|, |b|) matrix of squared distances, differentiable in both sets."""
    a, b = _node(a), _node(b)
    n, m = a.shape[0], b.shape[0]
    ia = np.repeat(np.arange(n), m)
    jb = np.tile(np.arange(m), n)
    d = ad.sqnorm(ad.sub(ad.gather(a, ia), ad.gather(b, jb)))
    return ad.reshape(d, (n, m))


def _nearest_index(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # kd-tree tie-breaking is not guaranteed lowest-index; only used above the brute-force limit
    _, idx = cKDTree(dst).query(src, k=1)
    return np.asarray(idx, dtype=np.int64)


def _directed_mean(a: ad.Node, b: ad.Node) -> ad.Node:
    """mean over a of min over b of squared distance (large-set path)."""
    idx = _nearest_index(a.value, b.value)
    return ad.mean(ad.sqnorm(ad.sub(a, ad.gather(b, idx))))


def chamfer(a, b) -> ad.Node:
    """Symmetric mean squared nearest-neighbour distance between two sets."""
    a, b = _node(a), _node(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance of an empty point set is undefined")
    if max(a.shape[0], b.shape[0]) <= BRUTE_FORCE_LIMIT:
        d = pairwise_sqdist(a, b)
        return ad.add(ad.mean(ad.min_select(d, axis=1)), ad.mean(ad.min_select(d, axis=0)))
    return ad.add(_directed_mean(a, b), _directed_mean(b, a))


def spacing_loss(points, d_min: float) -> ad.Node:
    """Sum over points of relu(d_min - nearest squared distance)**2."""
    v = _node(points)
    n = v.shape[0]
    if n < 2:
        return ad.const(0.0)
    if n <= BRUTE_FORCE_LIMIT:
        nn = ad.min_select(pairwise_sqdist(v, v), axis=1, exclude_diag=True)
    else:
        _, idx = cKDTree(v.value).query(v.value, k=2)
        nn = ad.sqnorm(ad.sub(v, ad.gather(v, idx[:, 1])))
    gap = ad.relu(ad.add_const(ad.scale(nn, -1.0), d_min))
    return ad.total(ad.mul(gap, gap))


def step_loss(predicted, target, config: LossConfig = LossConfig()) -> ad.Node:
    """Chamfer to the target plus weighted spacing penalty on the prediction."""
    loss = chamfer(predicted, target)
    if config.spacing_weight:
        loss = ad.add(loss, ad.scale(spacing_loss(predicted, config.d_min), config.spacing_weight))
    return loss


def grouped_step_loss(predicted, target, pred_groups, target_groups, config: LossConfig) -> ad.Node:
    """Per-group step losses, summed in ascending group order."""
    predicted = _node(predicted)
    pred_groups = np.asarray(pred_groups)
    target_groups = np.asarray(target_groups)
    target = np.asarray(target.value if isinstance(target, ad.Node) else target)
    total = None
    for gid in np.unique(pred_groups):
        sel = np.flatnonzero(pred_groups == gid)
        tsel = target_groups == gid
        if not tsel.any():
            raise ValueError(f"group {gid} missing from target")
        term = step_loss(ad.gather(predicted, sel), target[tsel], config)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no predicted points to score")
    return total


def chamfer_np(a: np.ndarray, b: np.ndarray) -> float:
    """Plain numpy Chamfer distance for evaluation code."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set is undefined")
    _, ia = cKDTree(b).query(a, k=1)
    _, ib = cKDTree(a).query(b, k=1)
    # squared distances recomputed directly so values match a brute-force scan bit for bit
    return float(np.mean(np.sum((a - b[ia]) ** 2, axis=-1)) + np.mean(np.sum((b - a[ib]) ** 2, axis=-1)))


def _free_loss(pred: ad.Node, target: np.ndarray, state, config: LossConfig) -> ad.Node:
    free = np.flatnonzero(~state.driven)
    groups = state.group_ids[free]
    return grouped_step_loss(ad.gather(pred, free), np.asarray(target)[free], groups, groups, config)


def rollout_loss(
    state,
    targets: np.ndarray,
    actuated: np.ndarray,
    model,
    config: LossConfig = LossConfig(),
    params: dict[str, ad.Node] | None = None,
    shapes=None,
    rigid: bool = True,
) -> ad.Node:
    """Summed step losses of a k-step open-loop prediction.

    ``targets[s]`` are the full (N, 3) positions at t+s+1 and
    ``actuated[s]`` the driven particles' positions at the same frame.  Each
    step consumes the previous prediction, so gradients flow through every
    step.  Only non-driven particles are scored, group by group.
    """
    from .dynamics import advance, predict_positions

    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 3 or targets.shape[0] < 1 or len(actuated) < targets.shape[0]:
        raise ValueError("need one target and one actuated frame per predicted step")
    if not np.any(~state.driven):
        raise ValueError("no free particles to score")
    p = params if params is not None else model.param_nodes()
    pos = None
    total = None
    for s in range(targets.shape[0]):
        pos = predict_positions(state, actuated[s], model, p, positions=pos, shapes=shapes, rigid=rigid)
        term = _free_loss(pos, targets[s], state, config)
        total = term if total is None else ad.add(total, term)
        state = advance(state, pos.value)
    return total


def two_step_loss(state, targets, actuated, model, config: LossConfig = LossConfig(), params=None, shapes=None, rigid: bool = True) -> ad.Node:
    """Step loss at t+1 plus step loss at t+2 predicted from the model's own t+1 output."""
    if len(targets) != 2:
        raise ValueError("two_step_loss needs targets for exactly two steps")
    return rollout_loss(state, targets, actuated, model, config, params, shapes, rigid)
