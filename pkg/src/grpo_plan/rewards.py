"""Composite rollout reward: trajectory, meta action, repetition, format."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .grammar import GrammarError, parse, think_section
from .world import MetaAction, Scene, Trajectory


@dataclass(frozen=True)
class RewardWeights:
    w_t: float = 1.0
    w_m: float = 1.0
    w_f: float = 1.0
    w_r: float = 1.0

    def __post_init__(self):
        for name in ("w_t", "w_m", "w_f", "w_r"):
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"reward weight {name} must be finite and >= 0, got {w!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    d: float
    r_traj: float
    r_meta: float
    p_rep: float
    r_fmt: float
    total: float
    error: Optional[str] = None

    def as_row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "error"}


def trajectory_reward(pred: Trajectory, gt: Trajectory, per_waypoint: bool = False) -> tuple[float, float]:
    """Distance ``d`` and the sigmoid-style reward ``2 e^-d / (1 + e^-d)``.

    ``d`` is the Euclidean norm of the flattened 12-vector difference, or the
    mean per-waypoint distance when ``per_waypoint`` is set.
    """
    diff = pred.waypoints - gt.waypoints
    if per_waypoint:
        d = float(np.linalg.norm(diff, axis=1).mean())
    else:
        d = float(np.linalg.norm(diff.ravel()))
    e = math.exp(-d)
    return d, 2.0 * e / (1.0 + e)


def meta_action_reward(pred: Optional[MetaAction], gt: MetaAction) -> float:
    """Half a point each for the lateral and the longitudinal decision."""
    if pred is None:
        return 0.0
    return 0.5 * (pred.lateral == gt.lateral) + 0.5 * (pred.longitudinal == gt.longitudinal)


def repetition_penalty(token_ids: Sequence[int], n: int = 4) -> float:
    """Share of think-section n-grams that repeat an earlier n-gram."""
    think = think_section(token_ids)
    if len(think) < n:
        return 0.0
    grams = [tuple(think[i:i + n]) for i in range(len(think) - n + 1)]
    seen = set()
    dup = 0
    for g in grams:
        if g in seen:
            dup += 1
        else:
            seen.add(g)
    return dup / len(grams)


def format_reward(token_ids: Sequence[int]) -> float:
    try:
        parse(token_ids)
    except GrammarError:
        return 0.0
    return 1.0


def composite_reward(
    token_ids: Sequence[int],
    scene: Scene,
    weights: RewardWeights = RewardWeights(),
    ngram: int = 4,
    per_waypoint: bool = False,
) -> RewardBreakdown:
    """Score one rollout against its scene.

    Unparsable rollouts get zero trajectory, meta and format reward; the
    repetition penalty still applies to whatever think tokens they contain.
    """
    p_rep = repetition_penalty(token_ids, ngram)
    try:
        response = parse(token_ids)
    except GrammarError as exc:
        total = -weights.w_r * p_rep
        return RewardBreakdown(math.nan, 0.0, 0.0, p_rep, 0.0, total, exc.kind)
    d, r_traj = trajectory_reward(response.trajectory, scene.gt_trajectory, per_waypoint)
    r_meta = meta_action_reward(response.meta, scene.gt_meta)
    total = weights.w_t * r_traj + weights.w_m * r_meta + weights.w_f * 1.0 - weights.w_r * p_rep
    return RewardBreakdown(d, r_traj, r_meta, p_rep, 1.0, total)
