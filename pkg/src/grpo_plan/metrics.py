"""Open-loop planning metrics: horizon L2 and footprint collision rate."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import policy
from .geometry import rectangles_overlap, waypoint_headings
from .grammar import GrammarError, parse
from .world import EGO_LENGTH, EGO_WIDTH, Difficulty, Scene, Trajectory

# horizon label -> number of waypoints covered (0.5 s cadence)
HORIZONS = {"1s": 2, "2s": 4, "3s": 6}
COLUMNS = ("1s", "2s", "3s", "avg")
CONVENTIONS = ("stp3", "uniad")


def l2_at_horizons(pred: Trajectory, gt: Trajectory, convention: str = "stp3") -> dict:
    """Displacement error per horizon plus their mean under ``"avg"``.

    ``"stp3"`` averages the per-waypoint distance over every waypoint up to
    the horizon; ``"uniad"`` takes the distance at the horizon waypoint only.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown L2 convention {convention!r}; expected one of {CONVENTIONS}")
    dist = np.linalg.norm(pred.waypoints - gt.waypoints, axis=1)
    out = {}
    for name, n in HORIZONS.items():
        out[name] = float(dist[:n].mean()) if convention == "stp3" else float(dist[n - 1])
    out["avg"] = float(np.mean([out[h] for h in HORIZONS]))
    return out


def footprint_hits(pred: Trajectory, scene: Scene) -> np.ndarray:
    """Boolean (6,) array: ego footprint at waypoint k overlaps some agent."""
    wp = pred.waypoints
    heads = waypoint_headings(wp)
    hits = np.zeros(len(wp), dtype=bool)
    for k in range(len(wp)):
        for agent in scene.agents:
            # agent tracks start at t = 0, waypoints at t = 0.5
            if rectangles_overlap(
                wp[k], heads[k], EGO_LENGTH, EGO_WIDTH,
                agent.positions[k + 1], agent.headings[k + 1], agent.length, agent.width,
            ):
                hits[k] = True
                break
    return hits


def collision_at_horizons(pred: Trajectory, scene: Scene) -> dict:
    """Cumulative collision flag per horizon."""
    hits = footprint_hits(pred, scene)
    return {name: bool(hits[:n].any()) for name, n in HORIZONS.items()}


@dataclass
class EvalReport:
    l2: dict
    collision: dict
    n_samples: int
    n_parse_failures: int
    stratified: dict = field(default_factory=dict)

    @property
    def parse_failure_rate(self) -> float:
        return self.n_parse_failures / self.n_samples if self.n_samples else 0.0

    def to_dict(self) -> dict:
        return {
            "l2": self.l2,
            "collision": self.collision,
            "n_samples": self.n_samples,
            "n_parse_failures": self.n_parse_failures,
            "parse_failure_rate": self.parse_failure_rate,
            "stratified": {k: v.to_dict() for k, v in self.stratified.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            l2=dict(d["l2"]),
            collision=dict(d["collision"]),
            n_samples=int(d["n_samples"]),
            n_parse_failures=int(d["n_parse_failures"]),
            stratified={k: cls.from_dict(v) for k, v in d.get("stratified", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    def row(self) -> list[float]:
        """L2 columns in meters then collision columns in percent."""
        return [self.l2[c] for c in COLUMNS] + [100.0 * self.collision[c] for c in COLUMNS]

    def to_table(self, label: str = "policy") -> str:
        rows = [(label, self)] + [(f"  {k}", v) for k, v in sorted(self.stratified.items())]
        return format_table(rows) + f"\nparse failures: {self.n_parse_failures}/{self.n_samples}\n"


def format_table(rows: Sequence[tuple[str, Optional[EvalReport]]], notes: Mapping[str, str] | None = None) -> str:
    """Aligned text table: L2 (m) 1s/2s/3s/Avg then Collision (%) 1s/2s/3s/Avg.

    A ``None`` report prints its note (for example ``collapsed``) in place of
    the numbers.
    """
    notes = notes or {}
    width = max([len("method")] + [len(r[0]) for r in rows])
    head1 = f"{'':<{width}} | {'L2 (m)':^31} | {'Collision (%)':^31}"
    head2 = f"{'method':<{width}} | " + " ".join(f"{c.capitalize():>7}" for c in COLUMNS) + " | " + " ".join(
        f"{c.capitalize():>7}" for c in COLUMNS
    )
    lines = [head1, head2, "-" * len(head2)]
    for label, rep in rows:
        if rep is None:
            lines.append(f"{label:<{width}} | {notes.get(label, 'n/a'):^31} | {'':^31}")
            continue
        vals = rep.row()
        fmt = lambda xs: " ".join(f"{x:>7.3f}" if math.isfinite(x) else f"{'nan':>7}" for x in xs)
        lines.append(f"{label:<{width}} | {fmt(vals[:4])} | {fmt(vals[4:])}")
    return "\n".join(lines)


def _aggregate(l2_rows: list, col_rows: list, n: int, failures: int) -> EvalReport:
    if l2_rows:
        l2 = {c: float(np.mean([r[c] for r in l2_rows])) for c in COLUMNS}
        col = {h: float(np.mean([r[h] for r in col_rows])) for h in HORIZONS}
        col["avg"] = float(np.mean([col[h] for h in HORIZONS]))
    else:
        l2 = {c: math.nan for c in COLUMNS}
        col = {c: math.nan for c in COLUMNS}
    return EvalReport(l2, col, n, failures)


def score_outputs(outputs: Sequence[Sequence[int]], scenes: Sequence[Scene], convention: str = "stp3") -> EvalReport:
    """Aggregate metrics for already-decoded token sequences, one per scene."""
    if len(outputs) != len(scenes):
        raise ValueError("outputs and scenes differ in length")
    per = []
    for ids, scene in zip(outputs, scenes):
        try:
            traj = parse(ids).trajectory
        except GrammarError:
            per.append((scene.difficulty, None, None))
            continue
        per.append((scene.difficulty, l2_at_horizons(traj, scene.gt_trajectory, convention), collision_at_horizons(traj, scene)))

    def build(items):
        ok = [p for p in items if p[1] is not None]
        return _aggregate([p[1] for p in ok], [p[2] for p in ok], len(items), len(items) - len(ok))

    report = build(per)
    for diff in Difficulty:
        sub = [p for p in per if p[0] is diff]
        if sub:
            report.stratified[diff.value] = build(sub)
    return report


def evaluate(snapshot, scenes: Sequence[Scene], decode: str = "greedy", convention: str = "stp3") -> EvalReport:
    """Greedy-decode every scene and score the predictions."""
    if decode != "greedy":
        raise ValueError(f"unsupported decode mode {decode!r}")
    if not scenes:
        raise ValueError("evaluate needs at least one scene")
    theta = getattr(snapshot, "theta", snapshot)
    feats = np.stack([policy.scene_features(s) for s in scenes])
    outputs = policy.sample_batch(theta, feats, None, range(len(scenes)))
    return score_outputs(outputs, scenes, convention)
