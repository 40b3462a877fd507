"""Supervised stage: direct-trajectory proxy, short/long routing, SFT."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import policy
from .grammar import GrammarError, Response, build_response, parse
from .metrics import l2_at_horizons
from .optim import OPTIMIZERS, make_optimizer
from .policy import PolicySnapshot, Role
from .world import CotLength, DatasetError, Scene, emit_cot, iter_records, scene_from_record, scene_to_record


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 0.01
    steps: int = 6000
    batch_size: int = 32
    proxy_steps: int = 1000
    route_threshold: float = 0.5
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.0

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")
        if self.steps < 1 or self.batch_size < 1 or self.proxy_steps < 1:
            raise ValueError("steps, proxy_steps and batch_size must be positive")
        if not self.route_threshold > 0:
            raise ValueError("route_threshold must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class SftResult:
    snapshot: PolicySnapshot
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def _as_ids(target) -> tuple:
    if isinstance(target, Response):
        return target.token_ids
    return tuple(int(t) for t in target)


def dataset_loss(theta, scenes: Sequence[Scene], targets: Sequence) -> float:
    """Mean negative log-likelihood of ``targets`` over the whole set."""
    feats = np.stack([policy.scene_features(s) for s in scenes])
    traces = [policy.trace(_as_ids(t)) for t in targets]
    return float(-policy.batch_log_prob(theta, feats, traces).mean())


def train_sft(
    dataset: Sequence[tuple[Scene, object]],
    config: SftConfig = SftConfig(),
    init: Optional[np.ndarray] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> SftResult:
    """Fit the policy to ``(scene, target)`` pairs by minibatch descent on NLL.

    ``losses[i]`` is the minibatch loss evaluated before update ``i``.
    Batches come from a seeded permutation, reshuffled each epoch.
    """
    if not dataset:
        raise ValueError("train_sft needs a non-empty dataset")
    t0 = time.perf_counter()
    feats = np.stack([policy.scene_features(s) for s, _ in dataset])
    traces = [policy.trace(_as_ids(t)) for _, t in dataset]
    theta = policy.zeros() if init is None else np.array(init, dtype=np.float64, copy=True)
    opt = make_optimizer(config.optimizer, theta.size, config.learning_rate, config.momentum)
    rng = np.random.default_rng([config.seed, 0x5F7])
    n = len(dataset)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    losses = []
    for step in range(config.steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        logp, grad = policy.batch_log_prob_grad(theta, feats[idx], [traces[i] for i in idx])
        loss = float(-logp.mean())
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite loss {loss!r} at SFT step {step}")
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
        grad *= -1.0 / bs
        opt.step(theta, grad)
    return SftResult(PolicySnapshot(theta, Role.CURRENT, config.steps), losses, time.perf_counter() - t0)


def proxy_target(scene: Scene) -> Response:
    """Empty think section followed by the ground-truth trajectory."""
    return build_response([], scene.gt_trajectory)


def train_proxy(scenes: Sequence[Scene], config: SftConfig = SftConfig(), **kwargs) -> SftResult:
    """``train_sft`` on empty-think targets for ``config.proxy_steps`` steps."""
    return train_sft([(s, proxy_target(s)) for s in scenes], replace(config, steps=config.proxy_steps), **kwargs)


# ---------------------------------------------------------------------------
# routing


@dataclass(frozen=True)
class RoutedEntry:
    scene: Scene
    cot_length: CotLength
    target: Response
    proxy_l2: float


@dataclass
class RoutedDataset:
    entries: list

    def __len__(self):
        return len(self.entries)

    def pairs(self) -> list[tuple[Scene, Response]]:
        return [(e.scene, e.target) for e in self.entries]

    def counts(self) -> dict:
        out = {c.value: 0 for c in CotLength}
        for e in self.entries:
            out[e.cot_length.value] += 1
        return out


def route_target(scene: Scene, length: CotLength | str) -> Response:
    return build_response(emit_cot(scene, length), scene.gt_trajectory)


def proxy_l2(proxy, scenes: Sequence[Scene]) -> np.ndarray:
    """Greedy-decode average L2 per scene; unparsable decodes give ``inf``."""
    theta = getattr(proxy, "theta", proxy)
    feats = np.stack([policy.scene_features(s) for s in scenes])
    outs = policy.sample_batch(theta, feats, None, range(len(scenes)))
    vals = np.empty(len(scenes))
    for i, (ids, s) in enumerate(zip(outs, scenes)):
        try:
            vals[i] = l2_at_horizons(parse(ids).trajectory, s.gt_trajectory)["avg"]
        except GrammarError:
            vals[i] = math.inf
    return vals


def route_by_l2(scenes: Sequence[Scene], l2: Sequence[float], threshold: float) -> RoutedDataset:
    """Short CoT when the proxy's average L2 is within ``threshold``, else long."""
    entries = []
    for s, d in zip(scenes, l2):
        length = CotLength.SHORT if d <= threshold else CotLength.LONG
        entries.append(RoutedEntry(s, length, route_target(s, length), float(d)))
    return RoutedDataset(entries)


def route_scenes(proxy, scenes: Sequence[Scene], threshold: float) -> RoutedDataset:
    return route_by_l2(scenes, proxy_l2(proxy, scenes), threshold)


def write_routed(dataset: RoutedDataset, path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for e in dataset.entries:
            rec = scene_to_record(e.scene)
            rec["cot_length"] = e.cot_length.value
            rec["proxy_l2"] = e.proxy_l2 if math.isfinite(e.proxy_l2) else None
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")
    return len(dataset)


def read_routed(path) -> RoutedDataset:
    entries = []
    for lineno, rec in iter_records(path):
        try:
            scene = scene_from_record(rec)
            length = CotLength(rec["cot_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{Path(path).name}: bad routed record on line {lineno}: {exc}") from exc
        d = rec.get("proxy_l2")
        entries.append(RoutedEntry(scene, length, route_target(scene, length), math.inf if d is None else float(d)))
    return RoutedDataset(entries)


def is_routed(path) -> bool:
    """True if the first record of a JSON-Lines file carries a routing label."""
    for _, rec in iter_records(path):
        return "cot_length" in rec
    return False


def write_loss_csv(losses: Sequence[float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def config_dict(config: SftConfig) -> dict:
    return asdict(config)
