"""Group relative policy optimisation over the planning policy.

Per scene a group of ``G`` responses is sampled from the old policy and
scored; advantages are the rewards standardised within the group.  The
objective per group is::

    J = (1/G) sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) - beta * (1/G) sum_i D_i

with the sequence-level ratio ``rho_i = pi(o_i) / pi_old(o_i)`` and the
non-negative KL estimate ``D_i = r - ln r - 1``, ``r = pi_ref(o_i) / pi(o_i)``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import policy
from .metrics import evaluate
from .optim import OPTIMIZERS, make_optimizer
from .policy import PolicySnapshot, Role
from .rewards import RewardBreakdown, RewardWeights, composite_reward
from .seeding import derive_rng, derive_seed
from .sft import TrainingError
from .world import Scene

CURVE_FIELDS = ("iteration", "mean_reward", "mean_L2", "mean_KL", "clip_fraction")


@dataclass(frozen=True)
class GrpoConfig:
    G: int = 6
    epsilon: float = 0.2
    beta: float = 0.04
    learning_rate: float = 2e-4
    iterations: int = 200
    temperature: float = 1.0
    old_refresh_every: int = 1
    advantage_std_floor: float = 1e-8
    seed: int = 0
    batch_size: int = 32
    optimizer: str = "adam"
    ngram: int = 4
    per_waypoint: bool = False
    probe_every: int = 10
    probe_size: int = 64

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be at least 2")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if not self.beta >= 0.0:
            raise ValueError("beta must be >= 0")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0 or self.batch_size < 1 or self.old_refresh_every < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and old_refresh_every >= 1 required")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.ngram < 1 or self.probe_every < 1 or self.probe_size < 0:
            raise ValueError("ngram and probe_every must be >= 1, probe_size >= 0")


# ---------------------------------------------------------------------------
# scalar pieces


def compute_advantages(rewards, std_floor: float = 1e-8) -> np.ndarray:
    """Group-standardised rewards (population std); all zero if degenerate."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("need a 1-d group of at least two rewards")
    sd = r.std()
    if not sd >= std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / sd


def clipped_contribution(rho, advantage, epsilon: float):
    """``min(rho * A, clip(rho, 1-eps, 1+eps) * A)``, elementwise."""
    rho = np.asarray(rho, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(rho * a, np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * a)
    return float(out) if out.ndim == 0 else out


def clip_active(rho, advantage, epsilon: float):
    """True where the clipped branch is selected, so the ratio gets no gradient."""
    rho = np.asarray(rho, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    return ((a > 0) & (rho > 1.0 + epsilon)) | ((a < 0) & (rho < 1.0 - epsilon))


def kl_estimate(ratio):
    """``r - ln r - 1`` for ``r = pi_ref / pi``; non-negative for r > 0."""
    r = np.asarray(ratio, dtype=np.float64)
    out = r - np.log(r) - 1.0
    return float(out) if out.ndim == 0 else out


def _ratio(log_num, log_den, what: str):
    rho = np.exp(np.asarray(log_num, dtype=np.float64) - np.asarray(log_den, dtype=np.float64))
    if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
        raise FloatingPointError(f"non-finite {what} ratio (log numerator {log_num!r}, log denominator {log_den!r})")
    return rho


def importance_weight(theta, old, features, token_ids, epsilon: float, advantage: float) -> float:
    """Clipped contribution of one rollout under ``theta`` against ``old``."""
    old_theta = getattr(old, "theta", old)
    lp = policy.log_prob(theta, features, token_ids)
    lp_old = policy.log_prob(old_theta, features, token_ids)
    return clipped_contribution(_ratio(lp, lp_old, "importance"), advantage, epsilon)


def kl_term(theta, ref, features, token_ids) -> float:
    ref_theta = getattr(ref, "theta", ref)
    lp = policy.log_prob(theta, features, token_ids)
    lp_ref = policy.log_prob(ref_theta, features, token_ids)
    return kl_estimate(_ratio(lp_ref, lp, "reference"))


# ---------------------------------------------------------------------------
# groups


@dataclass(frozen=True)
class GroupMember:
    token_ids: tuple
    reward: RewardBreakdown
    logp_old: float
    logp_ref: float


@dataclass(frozen=True)
class GroupRollout:
    scene: Scene
    features: np.ndarray
    members: tuple
    advantages: np.ndarray
    traces: tuple = field(default=(), repr=False, compare=False)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([m.reward.total for m in self.members])


def member_seeds(config: GrpoConfig, iteration: int, group: int) -> list[int]:
    return [derive_seed(config.seed, "rollout", iteration, group, i) for i in range(config.G)]


def sample_group(old, scene: Scene, config: GrpoConfig, iteration: int = 0, group: int = 0) -> list[list[int]]:
    """``G`` independent samples for one scene from the old policy."""
    theta = getattr(old, "theta", old)
    feats = np.repeat(policy.scene_features(scene)[None], config.G, axis=0)
    return policy.sample_batch(theta, feats, config.temperature, member_seeds(config, iteration, group))


def build_groups(
    old,
    ref,
    scenes: Sequence[Scene],
    config: GrpoConfig,
    weights: RewardWeights = RewardWeights(),
    iteration: int = 0,
) -> list[GroupRollout]:
    """Sample, score and standardise one group per scene (batched)."""
    old_theta = getattr(old, "theta", old)
    ref_theta = getattr(ref, "theta", ref)
    G = config.G
    base = np.stack([policy.scene_features(s) for s in scenes])
    feats = np.repeat(base, G, axis=0)
    seeds = [s for g in range(len(scenes)) for s in member_seeds(config, iteration, g)]
    seqs = policy.sample_batch(old_theta, feats, config.temperature, seeds)
    traces = [policy.trace(s) for s in seqs]
    lp_old = policy.batch_log_prob(old_theta, feats, traces)
    lp_ref = lp_old if ref_theta is old_theta else policy.batch_log_prob(ref_theta, feats, traces)
    groups = []
    for g, scene in enumerate(scenes):
        sl = slice(g * G, (g + 1) * G)
        rewards = [composite_reward(s, scene, weights, config.ngram, config.per_waypoint) for s in seqs[sl]]
        adv = compute_advantages([r.total for r in rewards], config.advantage_std_floor)
        members = tuple(
            GroupMember(tuple(s), r, float(a), float(b))
            for s, r, a, b in zip(seqs[sl], rewards, lp_old[sl], lp_ref[sl])
        )
        groups.append(GroupRollout(scene, base[g], members, adv, tuple(traces[sl])))
    return groups


def _group_arrays(groups: Sequence[GroupRollout]):
    feats = np.concatenate([np.repeat(g.features[None], len(g.members), axis=0) for g in groups])
    traces = [t for g in groups for t in (g.traces or [policy.trace(m.token_ids) for m in g.members])]
    lp_old = np.array([m.logp_old for g in groups for m in g.members])
    lp_ref = np.array([m.logp_ref for g in groups for m in g.members])
    adv = np.concatenate([g.advantages for g in groups])
    sizes = np.array([len(g.members) for g in groups])
    return feats, traces, lp_old, lp_ref, adv, sizes


def _objective_parts(lp, lp_old, lp_ref, adv, epsilon):
    rho = _ratio(lp, lp_old, "importance")
    rho_ref = _ratio(lp_ref, lp, "reference")
    return rho, rho_ref, clipped_contribution(rho, adv, epsilon), kl_estimate(rho_ref)


def grpo_objective(theta, group: GroupRollout, config: GrpoConfig) -> float:
    """Mean clipped contribution minus beta times mean KL for one group."""
    feats, traces, lp_old, lp_ref, adv, _ = _group_arrays([group])
    lp = policy.batch_log_prob(theta, feats, traces)
    _, _, contrib, kl = _objective_parts(lp, lp_old, lp_ref, adv, config.epsilon)
    return float(contrib.mean() - config.beta * kl.mean())


@dataclass
class StepStats:
    objective: float
    mean_reward: float
    mean_abs_advantage: float
    mean_kl: float
    clip_fraction: float
    format_rate: float
    mean_d: float
    mean_r_meta: float


def objective_and_gradient(theta, groups: Sequence[GroupRollout], config: GrpoConfig):
    """Batch-mean objective and its exact gradient with respect to ``theta``.

    Per rollout the gradient coefficient on ``grad log pi`` is
    ``(A rho [clip inactive] + beta (rho_ref - 1)) / G``, averaged over groups.
    """
    feats, traces, lp_old, lp_ref, adv, sizes = _group_arrays(groups)
    member_scale = np.repeat(1.0 / (sizes * len(groups)), sizes)
    parts = {}

    def coefficients(lp):
        rho, rho_ref, contrib, kl = _objective_parts(lp, lp_old, lp_ref, adv, config.epsilon)
        active = clip_active(rho, adv, config.epsilon)
        parts.update(contrib=contrib, kl=kl, active=active)
        return member_scale * (np.where(active, 0.0, adv * rho) + config.beta * (rho_ref - 1.0))

    _, grad = policy.batch_log_prob_grad(theta, feats, traces, coefficients)
    objective = float(np.sum(member_scale * (parts["contrib"] - config.beta * parts["kl"])))
    return objective, grad, parts


def _stats(groups, objective, parts) -> StepStats:
    rewards = [m.reward for g in groups for m in g.members]
    ds = [r.d for r in rewards if not math.isnan(r.d)]
    return StepStats(
        objective=objective,
        mean_reward=float(np.mean([r.total for r in rewards])),
        mean_abs_advantage=float(np.mean(np.abs(np.concatenate([g.advantages for g in groups])))),
        mean_kl=float(np.mean(parts["kl"])),
        clip_fraction=float(np.mean(parts["active"])),
        format_rate=float(np.mean([r.r_fmt for r in rewards])),
        mean_d=float(np.mean(ds)) if ds else math.nan,
        mean_r_meta=float(np.mean([r.r_meta for r in rewards])),
    )


def grpo_step(
    theta: np.ndarray,
    scenes: Sequence[Scene],
    config: GrpoConfig,
    old=None,
    ref=None,
    weights: RewardWeights = RewardWeights(),
    optimizer=None,
    iteration: int = 0,
):
    """One ascent step on the batch-mean objective.

    ``old`` and ``ref`` default to ``theta`` itself.  Without an optimizer
    the step is plain gradient ascent at ``config.learning_rate``.  Returns
    ``(new_theta, stats)``; ``theta`` is not modified.
    """
    theta = np.array(theta, dtype=np.float64, copy=True)
    old = theta if old is None else getattr(old, "theta", old)
    ref = old if ref is None else getattr(ref, "theta", ref)
    groups = build_groups(old, ref, scenes, config, weights, iteration)
    objective, grad, parts = objective_and_gradient(theta, groups, config)
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient at GRPO iteration {iteration}")
    if optimizer is None:
        theta += config.learning_rate * grad
    else:
        grad *= -1.0  # optimisers minimise
        optimizer.step(theta, grad)
    return theta, _stats(groups, objective, parts)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RftResult:
    snapshot: PolicySnapshot
    curves: list
    stats: list
    seconds: float = 0.0
    collapsed: bool = False
    error: Optional[str] = None


def _probe_l2(theta, probe: Sequence[Scene]) -> float:
    if not probe:
        return math.nan
    return evaluate(theta, probe).l2["avg"]


def train_rft(
    sft,
    scenes: Sequence[Scene],
    config: GrpoConfig = GrpoConfig(),
    weights: RewardWeights = RewardWeights(),
    probe: Optional[Sequence[Scene]] = None,
    callback: Optional[Callable[[dict], None]] = None,
    raise_on_collapse: bool = True,
) -> RftResult:
    """Run GRPO from ``sft``, which also serves as the frozen reference.

    Each iteration draws ``batch_size`` scenes, samples a group per scene
    from the old policy and takes one step.  The old policy is refreshed
    every ``old_refresh_every`` iterations.  On a non-finite step the run
    stops; with ``raise_on_collapse`` a ``TrainingError`` carrying the
    partial result is raised, otherwise the result is flagged collapsed.
    """
    if not scenes:
        raise ValueError("train_rft needs scenes")
    t0 = time.perf_counter()
    ref = sft if isinstance(sft, PolicySnapshot) else PolicySnapshot(sft)
    ref = ref.with_role(Role.REFERENCE)
    theta = np.array(ref.theta, dtype=np.float64, copy=True)
    old = PolicySnapshot(theta, Role.OLD, 0)
    opt = make_optimizer(config.optimizer, theta.size, config.learning_rate)
    if probe is None:
        probe = list(scenes[: config.probe_size])
    curves, stats = [], []
    bs = min(config.batch_size, len(scenes))
    error = None
    for it in range(config.iterations):
        if it % config.old_refresh_every == 0:
            old = PolicySnapshot(theta, Role.OLD, it)
        idx = derive_rng(config.seed, "batch", it).choice(len(scenes), bs, replace=False)
        batch = [scenes[i] for i in idx]
        try:
            with np.errstate(over="raise", invalid="raise"):
                new_theta, st = grpo_step(theta, batch, config, old, ref, weights, opt, it)
            if not np.all(np.isfinite(new_theta)):
                raise TrainingError(f"non-finite parameters after GRPO iteration {it}")
        except (TrainingError, FloatingPointError) as exc:
            error = f"iteration {it}: {exc}"
            break
        theta = new_theta
        row = {
            "iteration": it,
            "mean_reward": st.mean_reward,
            "mean_L2": _probe_l2(theta, probe) if (it + 1) % config.probe_every == 0 or it == config.iterations - 1 else math.nan,
            "mean_KL": st.mean_kl,
            "clip_fraction": st.clip_fraction,
        }
        curves.append(row)
        stats.append(st)
        if callback is not None:
            callback(row)
    result = RftResult(
        PolicySnapshot(theta, Role.CURRENT, ref.version + len(curves)),
        curves, stats, time.perf_counter() - t0, error is not None, error,
    )
    if error is not None and raise_on_collapse:
        exc = TrainingError(f"GRPO diverged at {error}")
        exc.result = result
        raise exc
    return result


def write_curves_csv(curves: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in curves:
            w.writerow({k: ("" if isinstance(row[k], float) and math.isnan(row[k]) else row[k]) for k in CURVE_FIELDS})


def config_dict(config: GrpoConfig) -> dict:
    return asdict(config)
