"""scikit-learn style wrappers around the training stages.

Inputs ``X`` are sequences of ``Scene`` objects; predictions are arrays of
shape ``(n, 6, 2)`` holding greedy-decoded waypoints (NaN rows where the
decode does not parse).  ``score`` is the negative average L2 so that
larger is better, as scikit-learn model selection expects.
"""

from __future__ import annotations

import math
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import policy
from .grammar import GrammarError, parse
from .grpo import GrpoConfig, train_rft
from .metrics import EvalReport, evaluate
from .policy import PolicySnapshot
from .rewards import RewardWeights
from .sft import SftConfig, route_by_l2, route_scenes, train_proxy, train_sft
from .world import N_WAYPOINTS, CotLength, Scene


def check_scenes(X, name: str = "X") -> list[Scene]:
    """Validate a non-empty sequence of scenes and return it as a list."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError(f"{name} must be a sequence of Scene objects, got {type(X).__name__}")
    scenes = list(X)
    if not scenes:
        raise ValueError(f"{name} is empty")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected Scene")
    return scenes


class SceneFeaturizer(TransformerMixin, BaseEstimator):
    """Scenes to the fixed-length conditioning matrix used by the policy."""

    def fit(self, X, y=None):
        check_scenes(X)
        self.n_features_out_ = policy.N_FEATURES
        return self

    def transform(self, X):
        return np.stack([policy.scene_features(s) for s in check_scenes(X)])


class _PolicyEstimator(BaseEstimator):
    def _theta(self):
        check_is_fitted(self, "snapshot_")
        return self.snapshot_.theta

    def decode(self, X) -> list[list[int]]:
        scenes = check_scenes(X)
        feats = np.stack([policy.scene_features(s) for s in scenes])
        return policy.sample_batch(self._theta(), feats, None, range(len(scenes)))

    def predict(self, X) -> np.ndarray:
        outputs = self.decode(X)
        out = np.full((len(outputs), N_WAYPOINTS, 2), np.nan)
        for i, ids in enumerate(outputs):
            try:
                out[i] = parse(ids).trajectory.waypoints
            except GrammarError:
                pass
        return out

    def evaluate(self, X) -> EvalReport:
        return evaluate(self._theta(), check_scenes(X))

    def score(self, X, y=None) -> float:
        avg = self.evaluate(X).l2["avg"]
        return -avg if math.isfinite(avg) else -math.inf


class SftPlanner(_PolicyEstimator):
    """Proxy, routing and supervised training in one ``fit``.

    ``routing="fast_slow"`` trains the direct-trajectory proxy and routes
    each scene to short or long reasoning by its proxy L2; ``"long"`` and
    ``"short"`` skip the proxy and use one length for every scene.
    """

    def __init__(
        self,
        learning_rate: float = 0.01,
        steps: int = 6000,
        batch_size: int = 32,
        route_threshold: float = 0.5,
        proxy_steps: int = 1000,
        routing: str = "fast_slow",
        optimizer: str = "adam",
        momentum: float = 0.0,
        random_state: int = 0,
    ):
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.route_threshold = route_threshold
        self.proxy_steps = proxy_steps
        self.routing = routing
        self.optimizer = optimizer
        self.momentum = momentum
        self.random_state = random_state

    def _config(self, seed_offset: int) -> SftConfig:
        return SftConfig(
            learning_rate=self.learning_rate,
            steps=self.steps,
            proxy_steps=self.proxy_steps,
            batch_size=self.batch_size,
            route_threshold=self.route_threshold,
            seed=self.random_state + seed_offset,
            optimizer=self.optimizer,
            momentum=self.momentum,
        )

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        if self.routing not in ("fast_slow", "long", "short"):
            raise ValueError(f"routing must be 'fast_slow', 'long' or 'short', got {self.routing!r}")
        self.proxy_ = None
        if self.routing == "fast_slow":
            self.proxy_ = train_proxy(scenes, self._config(1)).snapshot
            routed = route_scenes(self.proxy_, scenes, self.route_threshold)
        else:
            length = CotLength(self.routing)
            routed = route_by_l2(scenes, [0.0 if length is CotLength.SHORT else math.inf] * len(scenes), 1.0)
        self.routed_ = routed
        result = train_sft(routed.pairs(), self._config(0))
        self.snapshot_ = result.snapshot
        self.loss_curve_ = np.asarray(result.losses)
        return self


class GrpoPlanner(_PolicyEstimator):
    """GRPO fine-tuning starting from ``init`` (a snapshot or parameter vector).

    Without ``init`` the run starts from the uniform (all-zero) policy.
    """

    def __init__(
        self,
        init=None,
        G: int = 6,
        epsilon: float = 0.2,
        beta: float = 0.04,
        learning_rate: float = 2e-4,
        iterations: int = 200,
        batch_size: int = 32,
        temperature: float = 1.0,
        old_refresh_every: int = 1,
        w_t: float = 1.0,
        w_m: float = 1.0,
        w_f: float = 1.0,
        w_r: float = 1.0,
        random_state: int = 0,
    ):
        self.init = init
        self.G = G
        self.epsilon = epsilon
        self.beta = beta
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.temperature = temperature
        self.old_refresh_every = old_refresh_every
        self.w_t = w_t
        self.w_m = w_m
        self.w_f = w_f
        self.w_r = w_r
        self.random_state = random_state

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        start = self.init if self.init is not None else policy.zeros()
        if not isinstance(start, PolicySnapshot):
            start = PolicySnapshot(start)
        config = GrpoConfig(
            G=self.G,
            epsilon=self.epsilon,
            beta=self.beta,
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            batch_size=self.batch_size,
            temperature=self.temperature,
            old_refresh_every=self.old_refresh_every,
            seed=self.random_state,
            probe_size=0,
        )
        weights = RewardWeights(self.w_t, self.w_m, self.w_f, self.w_r)
        result = train_rft(start, scenes, config, weights, probe=[])
        self.snapshot_ = result.snapshot
        self.curves_ = result.curves
        return self
