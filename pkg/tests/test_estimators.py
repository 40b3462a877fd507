import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from grpo_plan import policy
from grpo_plan.estimators import GrpoPlanner, SceneFeaturizer, SftPlanner
from grpo_plan.world import CotLength, generate_scenes


def test_params_and_clone():
    est = SftPlanner(steps=7, routing="long", random_state=3)
    assert est.get_params()["steps"] == 7
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert clone(GrpoPlanner(G=4)).get_params()["G"] == 4


def test_featurizer_shape(small_scenes):
    feats = SceneFeaturizer().fit_transform(small_scenes[:5])
    assert feats.shape == (5, policy.N_FEATURES)


def test_sft_planner_fit_predict(small_scenes):
    est = SftPlanner(steps=20, proxy_steps=10, batch_size=8).fit(small_scenes[:12])
    pred = est.predict(small_scenes[:4])
    assert pred.shape == (4, 6, 2)
    assert est.loss_curve_.shape == (20,)
    assert sum(est.routed_.counts().values()) == 12
    assert est.score(small_scenes[:4]) <= 0.0


def test_fixed_length_routing(small_scenes):
    est = SftPlanner(steps=2, routing="short").fit(small_scenes[:4])
    assert est.proxy_ is None
    assert all(e.cot_length is CotLength.SHORT for e in est.routed_.entries)
    with pytest.raises(ValueError):
        SftPlanner(routing="medium").fit(small_scenes[:4])


def test_grpo_planner_continues_from_snapshot(small_scenes):
    start = policy.PolicySnapshot(policy.random_theta(0, 0.1), version=4)
    est = GrpoPlanner(init=start, G=3, iterations=2, batch_size=3).fit(small_scenes[:6])
    assert est.snapshot_.version == 6
    assert len(est.curves_) == 2
    assert est.predict(small_scenes[:2]).shape == (2, 6, 2)


def test_unfitted_and_bad_input():
    with pytest.raises(NotFittedError):
        SftPlanner().predict(generate_scenes(1, 0))
    with pytest.raises(TypeError):
        SftPlanner().fit("scenes.jsonl")
    with pytest.raises(ValueError):
        SftPlanner().fit([])
    with pytest.raises(TypeError):
        SceneFeaturizer().fit([1, 2])
