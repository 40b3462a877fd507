import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_plan import policy
from grpo_plan.grammar import legal_count, parse, walk
from grpo_plan.metrics import l2_at_horizons
from grpo_plan.sft import (
    SftConfig,
    TrainingError,
    dataset_loss,
    is_routed,
    proxy_l2,
    proxy_target,
    read_routed,
    route_by_l2,
    route_target,
    train_proxy,
    train_sft,
    write_loss_csv,
    write_routed,
)
from grpo_plan.world import CotLength, generate_scenes, write_dataset


def uniform_nll(ids):
    """Negative log-likelihood of a uniform choice among legal tokens."""
    return sum(math.log(legal_count(state)) for state in walk(ids))


def test_initial_loss_matches_legal_counts():
    scenes = generate_scenes(16, 1)
    data = [(s, route_target(s, "long")) for s in scenes]
    res = train_sft(data, SftConfig(steps=1, batch_size=16))
    expected = np.mean([uniform_nll(t.token_ids) for _, t in data])
    assert res.losses[0] == pytest.approx(expected, rel=1e-12)
    assert dataset_loss(policy.zeros(), scenes, [t for _, t in data]) == pytest.approx(expected, rel=1e-12)


def test_single_example_is_memorised():
    scene = generate_scenes(1, 2)[0]
    target = route_target(scene, "short")
    res = train_sft([(scene, target)], SftConfig(steps=400, learning_rate=0.05))
    assert res.losses[-1] < 0.05 * res.losses[0]
    assert list(policy.greedy(res.snapshot.theta, policy.scene_features(scene))) == list(target.token_ids)


def test_training_is_deterministic():
    scenes = generate_scenes(10, 3)
    data = [(s, proxy_target(s)) for s in scenes]
    cfg = SftConfig(steps=15, batch_size=4, seed=7)
    a, b = train_sft(data, cfg), train_sft(data, cfg)
    np.testing.assert_array_equal(a.snapshot.theta, b.snapshot.theta)
    assert a.losses == b.losses
    c = train_sft(data, SftConfig(steps=15, batch_size=4, seed=8))
    assert not np.array_equal(a.snapshot.theta, c.snapshot.theta)


def test_full_batch_smoothed_loss_decreases():
    scenes = generate_scenes(24, 4)
    data = [(s, route_target(s, "long")) for s in scenes]
    res = train_sft(data, SftConfig(steps=600, batch_size=len(data)))
    smooth = np.convolve(res.losses, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(smooth) < 0)


def test_callback_sees_every_step():
    seen = []
    data = [(s, proxy_target(s)) for s in generate_scenes(3, 5)]
    res = train_sft(data, SftConfig(steps=5), callback=lambda i, loss: seen.append((i, loss)))
    assert seen == list(enumerate(res.losses))


def test_non_finite_loss_raises():
    data = [(s, proxy_target(s)) for s in generate_scenes(3, 6)]
    bad = policy.zeros()
    policy.unpack(bad)["B"][:] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train_sft(data, SftConfig(steps=3), init=bad)


def test_config_validation():
    for bad in [dict(learning_rate=0.0), dict(steps=0), dict(batch_size=0), dict(route_threshold=-1.0), dict(optimizer="rmsprop")]:
        with pytest.raises(ValueError):
            SftConfig(**bad)
    with pytest.raises(ValueError):
        train_sft([], SftConfig(steps=1))


def test_proxy_improves_l2():
    scenes = generate_scenes(40, 7)
    before = proxy_l2(policy.zeros(), scenes)
    res = train_proxy(scenes, SftConfig(proxy_steps=300))
    after = proxy_l2(res.snapshot, scenes)
    assert res.snapshot.version == 300
    assert np.mean(after[np.isfinite(after)]) < np.mean(before[np.isfinite(before)])
    for ids in policy.sample_batch(res.snapshot.theta, np.stack([policy.scene_features(s) for s in scenes]), None, range(40)):
        assert parse(ids).meta is None


# ---------------------------------------------------------------------------
# routing


@pytest.mark.parametrize("l2, threshold, expected", [(0.2, 0.5, "short"), (0.9, 0.5, "long"), (0.5, 0.5, "short"), (0.0, 0.0, "short"), (1e-9, 0.0, "long"), (1e6, math.inf, "short"), (math.inf, 0.5, "long")])
def test_routing_threshold_cases(l2, threshold, expected):
    scene = generate_scenes(1, 8)[0]
    (entry,) = route_by_l2([scene], [l2], threshold).entries
    assert entry.cot_length is CotLength(expected)
    assert entry.target == route_target(scene, expected)


@settings(max_examples=50, deadline=None)
@given(l2=st.lists(st.floats(0.0, 5.0), min_size=6, max_size=6), lo=st.floats(0.0, 3.0), gap=st.floats(0.0, 2.0))
def test_routing_partition_and_monotone(l2, lo, gap):
    scenes = generate_scenes(6, 9)
    a = route_by_l2(scenes, l2, lo)
    b = route_by_l2(scenes, l2, lo + gap)
    assert sum(a.counts().values()) == 6
    short_a = {e.scene.id for e in a.entries if e.cot_length is CotLength.SHORT}
    short_b = {e.scene.id for e in b.entries if e.cot_length is CotLength.SHORT}
    assert short_a <= short_b


def test_routed_round_trip(tmp_path):
    scenes = generate_scenes(8, 10)
    l2 = [0.1, 2.0, math.inf, 0.4, 0.6, 0.0, 3.0, 0.5]
    ds = route_by_l2(scenes, l2, 0.5)
    path = tmp_path / "routed.jsonl"
    assert write_routed(ds, path) == 8
    again = read_routed(path)
    assert [e.cot_length for e in again.entries] == [e.cot_length for e in ds.entries]
    assert [e.target for e in again.entries] == [e.target for e in ds.entries]
    assert again.entries[2].proxy_l2 == math.inf
    assert is_routed(path)
    plain = tmp_path / "plain.jsonl"
    write_dataset(scenes, plain)
    assert not is_routed(plain)


def test_short_targets_are_shorter():
    scenes = generate_scenes(30, 11)
    for s in scenes:
        short, long = route_target(s, "short"), route_target(s, "long")
        assert len(short.token_ids) < len(long.token_ids)
        assert short.meta == long.meta == s.gt_meta
        assert l2_at_horizons(short.trajectory, s.gt_trajectory)["avg"] <= 0.125 * math.sqrt(2)


def test_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv([3.0, 2.5], path)
    assert path.read_text().splitlines() == ["step,loss", "0,3.0", "1,2.5"]
