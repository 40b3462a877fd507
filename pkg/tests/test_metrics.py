import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_plan.geometry import rectangle_corners, rectangles_overlap, waypoint_headings
from grpo_plan.grammar import VOCAB, build_response, quantize
from grpo_plan.metrics import (
    EvalReport,
    collision_at_horizons,
    evaluate,
    footprint_hits,
    format_table,
    l2_at_horizons,
    score_outputs,
)
from grpo_plan.world import EGO_LENGTH, EGO_WIDTH, AgentTrack, Trajectory, generate_scene, generate_scenes

GT = Trajectory(np.column_stack([np.arange(1, 7) * 4.0, np.zeros(6)]))

coords = st.floats(-20.0, 20.0, allow_nan=False)
trajs = st.lists(st.tuples(coords, coords), min_size=6, max_size=6).map(lambda p: Trajectory(np.array(p)))


def test_uniform_offset_l2_is_one():
    pred = Trajectory(GT.waypoints + np.array([1.0, 0.0]))
    for conv in ("stp3", "uniad"):
        out = l2_at_horizons(pred, GT, conv)
        assert out == pytest.approx({"1s": 1.0, "2s": 1.0, "3s": 1.0, "avg": 1.0})


def test_single_late_error():
    wp = GT.waypoints.copy()
    wp[5, 1] += 0.6
    out = l2_at_horizons(Trajectory(wp), GT)
    assert out["1s"] == 0.0 and out["2s"] == 0.0
    assert out["3s"] == pytest.approx(0.1)
    assert out["avg"] == pytest.approx(0.1 / 3)
    assert l2_at_horizons(Trajectory(wp), GT, "uniad")["3s"] == pytest.approx(0.6)


def test_unknown_convention():
    with pytest.raises(ValueError, match="convention"):
        l2_at_horizons(GT, GT, "carla")


@settings(max_examples=200, deadline=None)
@given(a=trajs, b=trajs, shift=st.tuples(coords, coords))
def test_l2_symmetric_and_translation_invariant(a, b, shift):
    ab = l2_at_horizons(a, b)
    assert ab == pytest.approx(l2_at_horizons(b, a))
    s = np.array(shift)
    moved = l2_at_horizons(Trajectory(a.waypoints + s), Trajectory(b.waypoints + s))
    assert moved == pytest.approx(ab, abs=1e-9)
    assert all(v >= 0 for v in ab.values())


# ---------------------------------------------------------------------------
# geometry


def test_stopped_ego_keeps_heading():
    wp = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [0.0, 2.0]])
    np.testing.assert_allclose(
        waypoint_headings(wp), [math.pi / 4, math.pi / 4, math.pi / 2, math.pi / 2, math.pi / 2, math.pi]
    )
    np.testing.assert_array_equal(waypoint_headings(np.zeros((6, 2))), 0.0)


def test_rectangle_corners_span_footprint():
    c = rectangle_corners([1.0, 2.0], math.pi / 2, 4.0, 2.0)
    np.testing.assert_allclose(c.mean(axis=0), [1.0, 2.0])
    np.testing.assert_allclose(np.ptp(c, axis=0), [2.0, 4.0], atol=1e-12)


def test_touching_rectangles_overlap():
    assert rectangles_overlap([0, 0], 0.0, 4.0, 2.0, [4.0, 0], 0.0, 4.0, 2.0)
    assert not rectangles_overlap([0, 0], 0.0, 4.0, 2.0, [4.01, 0], 0.0, 4.0, 2.0)


def _inside(points, center, heading, length, width, margin):
    c, s = math.cos(heading), math.sin(heading)
    d = points - np.asarray(center)
    u = d[:, 0] * c + d[:, 1] * s
    v = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(u) <= length / 2 + margin) & (np.abs(v) <= width / 2 + margin)


def _raster_points(center, heading, length, width, cell=0.02):
    u = np.linspace(-length / 2, length / 2, int(math.ceil(length / cell)) + 1)
    v = np.linspace(-width / 2, width / 2, int(math.ceil(width / cell)) + 1)
    uu, vv = np.meshgrid(u, v)
    c, s = math.cos(heading), math.sin(heading)
    return np.column_stack([uu.ravel() * c - vv.ravel() * s, uu.ravel() * s + vv.ravel() * c]) + np.asarray(center)


def raster_overlap(a, b, margin):
    """Overlap decided on a 2 cm grid of points covering rectangle ``a``."""
    return bool(_inside(_raster_points(*a), *b, margin).any())


def test_sat_agrees_with_rasterised_oracle():
    rng = np.random.default_rng(0)
    decided = 0
    for _ in range(600):
        a = (rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi), EGO_LENGTH, EGO_WIDTH)
        b = (rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi), rng.uniform(1, 6), rng.uniform(0.5, 2.5))
        loose, tight = raster_overlap(a, b, 0.04), raster_overlap(a, b, -0.04)
        if loose != tight:
            continue  # within the raster resolution of touching
        decided += 1
        assert rectangles_overlap(*a, *b) == loose
    assert decided > 500


# ---------------------------------------------------------------------------
# collision


def _stationary_agent(pos, heading=0.0):
    return AgentTrack(np.tile(pos, (7, 1)), np.full(7, heading), 4.5, 1.9)


def _with_agents(agents, traj=GT):
    return replace(generate_scene(0, "cruise"), agents=tuple(agents), gt_trajectory=traj)


def test_no_agents_never_collides():
    scene = _with_agents([])
    assert collision_at_horizons(GT, scene) == {"1s": False, "2s": False, "3s": False}


def test_agent_parked_on_one_second_waypoint():
    scene = _with_agents([_stationary_agent(GT.waypoints[1])])
    hits = footprint_hits(GT, scene)
    assert hits[1]
    assert collision_at_horizons(GT, scene) == {"1s": True, "2s": True, "3s": True}


def test_agent_ahead_only_hits_late_horizon():
    scene = _with_agents([_stationary_agent(GT.waypoints[5] + [1.0, 0.0])])
    assert collision_at_horizons(GT, scene) == {"1s": False, "2s": False, "3s": True}


def test_agent_times_are_offset_by_one_step():
    # agent sits on waypoint 0 only at t = 0, then leaves
    pos = np.tile([100.0, 100.0], (7, 1))
    pos[0] = GT.waypoints[0]
    scene = _with_agents([AgentTrack(pos, np.zeros(7), 4.5, 1.9)])
    assert not footprint_hits(GT, scene).any()
    pos = np.tile([100.0, 100.0], (7, 1))
    pos[1] = GT.waypoints[0]
    scene = _with_agents([AgentTrack(pos, np.zeros(7), 4.5, 1.9)])
    assert footprint_hits(GT, scene).tolist() == [True] + [False] * 5


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), traj=trajs)
def test_collision_is_cumulative(seed, traj):
    scene = generate_scenes(1, seed)[0]
    c = collision_at_horizons(traj, scene)
    assert c["1s"] <= c["2s"] <= c["3s"]


# ---------------------------------------------------------------------------
# reports


def _oracle_outputs(scenes):
    return [build_response(f"<decision> {s.gt_meta} </slot>", s.gt_trajectory).token_ids for s in scenes]


def test_oracle_policy_within_quantisation_bound():
    scenes = generate_scenes(60, 2)
    rep = score_outputs(_oracle_outputs(scenes), scenes)
    bound = 0.125 * math.sqrt(2)
    assert rep.n_parse_failures == 0
    assert all(rep.l2[c] <= bound for c in rep.l2)
    direct = [collision_at_horizons(quantize(s.gt_trajectory), s) for s in scenes]
    for h in ("1s", "2s", "3s"):
        assert rep.collision[h] == pytest.approx(np.mean([c[h] for c in direct]))
    assert set(rep.stratified) <= {"simple", "complex"}
    assert sum(r.n_samples for r in rep.stratified.values()) == 60


def test_parse_failures_excluded_from_averages():
    scenes = generate_scenes(4, 3)
    good = _oracle_outputs(scenes)
    broken = list(good)
    broken[1] = [VOCAB.THINK_OPEN, VOCAB.EOS]
    a = score_outputs(good[:1] + good[2:], scenes[:1] + scenes[2:])
    b = score_outputs(broken, scenes)
    assert b.n_parse_failures == 1 and b.n_samples == 4
    assert b.parse_failure_rate == 0.25
    assert b.l2 == pytest.approx(a.l2)
    assert b.collision == pytest.approx(a.collision)


def test_all_failures_give_nan():
    scenes = generate_scenes(2, 4)
    rep = score_outputs([[VOCAB.EOS]] * 2, scenes)
    assert rep.n_parse_failures == 2
    assert all(math.isnan(v) for v in rep.l2.values())
    assert "nan" in rep.to_table()


def test_score_outputs_length_mismatch():
    with pytest.raises(ValueError):
        score_outputs([[VOCAB.EOS]], generate_scenes(2, 5))


def test_report_json_round_trip():
    scenes = generate_scenes(10, 6)
    rep = score_outputs(_oracle_outputs(scenes), scenes)
    again = EvalReport.from_dict(json.loads(rep.to_json()))
    assert again.to_dict() == rep.to_dict()
    assert len(rep.row()) == 8


def test_table_layout_and_notes():
    scenes = generate_scenes(5, 7)
    rep = score_outputs(_oracle_outputs(scenes), scenes)
    text = format_table([("SFT (no RL)", rep), ("cell1", None)], {"cell1": "collapsed"})
    lines = text.splitlines()
    assert "L2 (m)" in lines[0] and "Collision (%)" in lines[0]
    assert lines[1].split("|")[1].split() == ["1s", "2s", "3s", "Avg"]
    assert "collapsed" in lines[-1]
    assert lines[3].startswith("SFT (no RL)")


def test_evaluate_is_deterministic():
    from grpo_plan import policy

    th = policy.random_theta(0, 0.1)
    scenes = generate_scenes(6, 8)
    a, b = evaluate(th, scenes), evaluate(policy.PolicySnapshot(th), scenes)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(ValueError):
        evaluate(th, scenes, decode="beam")
    with pytest.raises(ValueError):
        evaluate(th, [])
