import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_plan.grammar import (
    BIN,
    MAX_LEN,
    START,
    VOCAB,
    BadArity,
    GrammarError,
    MissingSection,
    NoMeta,
    advance,
    build_response,
    continuize,
    discretize,
    extract_meta,
    is_valid,
    legal_mask,
    parse,
    quantize,
    render_text,
    serialize,
    walk,
)
from grpo_plan.world import MetaAction, Trajectory

from helpers import assemble, random_bins, random_think, random_valid_ids

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _gt():
    return Trajectory(np.column_stack([np.arange(1, 7) * 3.0, np.zeros(6)]))


def test_vocabulary_is_dense_and_unique():
    assert len(set(VOCAB.tokens)) == VOCAB.size == len(VOCAB)
    for i, tok in enumerate(VOCAB.tokens):
        assert VOCAB.encode(tok) == i and VOCAB.decode(i) == tok


def test_vocabulary_hash_is_stable():
    assert VOCAB.hash64() == type(VOCAB)().hash64()


def test_origin_maps_to_exact_bin():
    bins, clamped = discretize(np.zeros((6, 2)))
    assert not clamped
    np.testing.assert_array_equal(continuize(bins).waypoints, 0.0)


def test_clamp_flags():
    wp = np.zeros((6, 2))
    wp[0, 0] = 61.99
    bins, clamped = discretize(wp)
    assert not clamped
    assert abs(continuize(bins).waypoints[0, 0] - 61.99) <= BIN / 2
    wp[0, 0] = 99.0
    bins, clamped = discretize(wp)
    assert clamped
    assert continuize(bins).waypoints[0, 0] == 62.0


@settings(max_examples=300, deadline=None)
@given(seed=seeds)
def test_quantization_error_bound(seed):
    rng = np.random.default_rng(seed)
    wp = np.column_stack([rng.uniform(-2.0, 62.0, 6), rng.uniform(-16.0, 16.0, 6)])
    err = np.abs(quantize(Trajectory(wp)).waypoints - wp)
    assert err.max() <= 0.125 + 1e-12


@settings(max_examples=300, deadline=None)
@given(seed=seeds)
def test_parse_serialize_identity(seed):
    ids = random_valid_ids(np.random.default_rng(seed))
    r = parse(ids)
    assert serialize(r) == tuple(ids)
    assert parse(serialize(r)) == r


@settings(max_examples=200, deadline=None)
@given(seed=seeds)
def test_automaton_accepts_exactly_what_parses(seed):
    rng = np.random.default_rng(seed)
    ids = random_valid_ids(rng)
    assert is_valid(ids)
    # corrupt one position and compare the two acceptors
    k = int(rng.integers(0, len(ids)))
    ids[k] = int(rng.integers(0, VOCAB.size))
    try:
        parse(ids)
        parsed = True
    except GrammarError:
        parsed = False
    assert is_valid(ids) == parsed


def test_every_walked_token_is_legal():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ids = random_valid_ids(rng)
        for state, tok in zip(walk(ids), ids):
            assert legal_mask(state)[tok]


def test_missing_think_close():
    ids = random_valid_ids(np.random.default_rng(1))
    ids.remove(VOCAB.THINK_CLOSE)
    with pytest.raises(MissingSection):
        parse(ids)


def test_ten_coordinates_is_bad_arity():
    ids = assemble(random_think(np.random.default_rng(2)), random_bins(np.random.default_rng(3)))
    close = ids.index(VOCAB.TRAJ_CLOSE)
    del ids[close - 2:close]
    with pytest.raises(BadArity):
        parse(ids)


def test_wrong_axis_is_bad_arity():
    ids = assemble([], random_bins(np.random.default_rng(4)))
    start = ids.index(VOCAB.TRAJ_OPEN) + 1
    ids[start], ids[start + 1] = ids[start + 1], ids[start]
    with pytest.raises(BadArity):
        parse(ids)


def test_think_without_decision_is_no_meta():
    think = [VOCAB.slot_open[0], VOCAB.filler("urban road"), VOCAB.SLOT_CLOSE]
    with pytest.raises(NoMeta):
        parse(assemble(think, random_bins(np.random.default_rng(5))))


def test_decision_without_longitudinal_is_no_meta():
    think = [VOCAB.slot_open[-1], VOCAB.lateral["LEFT"], VOCAB.SLOT_CLOSE]
    with pytest.raises(NoMeta):
        parse(assemble(think, random_bins(np.random.default_rng(6))))


def test_meta_outside_decision_is_no_meta():
    think = [VOCAB.slot_open[0], VOCAB.lateral["LEFT"], VOCAB.SLOT_CLOSE,
             VOCAB.slot_open[-1], VOCAB.lateral["LEFT"], VOCAB.longitudinal["KEEP"], VOCAB.SLOT_CLOSE]
    with pytest.raises(NoMeta):
        parse(assemble(think, random_bins(np.random.default_rng(7))))


def test_repeated_slot_rejected():
    think = random_think(np.random.default_rng(8), p_empty=0.0)
    fill = [VOCAB.slot_open[0]] + [VOCAB.filler("urban road")] * 7 + [VOCAB.SLOT_CLOSE]
    ids = assemble(fill * 2 + think, random_bins(np.random.default_rng(9)))
    with pytest.raises(MissingSection):
        parse(ids)
    assert not is_valid(ids)


def test_longest_valid_response_fits():
    full = [VOCAB.filler("urban road")]
    think = []
    for d in range(4):
        think += [VOCAB.slot_open[d]] + full * 7 + [VOCAB.SLOT_CLOSE]
    think += [VOCAB.slot_open[-1]] + full * 3 + [VOCAB.lateral["LEFT"], VOCAB.longitudinal["KEEP"], VOCAB.SLOT_CLOSE]
    ids = assemble(think, random_bins(np.random.default_rng(13)))
    assert len(ids) <= MAX_LEN
    assert parse(ids).meta == MetaAction("LEFT", "KEEP")


def test_out_of_vocabulary_token():
    ids = random_valid_ids(np.random.default_rng(10))
    ids[1] = VOCAB.size + 3
    with pytest.raises(MissingSection):
        parse(ids)
    assert not is_valid(ids)


def test_empty_think_has_no_meta():
    r = build_response("", _gt())
    assert r.meta is None and r.think == ""
    assert r.think_ids == ()


def test_build_response_from_text():
    r = build_response("<decision> decision: LEFT, ACCELERATE </slot>", _gt())
    assert r.meta == MetaAction("LEFT", "ACCELERATE")
    assert r.trajectory == quantize(_gt())


def test_extract_meta_from_text_and_ids():
    text = "<targets> few agents </slot> <decision> RIGHT, STOP </slot>"
    assert extract_meta(text) == MetaAction("RIGHT", "STOP")
    assert extract_meta(VOCAB.tokenize_think(text)) == MetaAction("RIGHT", "STOP")


def test_unknown_think_text():
    with pytest.raises(GrammarError):
        VOCAB.tokenize_think("<decision> teleport </slot>")


def test_serialize_rejects_inconsistent_response():
    r = build_response("<decision> LEFT, KEEP </slot>", _gt())
    bad = type(r)(r.think, MetaAction("RIGHT", "KEEP"), r.trajectory, ())
    with pytest.raises(ValueError):
        serialize(bad)
    off_grid = type(r)(r.think, r.meta, Trajectory(_gt().waypoints + 0.1), ())
    with pytest.raises(ValueError):
        serialize(off_grid)


def test_after_trajectory_close_only_eos_is_legal():
    ids = random_valid_ids(np.random.default_rng(11))
    state = START
    for tok in ids[:-1]:
        state = advance(state, tok)
    mask = legal_mask(state)
    assert mask.sum() == 1 and mask[VOCAB.EOS]


def test_render_text():
    ids = assemble([], random_bins(np.random.default_rng(12)))
    assert render_text(ids).startswith("<think></think><trajectory>(")
    assert "<unk:" in render_text([VOCAB.size + 1])
