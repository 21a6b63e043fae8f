import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dern.errors import ConfigError, DimensionError
from dern.linalg import cosine
from dern.model import ExpertWeights, expert_forward
from dern.segments import (
    DEFAULT_MASK,
    FULL_MASK,
    ComponentMask,
    Segment,
    assemble,
    build_pool,
    decompose,
    reassign,
    router_deltas,
    segment_sum,
    sim_to_expert,
    transfer_router_mass,
    vectorize,
)

from conftest import random_expert


def _seg(g, u, dn, **kw):
    return Segment(np.asarray(g, np.float32), np.asarray(u, np.float32), np.asarray(dn, np.float32), **kw)


def test_decompose_single_neuron(rng):
    e = random_expert(rng, 3, 1)
    (s,) = decompose(e, 0.3, 5)
    np.testing.assert_array_equal(s.gate_row, e.w_gate[0])
    np.testing.assert_array_equal(s.up_row, e.w_up[0])
    np.testing.assert_array_equal(s.down_col, e.w_down[:, 0])
    assert (s.weight, s.source_expert, s.source_index) == (pytest.approx(0.3), 5, 0)


def test_decompose_reassemble_bit_exact(rng):
    e = random_expert(rng, 7, 11)
    segs = decompose(e, 1.0, 0)
    assert len(segs) == 11
    back = assemble(segs)
    for a, b in zip((e.w_gate, e.w_up, e.w_down), (back.w_gate, back.w_up, back.w_down)):
        assert a.tobytes() == b.tobytes()


def test_segments_are_copies(rng):
    e = random_expert(rng, 3, 2)
    s = decompose(e)[0]
    s.gate_row[0] += 1.0
    assert e.w_gate[0, 0] != s.gate_row[0]


def test_segment_sum_matches_forward(rng):
    for _ in range(20):
        e = random_expert(rng, 8, 16)
        x = rng.standard_normal(8).astype(np.float32)
        f = expert_forward(e, x)
        s = segment_sum(decompose(e), x)
        assert np.all(np.abs(f - s) <= 1e-5 * (1 + np.abs(f)))


def test_vectorize_masks():
    s = _seg([1, 2], [3, 4], [5, 6])
    np.testing.assert_array_equal(vectorize(s, FULL_MASK), [1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(vectorize(s, DEFAULT_MASK), [3, 4, 5, 6])
    np.testing.assert_array_equal(vectorize(s, ComponentMask(True, False, False)), [1, 2])


def test_mask_parse_and_validation():
    assert ComponentMask.parse("gate,up,down") == FULL_MASK
    assert ComponentMask.parse("up,down") == DEFAULT_MASK
    with pytest.raises(ConfigError):
        ComponentMask(False, False, False)
    with pytest.raises(ConfigError):
        ComponentMask.parse("gate,sideways")


def test_sim_to_expert_examples(rng):
    targets = decompose(random_expert(rng, 4, 5))
    assert sim_to_expert(targets[3], targets, FULL_MASK) == pytest.approx(1.0)
    s = _seg([1, 0], [1, 0], [1, 0])
    ortho = [_seg([0, 1], [0, 1], [0, 1]), _seg([0, 2], [0, -1], [0, 3])]
    assert sim_to_expert(s, ortho, FULL_MASK) == 0.0
    with pytest.raises(DimensionError):
        sim_to_expert(s, [], FULL_MASK)


def test_sim_to_expert_matches_brute_force(rng):
    pool = decompose(random_expert(rng, 6, 10))
    targets = decompose(random_expert(rng, 6, 12))
    for mask in (FULL_MASK, DEFAULT_MASK):
        for s in pool:
            best = -2.0
            for t in targets:
                c = cosine(vectorize(s, mask), vectorize(t, mask))
                if c > best:
                    best = c
            assert sim_to_expert(s, targets, mask) == best


def _setup(rng, n=6, d=8, h=10):
    experts = [random_expert(rng, d, h) for _ in range(n)]
    scores = rng.random(n)
    retained, pruned = [0, 2, 4], [1, 3, 5]
    pool = build_pool(experts, pruned, scores)
    targets = {r: decompose(experts[r], scores[r], r) for r in retained}
    return experts, pool, targets


def test_reassign_alpha_limits(rng):
    experts, pool, targets = _setup(rng)
    r1 = reassign(pool, targets, 1.0)
    assert r1.retained_ratio == 0.0 and r1.n_assigned == 0
    r0 = reassign(pool, targets, 0.0)
    assert r0.retained_ratio == 1.0
    assert sum(len(v) for v in r0.ext_segments.values()) == len(pool)


def test_reassign_exact_copy(rng):
    experts, pool, targets = _setup(rng)
    query = targets[2][4]
    res = reassign([query], targets, 0.5)
    assert res.assignments[0].target_expert == 2
    assert res.ext_segments[2] == [query]
    # strict inequality: an exact copy does not pass alpha = 1
    assert reassign([query], targets, 1.0).n_assigned == 0


def test_reassign_agrees_with_sim_to_expert(rng):
    experts, pool, targets = _setup(rng)
    res = reassign(pool, targets, 0.2)
    for s, a in zip(pool, res.assignments):
        sims = {r: sim_to_expert(s, targets[r]) for r in sorted(targets)}
        best = max(sims.values())
        assert a.best_similarity == pytest.approx(best, abs=1e-9)
        assert (a.target_expert >= 0) == (best > 0.2)
        if a.target_expert >= 0:
            assert sims[a.target_expert] == pytest.approx(best, abs=1e-9)


def test_reassign_each_segment_at_most_once(rng):
    _, pool, targets = _setup(rng)
    res = reassign(pool, targets, 0.1)
    seen = [id(s) for v in res.ext_segments.values() for s in v]
    assert len(seen) == len(set(seen))


def test_reassign_invalid_inputs(rng):
    _, pool, targets = _setup(rng)
    with pytest.raises(ConfigError):
        reassign(pool, targets, 1.5)
    with pytest.raises(ConfigError):
        reassign(pool, {}, 0.5)
    with pytest.raises(ConfigError):
        reassign(pool, {0: []}, 0.5)


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=40, deadline=None)
def test_retained_ratio_monotone(seed, a1, a2):
    rng = np.random.default_rng(seed)
    _, pool, targets = _setup(rng, d=4, h=5)
    lo, hi = sorted((a1, a2))
    assert reassign(pool, targets, lo).retained_ratio >= reassign(pool, targets, hi).retained_ratio


def test_assignment_scale_covariant(rng):
    _, pool, targets = _setup(rng)
    scaled = dict(targets)
    scaled[2] = [
        Segment(3.5 * s.gate_row, 3.5 * s.up_row, 3.5 * s.down_col, s.weight, s.source_expert, s.source_index)
        for s in targets[2]
    ]
    a = [x.target_expert for x in reassign(pool, targets, 0.0).assignments]
    b = [x.target_expert for x in reassign(pool, scaled, 0.0).assignments]
    assert a == b


def test_router_full_transfer(rng):
    experts = [random_expert(rng, 4, 6) for _ in range(3)]
    router = rng.standard_normal((3, 4)).astype(np.float32)
    targets = {0: decompose(experts[0], 1, 0), 2: decompose(experts[2], 1, 2)}
    pool = decompose(experts[0], 1, 1)  # expert 1 is a copy of expert 0
    res = reassign(pool, targets, 0.5)
    assert all(a.target_expert == 0 for a in res.assignments)
    new = transfer_router_mass(res, router, {1: 6})
    np.testing.assert_allclose(new[0], router[0].astype(float) + router[1], rtol=1e-6)
    np.testing.assert_array_equal(new[1], router[2])


def test_router_no_transfer_drops_pruned(rng):
    experts, pool, targets = _setup(rng)
    router = rng.standard_normal((6, 8)).astype(np.float32)
    new = transfer_router_mass(reassign(pool, targets, 1.0), router, {1: 10, 3: 10, 5: 10})
    assert new.shape == (3, 8)
    np.testing.assert_array_equal(new, router[[0, 2, 4]])


def test_router_mass_conservation(rng):
    experts, pool, targets = _setup(rng)
    router = rng.standard_normal((6, 8)).astype(np.float32)
    res = reassign(pool, targets, 0.0)
    assert res.retained_ratio == 1.0
    deltas = router_deltas(res, router, {1: 10, 3: 10, 5: 10})
    total = sum(deltas.values())
    np.testing.assert_allclose(total, router[[1, 3, 5]].astype(float).sum(axis=0), atol=1e-6)
    with pytest.raises(ConfigError):
        router_deltas(res, router, {1: 10})
