import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from invlab.groups import (FiniteGroupAction, GroupError, block_permutation_group, build_group,
                           cyclic_shift, grid_rotations, sign_flip, swap, symmetric_group, trivial)

SHIPPED = [trivial(3), cyclic_shift(5), grid_rotations(2), grid_rotations(3), sign_flip(2), swap(),
           symmetric_group(3), symmetric_group(4), symmetric_group(3, dims=2),
           block_permutation_group([2, 2]), block_permutation_group([3, 1], dims=2)]


@pytest.mark.parametrize("group", SHIPPED, ids=lambda g: g.name)
def test_shipped_groups_satisfy_axioms(group):
    group.check_axioms()


@pytest.mark.parametrize("group,order", [(symmetric_group(4), 24), (grid_rotations(3), 4),
                                         (block_permutation_group([3, 3]), 36), (sign_flip(3), 2),
                                         (cyclic_shift(6), 6)])
def test_orders(group, order):
    assert group.order == order


def test_c4_quarter_turn_on_two_by_two_grid():
    G = grid_rotations(2)
    # row-major (a, b, c, d) = [[a, b], [c, d]]; a clockwise turn gives [[c, a], [d, b]]
    assert G.act("r90", [1.0, 2.0, 3.0, 4.0]).tolist() == [3.0, 1.0, 4.0, 2.0]
    assert G.compose("r90", "r90") == G.element("r180")
    assert G.inverse("r90") == G.element("r270")


def test_s3_composition_applies_right_factor_first():
    G = symmetric_group(3)
    assert G.names[G.compose("(12)", "(23)")] == "(123)"
    x = np.array([1.0, 2.0, 3.0])
    gh = G.compose("(12)", "(23)")
    assert np.array_equal(G.act(gh, x), G.act("(12)", G.act("(23)", x)))


def test_swap_action_and_dual():
    G = swap()
    assert G.act(1, [3.0, 1.0]).tolist() == [1.0, 3.0]
    assert G.dual_action(1, [3.0, 1.0]).tolist() == [1.0, 3.0]


@pytest.mark.parametrize("group", SHIPPED, ids=lambda g: g.name)
def test_dual_action_is_the_transpose(group):
    rng = np.random.default_rng(1)
    w, x = rng.standard_normal((2, group.input_dim))
    for g in range(group.order):
        assert group.dual_action(g, w) @ x == pytest.approx(w @ group.act(g, x), abs=1e-12)


def test_sign_flip_scales():
    G = sign_flip(2)
    assert G.act("neg", [1.5, -2.0]).tolist() == [-1.5, 2.0]
    assert not G.is_permutation
    with pytest.raises(GroupError):
        G.coordinate_orbits()


def test_uniform_sampling_is_uniform():
    G = symmetric_group(3)
    draws = G.sample_uniform(np.random.default_rng(7), size=100_000)
    counts = np.bincount(draws, minlength=G.order)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_orbit_sizes():
    G = symmetric_group(3)
    assert len(G.orbit([1.0, 2.0, 3.0])) == 6
    assert len(G.orbit([1.0, 1.0, 2.0])) == 3
    assert len(G.orbit([1.0, 1.0, 1.0])) == 1
    assert len(sign_flip(1).orbit([0.0])) == 1


def test_orbit_mean_and_averaging_matrix_agree():
    G = block_permutation_group([2, 3])
    x = np.array([1.0, 3.0, 2.0, 4.0, 9.0])
    assert np.allclose(G.orbit_mean(x), [2.0, 2.0, 5.0, 5.0, 5.0])
    assert np.allclose(G.averaging_matrix() @ x, G.orbit_mean(x))


def test_orbit_mean_is_bitwise_constant_on_orbits():
    G = symmetric_group(4)
    x = np.random.default_rng(3).standard_normal(4) * 1e3
    means = [G.orbit_mean(G.act(g, x)).tobytes() for g in range(G.order)]
    assert len(set(means)) == 1


def test_canonical_representative_is_lexicographic_minimum():
    G = cyclic_shift(4)
    assert G.canonical_representative([3.0, 1.0, 2.0, 1.0]).tolist() == [1.0, 2.0, 1.0, 3.0]


def test_coordinate_orbits():
    assert block_permutation_group([2, 3]).coordinate_orbits().tolist() == [0, 0, 1, 1, 1]
    assert symmetric_group(2, dims=2).coordinate_orbits().tolist() == [0, 1, 0, 1]


@pytest.mark.parametrize("group", SHIPPED, ids=lambda g: g.name)
def test_json_roundtrip(group, tmp_path):
    path = tmp_path / "g.json"
    group.save(path)
    back = FiniteGroupAction.load(path)
    assert back.to_dict() == group.to_dict()
    assert json.loads(path.read_text())["n_elements"] == group.order


def test_matrix_group_roundtrip():
    # rotations by multiples of 120 degrees are not signed permutations
    rot = lambda t: np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    G = FiniteGroupAction.from_matrices("C3_rot", [rot(2 * np.pi * k / 3) for k in range(3)])
    G.check_axioms()
    assert G.perm is None
    back = FiniteGroupAction.from_dict(G.to_dict())
    assert np.allclose(back.act(1, [1.0, 0.0]), [-0.5, np.sqrt(3) / 2])
    assert np.allclose(G.orbit_mean([1.0, 2.0]), 0.0)


def test_broken_definition_is_rejected():
    bad = swap().to_dict()
    bad["compose"] = [0, 0, 0, 0]
    with pytest.raises(GroupError):
        FiniteGroupAction.from_dict(bad)
    with pytest.raises(GroupError):
        FiniteGroupAction.from_dict({"n_elements": 2})
    with pytest.raises(GroupError):
        build_group("dihedral")


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_action_is_a_homomorphism(k, seed):
    G = symmetric_group(k)
    rng = np.random.default_rng(seed)
    g, h = rng.integers(G.order, size=2)
    x = rng.standard_normal(k)
    assert np.array_equal(G.act(G.compose(g, h), x), G.act(g, G.act(h, x)))
    assert np.array_equal(G.act(G.inverse(g), G.act(g, x)), x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_canonical_representative_is_orbit_invariant(values):
    G = grid_rotations(2)
    x = np.array(values)
    first = G.canonical_representative(x)
    for g in range(G.order):
        assert np.array_equal(G.canonical_representative(G.act(g, x)), first)
