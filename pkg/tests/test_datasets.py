import json
import math
from fractions import Fraction

import numpy as np
import pytest

from invlab.datasets import (LABEL_RULES, DatasetError, InvariantTaskSpec, LabeledDataset, generate,
                             grid_rotation_task, invariance_audit,
                             nonuniform_augmentation_counterexample, permutation_pointset_task,
                             sign_task, zero_one_counterexample)
from invlab.groups import grid_rotations
from invlab.models import ModelSpec, forward
from invlab.training import TrainConfig, TrainMode, train


def _labels_by_orbit(ds, group):
    reps = group.canonical_representative(ds.X)
    seen = {}
    for r, y in zip(map(bytes, reps), ds.y):
        seen.setdefault(r, set()).add(int(y))
    return seen


@pytest.mark.parametrize("task", [
    grid_rotation_task(sizes=(300, 100, 100)),
    permutation_pointset_task(sizes=(300, 100, 100)),
    permutation_pointset_task(sizes=(300, 100, 100), label_rule="spread"),
    permutation_pointset_task(k_points=6, sizes=(300, 100, 100), blocks=(3, 3)),
    sign_task(sizes=(100, 20, 0)),
], ids=lambda t: t.name + "/" + t.label_rule)
def test_generated_splits_pass_the_invariance_audit(task):
    rng = np.random.default_rng(0)
    for ds in generate(task):
        assert invariance_audit(ds, task, rng, n_pairs=200) == 0


def test_one_label_per_orbit():
    task = grid_rotation_task(sizes=(400, 0, 0))
    train_set = generate(task)[0]
    noisy = LabeledDataset(np.concatenate([train_set.X, task.group.act(1, train_set.X)]),
                           np.concatenate([train_set.y, train_set.y]))
    assert all(len(v) == 1 for v in _labels_by_orbit(noisy, task.group).values())


def test_generation_is_deterministic_per_seed():
    a = generate(permutation_pointset_task(sizes=(50, 10, 10), seed=3))
    b = generate(permutation_pointset_task(sizes=(50, 10, 10), seed=3))
    c = generate(permutation_pointset_task(sizes=(50, 10, 10), seed=4))
    assert all(np.array_equal(x.X, y.X) and np.array_equal(x.y, y.y) for x, y in zip(a, b))
    assert not np.array_equal(a[0].X, c[0].X)


def test_ood_split_uses_another_representative_law():
    task = permutation_pointset_task(sizes=(2000, 0, 2000))
    train_set, _, ood = generate(task)
    assert ood.meta["domain"] == "ood" and train_set.meta["domain"] == "in"
    assert abs(ood.X.mean() - train_set.X.mean()) > 1.0


def test_generic_two_by_two_grid_orbit_has_four_points():
    G = grid_rotations(2)
    x = np.random.default_rng(1).standard_normal(4)
    assert len(G.orbit(x)) == 4


def test_grid_task_is_learnable_by_a_linear_probe():
    task = grid_rotation_task(sizes=(1000, 400, 0))
    train_set, test_set, _ = generate(task)
    spec = ModelSpec.linear(36, 3, bias=True)
    config = TrainConfig(TrainMode.da(1), epochs=10, batch_size=20, lr=0.1, seed=0, group=task.group)
    params, _ = train(spec, config, train_set, test_set)
    acc = np.mean(np.argmax(forward(spec, params, test_set.X), axis=1) == test_set.y)
    assert acc > 1 / 3 + 0.1


def test_pointset_labels_are_permutation_invariant():
    task = permutation_pointset_task(k_points=4, sizes=(100, 0, 0))
    ds = generate(task)[0]
    G = task.group
    assert G.order == 24
    for g in range(G.order):
        moved = G.canonical_representative(G.act(g, ds.X))
        assert np.array_equal(LABEL_RULES[task.label_rule](moved, task.params, "in"), ds.y)


def test_partial_invariance_group_sits_strictly_between():
    full = permutation_pointset_task(k_points=6).group
    partial = permutation_pointset_task(k_points=6, blocks=(3, 3)).group
    assert 1 < partial.order == math.factorial(3) ** 2 < full.order == math.factorial(6)
    with pytest.raises(DatasetError):
        permutation_pointset_task(k_points=6, blocks=(3, 2))


def test_trivial_group_task_is_plain_sampling():
    task = InvariantTaskSpec("plain", "trivial", {"d": 1}, "unit_magnitude", "constant",
                             {"magnitude": [0.0, 1.0], "label": 0}, 20, 0, 0)
    ds = generate(task)[0]
    assert np.all(ds.y == 0) and ds.X.shape == (20, 1)
    # with one element every input is its own representative
    assert np.all((ds.X >= 0.0) & (ds.X <= 1.0))
    assert np.array_equal(task.group.canonical_representative(ds.X), ds.X)


def test_csv_roundtrip_with_sidecar(tmp_path):
    task = permutation_pointset_task(sizes=(25, 0, 0))
    ds = generate(task)[0]
    path = ds.save(tmp_path / "train.csv")
    assert path.read_text().splitlines()[0] == "id,label," + ",".join(f"x{j}" for j in range(8))
    back = LabeledDataset.load(path)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert back.y.dtype.kind == "i"
    side = json.loads(path.with_suffix(".json").read_text())
    assert side["split"] == "train"
    assert back.group.to_dict() == task.group.to_dict()


def test_real_labels_roundtrip(tmp_path):
    ds = LabeledDataset(np.array([[0.1, 0.2]]), np.array([0.5]))
    back = LabeledDataset.load(ds.save(tmp_path / "r.csv"))
    assert back.y.tolist() == [0.5]


def test_malformed_csv_is_rejected(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("index,y,x0\n0,1,2\n")
    with pytest.raises(DatasetError):
        LabeledDataset.load(bad)
    bad.write_text("id,label,x0\n0,1,oops\n")
    with pytest.raises(DatasetError):
        LabeledDataset.load(bad)
    with pytest.raises(DatasetError):
        LabeledDataset.load(tmp_path / "missing.csv")


def test_task_spec_roundtrip():
    task = permutation_pointset_task(k_points=6, blocks=(3, 3), seed=5)
    again = InvariantTaskSpec.from_dict(task.to_dict())
    assert again.to_dict() == task.to_dict()
    assert again.group.order == 36


# -- counterexamples -------------------------------------------------------------


def test_zero_one_counterexample_exact_values():
    rep = zero_one_counterexample(0.1, 10)
    one = rep["branches"]["1"]
    assert Fraction(one["averaged_output"]) == Fraction(12, 25)
    assert one["fa_risk_exact"] == "1"
    zero = rep["branches"]["0"]
    # 8 outputs at 1/2 and 2 flipped outputs at 1 average to 1/2 + epsilon
    assert Fraction(zero["averaged_output"]) == Fraction(3, 5)
    assert zero["fa_risk_exact"] == "1"
    # only the flipped inputs are wrong; an output of exactly 1/2 is correct for y = 0
    assert zero["pointwise_risk_exact"] == one["pointwise_risk_exact"] == "1/5"
    assert rep["pointwise_risk_exact"] == "1/5" and rep["fa_risk_exact"] == "1"
    assert rep["fa_worse"]


def test_zero_one_counterexample_preconditions():
    with pytest.raises(DatasetError):
        zero_one_counterexample(0.01, 10)
    with pytest.raises(DatasetError):
        zero_one_counterexample(0.3, 10)


def test_nonuniform_augmentation_gap():
    _, rep = nonuniform_augmentation_counterexample(0.05, 2000, seed=0)
    assert abs(rep["gap"]) > 3 * rep["gap_stderr"]
    _, rep = nonuniform_augmentation_counterexample(0.5, 2000, seed=0)
    assert abs(rep["gap"]) < 3 * rep["gap_stderr"]


def test_nonuniform_augmentation_variance_direction():
    _, rep = nonuniform_augmentation_counterexample(0.05, 50, seed=1, replicates=400)
    assert rep["augmented_variance"] > rep["plain_variance"]

