import numpy as np
from hypothesis import given, settings, strategies as st

from kgat.data import SynthConfig, carve_validation, kcore_filter, remap_ids, split_user, synthesize

from helpers import arr, interactions


def test_kcore_cascades_to_fixpoint():
    # dropping u3 starves item 3, which starves u2, which starves item 2
    raw = {0: arr(0, 1), 1: arr(0, 1, 2), 2: arr(2, 3), 3: arr(3)}
    out = kcore_filter(raw, 2)
    assert sorted(out) == [0, 1]
    assert out[1].tolist() == [0, 1]


def test_kcore_keeps_everything_when_dense():
    raw = {u: arr(0, 1, 2) for u in range(3)}
    assert {u: v.tolist() for u, v in kcore_filter(raw, 3).items()} == {u: [0, 1, 2] for u in range(3)}


def test_filtered_items_stay_as_entities():
    remap = remap_ids({5: arr(2, 4), 9: arr(4)}, np.array([[3, 0, 7], [2, 1, 3]]), 8)
    assert remap.users == {5: 0, 9: 1}
    assert remap.num_items == 2
    assert remap.entities == {2: 0, 4: 1, 3: 2, 7: 3}


def test_split_sizes_round_half_up():
    rng = np.random.default_rng(0)
    sizes = {n: len(split_user(np.arange(n), 0.8, rng)[0]) for n in (1, 2, 3, 5, 10)}
    assert sizes == {1: 1, 2: 2, 3: 2, 5: 4, 10: 8}
    assert len(split_user(np.arange(5), 0.9, rng)[0]) == 5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.floats(0.05, 0.95))
def test_split_partitions_items(seed, n, frac):
    items = np.sort(np.random.default_rng(seed).choice(100, size=n, replace=False))
    keep, held = split_user(items, frac, np.random.default_rng(seed))
    assert len(keep) >= 1 and not set(keep) & set(held)
    assert sorted(keep.tolist() + held.tolist()) == items.tolist()


def test_validation_is_carved_from_train():
    inter = interactions([[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]], [[10]], num_items=11)
    out = carve_validation(inter, 0.2, np.random.default_rng(0))
    assert len(out.val_pos[0]) == 2 and len(out.train_pos[0]) == 8
    assert out.test_pos[0].tolist() == [10]
    out.validate()


def test_synthetic_generator_is_seeded_and_valid():
    cfg = SynthConfig(users=30, items=20, entities=8, seed=3)
    a, ta = synthesize(cfg)
    b, tb = synthesize(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and np.array_equal(ta, tb)
    assert all(len(x) >= 2 and x.max() < 20 for x in a)
    assert ta[:, [0, 2]].max() < 28 and ta[:, 1].max() < cfg.relations
