import numpy as np
import pytest
import torch

from cwdcil.data import (Dataset, OracleTaskSpec, augment_images, batch_order, dataset_root, fixed_class_order,
                         iterate_batches, load_dataset, load_digits_dataset, make_oracle_tasks, split_tasks)
from cwdcil.errors import DatasetMissingError
from cwdcil.statistics import estimate_class_stats, group_by_class


def toy_dataset(num_classes, per_class=3):
    y = torch.arange(num_classes).repeat_interleave(per_class)
    x = y.float()[:, None].repeat(1, 2)
    return Dataset("toy", x, y, x.clone(), y.clone(), num_classes)


def test_split_hundred_classes():
    seq = split_tasks(toy_dataset(100), 5, seed=3)
    sets = [set(seq.class_order[k] for k in t.class_ids) for t in seq]
    assert [len(s) for s in sets] == [20] * 5
    assert set().union(*sets) == set(range(100))
    assert sum(len(s) for s in sets) == 100


def test_split_identity_order_two_tasks():
    seq = split_tasks(toy_dataset(10), 2, class_order=range(10))
    assert seq[0].class_ids == (0, 1, 2, 3, 4)
    assert seq[1].class_ids == (5, 6, 7, 8, 9)
    assert seq[1].class_slice == slice(5, 10)
    assert set(seq[1].train_y.tolist()) == set(range(5, 10))


def test_split_seeded_orders():
    a = split_tasks(toy_dataset(20), 4, seed=1)
    b = split_tasks(toy_dataset(20), 4, seed=1)
    c = split_tasks(toy_dataset(20), 4, seed=2)
    assert a.class_order == b.class_order and a.class_order != c.class_order
    for ta, tb in zip(a, b):
        assert torch.equal(ta.train_x, tb.train_x) and torch.equal(ta.train_y, tb.train_y)


def test_split_remaps_labels_to_global_order():
    seq = split_tasks(toy_dataset(4), 2, class_order=(3, 1, 0, 2))
    # The raw class 3 becomes global class 0 and keeps its features.
    t1 = seq[0]
    assert torch.equal(t1.train_x[t1.train_y == 0][:, 0], torch.full((3,), 3.0))


@pytest.mark.parametrize("num_tasks,order", [(3, None), (0, None), (2, (0, 1, 2, 2))])
def test_split_errors(num_tasks, order):
    with pytest.raises(ValueError):
        split_tasks(toy_dataset(4), num_tasks, class_order=order)


def test_cumulative_test_and_manifest():
    seq = split_tasks(toy_dataset(6), 3, class_order=range(6))
    x, y = seq.cumulative_test(2)
    assert sorted(set(y.tolist())) == [0, 1, 2, 3]
    assert seq.classes_through(2) == 4
    man = seq.manifest()
    assert man["tasks"][2]["global_ids"] == [4, 5] and man["tasks"][0]["num_train"] == 6


def test_fixed_orders():
    assert fixed_class_order(10, 0) == tuple(range(10))
    assert sorted(fixed_class_order(10, 1)) == list(range(10))
    assert fixed_class_order(100, 2) == fixed_class_order(100, 2)
    assert sorted(fixed_class_order(100, 2)) == list(range(100))
    with pytest.raises(ValueError):
        fixed_class_order(10, 3)


def test_batch_order_depends_on_seed_and_epoch():
    assert torch.equal(batch_order(50, 1, 2), batch_order(50, 1, 2))
    assert not torch.equal(batch_order(50, 1, 2), batch_order(50, 1, 3))
    assert sorted(batch_order(50, 0, 0).tolist()) == list(range(50))


def test_iterate_batches_covers_all():
    x = torch.arange(10.0)[:, None]
    y = torch.arange(10)
    seen = torch.cat([yb for _, yb in iterate_batches(x, y, 4, 0, 0)])
    assert sorted(seen.tolist()) == list(range(10))
    assert len(list(iterate_batches(x, y, 4, 0, 0, drop_last=True))) == 2


def test_augment_preserves_shape_and_is_seeded():
    x = torch.randn(5, 1, 8, 8)
    a = augment_images(x, torch.Generator().manual_seed(0))
    b = augment_images(x, torch.Generator().manual_seed(0))
    assert a.shape == x.shape and torch.equal(a, b)


def test_digits_dataset():
    ds = load_digits_dataset(seed=0)
    assert ds.num_classes == 10 and ds.input_shape == (1, 8, 8)
    assert float(ds.train_x.min()) >= -1.0 and float(ds.train_x.max()) <= 1.0
    assert len(ds.train_y) + len(ds.test_y) == 1797
    counts = np.bincount(ds.test_y.numpy())
    assert counts.min() >= 30


def test_missing_datasets(tmp_path):
    with pytest.raises(DatasetMissingError):
        load_dataset("tiny-imagenet", root=tmp_path)
    with pytest.raises(DatasetMissingError):
        load_dataset("svhn")


def test_dataset_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("CWDCIL_DATA_ROOT", str(tmp_path))
    assert dataset_root() == tmp_path


# ---- oracle ---------------------------------------------------------------------


def test_oracle_recovers_means():
    # With 1000 samples the mean error scales like sqrt(trace / 1000); a covariance
    # of trace 2 keeps the expected error near 0.045.
    a = np.random.default_rng(5).normal(size=(8, 8))
    cov = 0.125 * (a @ a.T / 8 + np.eye(8))
    spec = OracleTaskSpec(num_classes=4, feature_dim=8, samples_per_class=1000, seed=0, cov=cov)
    means, _ = spec.resolved()
    seq = make_oracle_tasks(spec, 1)
    s = estimate_class_stats(group_by_class(seq[0].train_x.double(), seq[0].train_y))
    for k in range(4):
        assert np.linalg.norm(s.mean_of(k) - means[k]) < 0.1


def test_oracle_tasks_disjoint_and_reproducible():
    spec = OracleTaskSpec(num_classes=4, samples_per_class=50, seed=2)
    a, b = make_oracle_tasks(spec, 2), make_oracle_tasks(spec, 2)
    assert set(a[0].train_y.tolist()).isdisjoint(a[1].train_y.tolist())
    assert torch.equal(a[1].train_x, b[1].train_x)


@pytest.mark.parametrize("kw", [
    dict(cov=np.array([[1.0, 2.0], [0.0, 1.0]])),
    dict(cov=-np.eye(2)),
    dict(means=np.zeros((2, 2))),
    dict(means=np.zeros((3, 2))),
])
def test_oracle_validation(kw):
    with pytest.raises(ValueError):
        OracleTaskSpec(num_classes=2, feature_dim=2, **kw).resolved()
