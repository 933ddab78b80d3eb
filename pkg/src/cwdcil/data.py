"""Datasets, class-incremental task splits and the tied-Gaussian oracle family.

Labels inside a :class:`TaskSequence` are *global class indices*: the position
of a raw class in ``class_order``.  Task ``i`` therefore owns a contiguous index
block, which matches the row layout of the expandable classifier.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetMissingError

DATA_ROOT_ENV = "CWDCIL_DATA_ROOT"


@dataclass
class Dataset:
    name: str
    train_x: torch.Tensor
    train_y: torch.Tensor  # raw class labels
    test_x: torch.Tensor
    test_y: torch.Tensor
    num_classes: int
    value_range: tuple[float, float] = (-1.0, 1.0)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])


@dataclass
class TaskSpec:
    index: int  # 1-based
    class_ids: tuple[int, ...]  # global indices, contiguous
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def class_slice(self) -> slice:
        return slice(self.class_ids[0], self.class_ids[-1] + 1)


@dataclass
class TaskSequence:
    dataset_name: str
    class_order: tuple[int, ...]
    tasks: list[TaskSpec]
    input_shape: tuple[int, ...]
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> TaskSpec:
        return self.tasks[i]

    def classes_through(self, i: int) -> int:
        """Number of classes seen after task ``i`` (1-based)."""
        return sum(len(t.class_ids) for t in self.tasks[:i])

    def cumulative_test(self, i: int):
        xs = [t.test_x for t in self.tasks[:i]]
        ys = [t.test_y for t in self.tasks[:i]]
        return torch.cat(xs), torch.cat(ys)

    def manifest(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "class_order": list(self.class_order),
            "tasks": [
                {
                    "index": t.index,
                    "global_ids": list(t.class_ids),
                    "raw_classes": [self.class_order[k] for k in t.class_ids],
                    "num_train": len(t.train_y),
                    "num_test": len(t.test_y),
                }
                for t in self.tasks
            ],
        }


# ---------------------------------------------------------------------------
# Class orders and splits
# ---------------------------------------------------------------------------

# Three fixed orders for the 10-class desk dataset, used for multi-order averaging.
DIGITS_CLASS_ORDERS = (
    (0, 1, 2, 3, 4, 5, 6, 7, 8, 9),
    (6, 2, 9, 0, 4, 7, 1, 8, 3, 5),
    (3, 8, 5, 1, 7, 0, 9, 4, 6, 2),
)


def fixed_class_order(num_classes: int, which: int) -> tuple[int, ...]:
    """One of three shipped class orders (order 0 is the identity)."""
    if not 0 <= which < 3:
        raise ValueError("fixed class orders are numbered 0, 1, 2")
    if num_classes == 10:
        return DIGITS_CLASS_ORDERS[which]
    if which == 0:
        return tuple(range(num_classes))
    # Legacy RandomState permutations are stable across numpy releases.
    return tuple(int(c) for c in np.random.RandomState(1993 + which).permutation(num_classes))


def seeded_class_order(num_classes: int, seed: int) -> tuple[int, ...]:
    return tuple(int(c) for c in np.random.default_rng(seed).permutation(num_classes))


def split_tasks(dataset: Dataset, num_tasks: int, class_order=None, seed: int = 0) -> TaskSequence:
    """Chunk ``class_order`` into ``num_tasks`` equal blocks and route samples."""
    if num_tasks < 1 or dataset.num_classes % num_tasks:
        raise ValueError(f"{dataset.num_classes} classes cannot be split evenly into {num_tasks} tasks")
    if class_order is None:
        class_order = seeded_class_order(dataset.num_classes, seed)
    class_order = tuple(int(c) for c in class_order)
    if sorted(class_order) != list(range(dataset.num_classes)):
        raise ValueError("class_order must be a permutation of all class ids")
    remap = torch.empty(dataset.num_classes, dtype=torch.long)
    remap[list(class_order)] = torch.arange(dataset.num_classes)
    train_g = remap[dataset.train_y.long()]
    test_g = remap[dataset.test_y.long()]
    per = dataset.num_classes // num_tasks
    tasks = []
    for i in range(num_tasks):
        lo, hi = i * per, (i + 1) * per
        tr = (train_g >= lo) & (train_g < hi)
        te = (test_g >= lo) & (test_g < hi)
        tasks.append(TaskSpec(i + 1, tuple(range(lo, hi)), dataset.train_x[tr], train_g[tr],
                              dataset.test_x[te], test_g[te]))
    return TaskSequence(dataset.name, class_order, tasks, dataset.input_shape, dataset.value_range)


def batch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    """Shuffle permutation that depends only on ``(seed, epoch)``."""
    key = hashlib.blake2b(f"{seed}:{epoch}".encode(), digest_size=8).digest()
    g = torch.Generator().manual_seed(int.from_bytes(key, "little") & (2 ** 63 - 1))
    return torch.randperm(n, generator=g)


def iterate_batches(x, y, batch_size: int, seed: int, epoch: int, shuffle: bool = True,
                    drop_last: bool = False):
    idx = batch_order(len(x), seed, epoch) if shuffle else torch.arange(len(x))
    for start in range(0, len(x), batch_size):
        sel = idx[start:start + batch_size]
        if drop_last and len(sel) < batch_size:
            break
        yield x[sel], y[sel]


def augment_images(x: torch.Tensor, generator: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop with zero padding plus horizontal flip (CIFAR recipe)."""
    n, c, h, w = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad))
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def _stratified_split(y: np.ndarray, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == k))
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(train), np.sort(test)


def load_digits_dataset(test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """The 8x8 handwritten digits set bundled with scikit-learn, scaled to [-1, 1]."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    x = bunch.images.astype(np.float32) / 8.0 - 1.0
    y = bunch.target.astype(np.int64)
    tr, te = _stratified_split(y, test_fraction, seed)
    x = torch.from_numpy(x[:, None])
    y = torch.from_numpy(y)
    return Dataset("digits", x[tr], y[tr], x[te], y[te], 10)


_CIFAR_MEAN = {"cifar10": (0.4914, 0.4822, 0.4465), "cifar100": (0.5071, 0.4865, 0.4409)}
_CIFAR_STD = {"cifar10": (0.2470, 0.2435, 0.2616), "cifar100": (0.2673, 0.2564, 0.2762)}


def _torchvision_cifar(name: str, root: Path) -> Dataset:
    from torchvision import datasets

    cls = datasets.CIFAR10 if name == "cifar10" else datasets.CIFAR100
    try:
        tr = cls(str(root), train=True, download=False)
        te = cls(str(root), train=False, download=False)
    except RuntimeError as exc:
        raise DatasetMissingError(f"{name} not found under {root}: {exc}") from None
    mean = torch.tensor(_CIFAR_MEAN[name]).view(1, 3, 1, 1)
    std = torch.tensor(_CIFAR_STD[name]).view(1, 3, 1, 1)

    def prep(data):
        x = torch.from_numpy(data).permute(0, 3, 1, 2).float() / 255.0
        return (x - mean) / std

    lo = float(((0 - mean) / std).min())
    hi = float(((1 - mean) / std).max())
    return Dataset(name, prep(tr.data), torch.tensor(tr.targets), prep(te.data),
                   torch.tensor(te.targets), len(tr.classes), (lo, hi))


def _tiny_imagenet(root: Path) -> Dataset:
    from PIL import Image

    base = root / "tiny-imagenet-200"
    if not (base / "wnids.txt").exists():
        raise DatasetMissingError(f"tiny-imagenet-200 not found under {root}")
    wnids = (base / "wnids.txt").read_text().split()
    index = {w: i for i, w in enumerate(wnids)}

    def load(paths):
        arr = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])
        return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 127.5 - 1.0

    train_paths, train_y = [], []
    for w in wnids:
        for p in sorted((base / "train" / w / "images").glob("*.JPEG")):
            train_paths.append(p)
            train_y.append(index[w])
    val_paths, val_y = [], []
    for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
        fname, w = line.split("\t")[:2]
        val_paths.append(base / "val" / "images" / fname)
        val_y.append(index[w])
    return Dataset("tiny-imagenet", load(train_paths), torch.tensor(train_y), load(val_paths),
                   torch.tensor(val_y), len(wnids))


def dataset_root(root: str | os.PathLike | None = None) -> Path:
    return Path(root or os.environ.get(DATA_ROOT_ENV, "~/.cache/cwdcil")).expanduser()


def load_dataset(name: str, root=None, seed: int = 0, oracle: "OracleTaskSpec | None" = None) -> Dataset:
    """Resolve a dataset id. ``digits`` and ``oracle`` need no files on disk."""
    if name == "digits":
        return load_digits_dataset(seed=seed)
    if name == "oracle":
        return make_oracle_dataset(oracle or OracleTaskSpec(seed=seed))
    if name in ("cifar10", "cifar100"):
        return _torchvision_cifar(name, dataset_root(root))
    if name == "tiny-imagenet":
        return _tiny_imagenet(dataset_root(root))
    raise DatasetMissingError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# Tied-Gaussian oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleTaskSpec:
    """Class-conditional Gaussians sharing one covariance.

    When ``means``/``cov`` are omitted they are drawn from ``seed``: means on a
    scaled standard normal, covariance ``A A^T / d + 0.25 I``.
    """

    num_classes: int = 4
    feature_dim: int = 8
    samples_per_class: int = 1000
    test_per_class: int = 200
    separation: float = 3.0
    seed: int = 0
    means: np.ndarray | None = None
    cov: np.ndarray | None = None

    def resolved(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        d = self.feature_dim
        means = self.means
        if means is None:
            means = rng.standard_normal((self.num_classes, d)) * self.separation / np.sqrt(2)
        cov = self.cov
        if cov is None:
            a = rng.standard_normal((d, d))
            cov = a @ a.T / d + 0.25 * np.eye(d)
        means = np.asarray(means, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if means.shape != (self.num_classes, d) or cov.shape != (d, d):
            raise ValueError("oracle means/covariance have the wrong shape")
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("oracle covariance must be symmetric positive semi-definite")
        if len({tuple(m) for m in means}) != self.num_classes:
            raise ValueError("oracle class means must be distinct")
        return means, cov


def sample_oracle(spec: OracleTaskSpec, n_per_class: int, rng: np.random.Generator):
    means, cov = spec.resolved()
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)))
    xs, ys = [], []
    for k, m in enumerate(means):
        xs.append(m + rng.standard_normal((n_per_class, spec.feature_dim)) @ chol.T)
        ys.append(np.full(n_per_class, k))
    return np.concatenate(xs), np.concatenate(ys)


def make_oracle_dataset(spec: OracleTaskSpec) -> Dataset:
    rng = np.random.default_rng([spec.seed, 1])
    xtr, ytr = sample_oracle(spec, spec.samples_per_class, rng)
    xte, yte = sample_oracle(spec, spec.test_per_class, rng)
    f = lambda a: torch.from_numpy(a.astype(np.float32))  # noqa: E731
    return Dataset("oracle", f(xtr), torch.from_numpy(ytr), f(xte), torch.from_numpy(yte),
                   spec.num_classes, (float("-inf"), float("inf")))


def make_oracle_tasks(spec: OracleTaskSpec, num_tasks: int) -> TaskSequence:
    """Oracle data split into tasks in identity class order."""
    return split_tasks(make_oracle_dataset(spec), num_tasks, class_order=range(spec.num_classes))
