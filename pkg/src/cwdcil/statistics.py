"""Tied-Gaussian class statistics, the DCE alignment loss and consistency meters.

Feature distributions are modelled as a mixture ``sum_k p(k) N(u_k, S)`` with a
single covariance ``S`` shared by every class.  Stored statistics are kept in
float64 numpy arrays; the differentiable pieces (batch statistics and the DCE
loss) work on torch tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from scipy import linalg
from scipy.special import logsumexp


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ClassStatistics:
    """Per-class means, one tied covariance and per-class sample counts."""

    class_ids: tuple[int, ...]
    means: np.ndarray  # (C, d)
    tied_cov: np.ndarray  # (d, d)
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(k) for k in self.class_ids))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "means", _frozen(self.means))
        object.__setattr__(self, "tied_cov", _frozen(self.tied_cov))
        c, d = self.means.shape
        if len(self.class_ids) != c or len(self.counts) != c:
            raise ValueError("class_ids, means and counts disagree in length")
        if len(set(self.class_ids)) != c:
            raise ValueError("duplicate class ids")
        if self.tied_cov.shape != (d, d):
            raise ValueError("tied covariance shape does not match feature dimension")
        if min(self.counts) < 1:
            raise ValueError("every class needs at least one sample")

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    @property
    def priors(self) -> np.ndarray:
        counts = np.asarray(self.counts, dtype=np.float64)
        return counts / counts.sum()

    def mean_of(self, class_id: int) -> np.ndarray:
        return self.means[self.class_ids.index(class_id)]

    def subset(self, class_ids) -> "ClassStatistics":
        """Statistics restricted to ``class_ids`` (covariance kept as is)."""
        idx = [self.class_ids.index(k) for k in class_ids]
        return ClassStatistics(tuple(class_ids), self.means[idx], self.tied_cov,
                               tuple(self.counts[i] for i in idx))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "class_ids": np.asarray(self.class_ids, dtype=np.int64),
            "means": np.asarray(self.means),
            "tied_cov": np.asarray(self.tied_cov),
            "counts": np.asarray(self.counts, dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ClassStatistics":
        return cls(tuple(arrays["class_ids"].tolist()), arrays["means"], arrays["tied_cov"],
                   tuple(arrays["counts"].tolist()))


@dataclass
class BatchStatistics:
    """Differentiable statistics of one generated batch.

    Only classes that actually occur in the batch are present.
    """

    class_ids: tuple[int, ...]
    batch_means: torch.Tensor  # (C_present, d)
    batch_cov: torch.Tensor  # (d, d)
    counts: tuple[int, ...]


def _as_float64(z) -> np.ndarray:
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    return np.asarray(z, dtype=np.float64)


def estimate_class_stats(features_by_class: Mapping[int, object]) -> ClassStatistics:
    """Fit class means and the biased tied covariance (divisor = total count)."""
    if not features_by_class:
        raise ValueError("no classes given")
    ids = sorted(features_by_class)
    feats = [_as_float64(features_by_class[k]) for k in ids]
    dims = {f.shape[1] if f.ndim == 2 else -1 for f in feats}
    if len(dims) != 1 or -1 in dims:
        raise ValueError("all feature sets must be 2-D with a common dimension")
    if any(len(f) == 0 for f in feats):
        raise ValueError("every class needs at least one feature vector")
    d = dims.pop()
    means = np.stack([f.mean(axis=0) for f in feats])
    scatter = np.zeros((d, d))
    total = 0
    for f, u in zip(feats, means):
        c = f - u
        scatter += c.T @ c
        total += len(f)
    cov = scatter / total
    cov = 0.5 * (cov + cov.T)
    return ClassStatistics(tuple(ids), means, cov, tuple(len(f) for f in feats))


def group_by_class(features, labels) -> dict[int, np.ndarray]:
    feats = _as_float64(features)
    labels = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    return {int(k): feats[labels == k] for k in np.unique(labels)}


def batch_stats(features: torch.Tensor, labels: torch.Tensor) -> BatchStatistics:
    """Per-class batch means and the batch tied covariance (divisor = |B|)."""
    if features.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    labels = labels.long()
    present, inverse, counts = torch.unique(labels, return_inverse=True, return_counts=True)
    onehot = torch.zeros(features.shape[0], len(present), dtype=features.dtype)
    onehot[torch.arange(features.shape[0]), inverse] = 1.0
    means = (onehot.T @ features) / counts.to(features.dtype)[:, None]
    centered = features - means[inverse]
    cov = centered.T @ centered / features.shape[0]
    return BatchStatistics(tuple(present.tolist()), means, cov, tuple(counts.tolist()))


def dce_loss(batch: BatchStatistics, stored: ClassStatistics) -> torch.Tensor:
    """Sum of per-class mean distances plus the Frobenius covariance gap."""
    try:
        idx = [stored.class_ids.index(k) for k in batch.class_ids]
    except ValueError as exc:
        raise ValueError(f"batch contains a class unknown to the stored statistics: {exc}") from None
    ref = batch.batch_means
    u = torch.tensor(stored.means[idx], dtype=ref.dtype)
    cov = torch.tensor(stored.tied_cov, dtype=ref.dtype)
    mean_term = torch.linalg.vector_norm(ref - u, dim=1).sum()
    return mean_term + torch.linalg.matrix_norm(batch.batch_cov - cov, ord="fro")


# ---------------------------------------------------------------------------
# Monte-Carlo KL between tied-Gaussian mixtures
# ---------------------------------------------------------------------------


def _jittered_cholesky(cov: np.ndarray, jitter: float) -> np.ndarray:
    d = cov.shape[0]
    scale = float(np.mean(np.diag(cov)))
    eps = jitter * scale if scale > 0 else jitter
    try:
        return linalg.cholesky(cov + eps * np.eye(d), lower=True)
    except linalg.LinAlgError:
        raise ValueError("covariance is not positive definite after jitter") from None


def _mixture_logpdf(z: np.ndarray, stats: ClassStatistics, chol: np.ndarray) -> np.ndarray:
    d = stats.feature_dim
    y = linalg.solve_triangular(chol, z.T, lower=True).T
    m = linalg.solve_triangular(chol, stats.means.T, lower=True).T
    sq = (y ** 2).sum(1)[:, None] - 2.0 * y @ m.T + (m ** 2).sum(1)[None, :]
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    comp = -0.5 * (sq + log_det + d * math.log(2 * math.pi))
    with np.errstate(divide="ignore"):
        log_prior = np.log(stats.priors)
    return logsumexp(comp + log_prior[None, :], axis=1)


def low_variance_kl(log_p: np.ndarray, log_q: np.ndarray) -> float:
    """Mean of ``(r - 1) - log r`` with ``r = q/p`` on samples drawn from ``p``.

    Unbiased for KL(p || q) and non-negative per sample.
    """
    log_r = log_q - log_p
    return float(np.mean(np.expm1(log_r) - log_r))


def mixture_kl_mc(p: ClassStatistics, q: ClassStatistics, num_samples: int = 100_000,
                  seed: int = 0, jitter: float = 1e-6) -> float:
    """Monte-Carlo estimate of KL(p || q) for two tied-Gaussian mixtures."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if p.feature_dim != q.feature_dim:
        raise ValueError("mixtures have different feature dimensions")
    rng = np.random.default_rng(seed)
    chol_p = _jittered_cholesky(p.tied_cov, jitter)
    chol_q = _jittered_cholesky(q.tied_cov, jitter)
    comp = rng.choice(len(p.class_ids), size=num_samples, p=p.priors)
    eps = rng.standard_normal((num_samples, p.feature_dim))
    z = p.means[comp] + eps @ chol_p.T
    return low_variance_kl(_mixture_logpdf(z, p, chol_p), _mixture_logpdf(z, q, chol_q))


# ---------------------------------------------------------------------------
# Kernel density estimates
# ---------------------------------------------------------------------------


def scott_bandwidth(reference: np.ndarray) -> np.ndarray:
    """Per-dimension Gaussian kernel widths: ``n**(-1/(d+4)) * std`` (ddof=1)."""
    n, d = reference.shape
    if n < 2:
        raise ValueError("KDE needs at least 2 reference points")
    h = n ** (-1.0 / (d + 4)) * reference.std(axis=0, ddof=1)
    if np.any(h <= 0):
        raise ValueError("degenerate reference set: zero bandwidth in some dimension")
    return h


def _as_2d(a) -> np.ndarray:
    a = _as_float64(a)
    return a[:, None] if a.ndim == 1 else a


def kde_log_density(reference, query, bandwidth: np.ndarray | None = None,
                    chunk: int = 2048) -> np.ndarray:
    """Log density of a diagonal-bandwidth Gaussian KDE at ``query`` points."""
    ref = _as_2d(reference)
    qry = _as_2d(query)
    if ref.shape[1] != qry.shape[1]:
        raise ValueError("reference and query dimensions differ")
    h = scott_bandwidth(ref) if bandwidth is None else np.asarray(bandwidth, dtype=np.float64)
    n, d = ref.shape
    r = ref / h
    r_sq = (r ** 2).sum(1)
    norm = -math.log(n) - np.log(h).sum() - 0.5 * d * math.log(2 * math.pi)
    out = np.empty(len(qry))
    for start in range(0, len(qry), chunk):
        x = qry[start:start + chunk] / h
        sq = (x ** 2).sum(1)[:, None] - 2.0 * x @ r.T + r_sq[None, :]
        np.maximum(sq, 0.0, out=sq)
        out[start:start + chunk] = logsumexp(-0.5 * sq, axis=1) + norm
    return out


def kde_kl_mc(real_features, synth_features, num_samples: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo KL(real || synth) between two KDE densities.

    Samples come from the real-feature KDE: resample a reference point, then
    add kernel noise.
    """
    real = _as_2d(real_features)
    synth = _as_2d(synth_features)
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    h_real = scott_bandwidth(real)
    h_synth = scott_bandwidth(synth)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(real), size=num_samples)
    x = real[idx] + rng.standard_normal((num_samples, real.shape[1])) * h_real
    log_p = kde_log_density(real, x, h_real)
    log_q = kde_log_density(synth, x, h_synth)
    return low_variance_kl(log_p, log_q)


# ---------------------------------------------------------------------------
# Estimation-stage feature collection
# ---------------------------------------------------------------------------


@torch.no_grad()
def collect_estimation_features(model, real_x: torch.Tensor, real_y: torch.Tensor,
                                generator=None, old_model=None, old_class_count: int = 0,
                                new_class_count: int = 1, batch_size: int = 128,
                                seed: int = 0) -> dict[int, np.ndarray]:
    """Features under ``model`` of all real task samples plus replayed old ones.

    The replayed count is ``old_class_count / new_class_count`` times the real
    count, generated batch by batch; each replayed sample is labelled by the
    old model's argmax.
    """
    from .model import evaluation

    if old_class_count > 0 and (generator is None or old_model is None):
        raise ValueError("old classes exist but no generator/old model was given")
    feats, labels = [], []
    with evaluation(model):
        for start in range(0, len(real_x), batch_size):
            feats.append(model.forward_features(real_x[start:start + batch_size]))
            labels.append(real_y[start:start + batch_size])
        if old_class_count > 0:
            target = int(round(old_class_count / new_class_count * len(real_x)))
            g = torch.Generator().manual_seed(seed)
            made = 0
            with evaluation(old_model):
                while made < target:
                    n = min(batch_size, target - made)
                    x_hat = generator.sample(n, generator=g)
                    labels.append(old_model.forward_logits(x_hat).argmax(1))
                    feats.append(model.forward_features(x_hat))
                    made += n
    return group_by_class(torch.cat(feats), torch.cat(labels))
