"""Evaluation metrics and classifier-bias diagnostics.

Includes the two-task bias experiment used to study how old/new class weight
norms drift under different old-data / loss combinations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import TaskSequence, batch_order, iterate_batches
from .model import IncrementalNet, evaluation

BIAS_SCHEMES = ("synthHKD_realLCE", "realLCE_realLCE", "realHKD_realLCE", "synthLCE_realLCE")


@dataclass
class MetricsRecord:
    accuracies: list[float] = field(default_factory=list)  # A_1 .. A_N
    stage_seconds: list[dict] = field(default_factory=list)
    weight_norms: list[list[float]] = field(default_factory=list)
    task_sizes: list[int] = field(default_factory=list)

    @property
    def last_accuracy(self) -> float:
        return self.accuracies[-1]

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["A_N"] = self.last_accuracy if self.accuracies else None
        d["A_mean"] = self.average_accuracy if self.accuracies else None
        return d

    def write(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read(cls, path: str | Path) -> "MetricsRecord":
        d = json.loads(Path(path).read_text())
        return cls(d["accuracies"], d["stage_seconds"], d["weight_norms"], d["task_sizes"])


@torch.no_grad()
def predict(model: IncrementalNet, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    with evaluation(model):
        return torch.cat([model.forward_logits(x[i:i + batch_size]).argmax(1)
                          for i in range(0, len(x), batch_size)])


def incremental_accuracy(model: IncrementalNet, test_x: torch.Tensor, test_y: torch.Tensor) -> float:
    """Fraction of samples whose global argmax logit equals the label."""
    if len(test_y) == 0:
        raise ValueError("empty test set")
    return float((predict(model, test_x) == test_y).double().mean())


@dataclass
class NormProfile:
    norms: np.ndarray
    task_ids: np.ndarray
    task_means: np.ndarray

    def group_gap(self, old: slice, new: slice) -> float:
        """``|mean n_old - mean n_new|`` for two row ranges."""
        return float(abs(self.norms[old].mean() - self.norms[new].mean()))

    def write_csv(self, path: str | Path, class_offset: int = 0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "task_id", "norm"])
            for k, (t, n) in enumerate(zip(self.task_ids, self.norms)):
                w.writerow([k + class_offset, int(t), f"{n:.8g}"])


def weight_norm_profile(weight, task_sizes: Sequence[int]) -> NormProfile:
    """Per-class row norms of the head plus per-task means (tasks numbered from 1)."""
    w = weight.detach().cpu().double().numpy() if isinstance(weight, torch.Tensor) else np.asarray(weight, float)
    if sum(task_sizes) != len(w) or min(task_sizes) < 1:
        raise ValueError("task sizes must partition the weight rows")
    norms = np.linalg.norm(w, axis=1)
    task_ids = np.repeat(np.arange(1, len(task_sizes) + 1), task_sizes)
    means = np.array([norms[task_ids == t].mean() for t in range(1, len(task_sizes) + 1)])
    return NormProfile(norms, task_ids, means)


def gradient_direction_ratio(grads) -> float:
    """``||sum_m g_m|| / sum_m ||g_m||``; 1 means all gradients point the same way."""
    g = torch.stack([torch.as_tensor(v, dtype=torch.float64).flatten() for v in grads])
    denom = g.norm(dim=1).sum()
    if denom == 0:
        raise ValueError("all gradients are zero")
    return float(g.sum(0).norm() / denom)


def mean_direction_ratio(ratios) -> float:
    ratios = list(ratios)
    if not ratios:
        raise ValueError("no ratios given")
    return float(np.mean(ratios))


class DirectionRatioMeter:
    """Accumulates per-batch gradients of the head rows over one epoch."""

    def __init__(self, rows: torch.Tensor):
        self.rows = rows
        self.reset()

    def reset(self):
        self.sum = None
        self.norm_sum = None

    def add(self, grad: torch.Tensor):
        g = grad[self.rows].detach().double()
        if self.sum is None:
            self.sum = torch.zeros_like(g)
            self.norm_sum = torch.zeros(len(g), dtype=torch.float64)
        self.sum += g
        self.norm_sum += g.norm(dim=1)

    def value(self) -> float:
        ok = self.norm_sum > 0
        r = self.sum.norm(dim=1)[ok] / self.norm_sum[ok]
        return mean_direction_ratio(r.tolist())


# ---------------------------------------------------------------------------
# Two-task bias experiment
# ---------------------------------------------------------------------------


@dataclass
class BiasExperimentResult:
    scheme: str
    profile: NormProfile
    r_real: list[float]  # new-class rows, trained on real data
    r_synth: list[float]  # old-class rows, trained on the scheme's old data
    old_slice: slice
    new_slice: slice

    @property
    def mean_old(self) -> float:
        return float(self.profile.norms[self.old_slice].mean())

    @property
    def mean_new(self) -> float:
        return float(self.profile.norms[self.new_slice].mean())

    @property
    def relative_gap(self) -> float:
        return abs(self.mean_old - self.mean_new) / float(self.profile.norms.mean())

    def write(self, out_dir: str | Path):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.profile.write_csv(out / f"norms_{self.scheme}.csv")
        with open(out / f"rbar_{self.scheme}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "r_real", "r_synth"])
            for e, (a, b) in enumerate(zip(self.r_real, self.r_synth)):
                w.writerow([e, f"{a:.8g}", f"{b:.8g}"])


def two_task_bias_experiment(scheme: str, tasks: TaskSequence, model: IncrementalNet,
                             train_cfg, generator=None, seed: int = 0) -> BiasExperimentResult:
    """Train task two of a two-task split under ``scheme`` and record bias diagnostics.

    ``model`` is the trained task-one model (left untouched).  Synthetic
    schemes need ``generator`` inverted from that model; synthetic samples are
    labelled by its argmax.  R-bar is logged each epoch for both halves of the
    head from the per-batch gradients of each half's own loss term.
    """
    from .training import hkd_loss, lce_loss, prepare_next_model, war_loss

    if scheme not in BIAS_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if len(tasks) != 2:
        raise ValueError("the bias experiment needs a two-task split")
    synthetic = scheme.startswith("synth")
    if synthetic and generator is None:
        raise ValueError(f"scheme {scheme} needs a generator")
    old_loss = "hkd" if "HKD" in scheme.split("_")[0] else "lce"

    t1, t2 = tasks[0], tasks[1]
    k_old = len(t1.class_ids)
    k_new = len(t2.class_ids)
    old_model = model
    net = prepare_next_model(old_model, k_new, seed=seed + 101)
    for p in old_model.parameters():
        p.requires_grad_(False)
    opt = torch.optim.SGD(net.parameters(), lr=train_cfg.lr, momentum=train_cfg.momentum,
                          weight_decay=train_cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(train_cfg.milestones), train_cfg.lr_gamma)
    noise_g = torch.Generator().manual_seed(seed + 202)
    meter_old = DirectionRatioMeter(torch.arange(k_old))
    meter_new = DirectionRatioMeter(torch.arange(k_old, k_old + k_new))
    r_real, r_synth = [], []
    tau = train_cfg.temperature
    war_w = train_cfg.war_weight if train_cfg.debias_mode == "war" else 0.0

    for epoch in range(train_cfg.epochs):
        net.train()
        meter_old.reset()
        meter_new.reset()
        old_perm = batch_order(len(t1.train_x), seed + 303, epoch)
        cursor = 0
        for x, y in iterate_batches(t2.train_x, t2.train_y, train_cfg.batch_size, seed, epoch):
            b = len(x)
            if synthetic:
                x_old = generator.sample(b, generator=noise_g)
                with torch.no_grad(), evaluation(old_model):
                    y_old = old_model.forward_logits(x_old).argmax(1)
            else:
                sel = old_perm[torch.arange(cursor, cursor + b) % len(old_perm)]
                cursor += b
                x_old, y_old = t1.train_x[sel], t1.train_y[sel]
            logits = net.forward_logits(torch.cat([x, x_old]))
            new_logits, old_logits = logits[:b], logits[b:]
            l_new = lce_loss(new_logits[:, k_old:], y - k_old, tau)
            if old_loss == "hkd":
                with torch.no_grad(), evaluation(old_model):
                    target = old_model.forward_logits(x_old)
                l_old = hkd_loss(target, old_logits[:, :k_old])
            else:
                l_old = lce_loss(old_logits[:, :k_old], y_old, tau)
            g_new, = torch.autograd.grad(l_new, net.weight, retain_graph=True)
            g_old, = torch.autograd.grad(l_old, net.weight, retain_graph=True)
            meter_new.add(g_new)
            meter_old.add(g_old)
            loss = l_new + l_old
            if war_w > 0:
                loss = loss + war_w * war_loss(net.weight, range(k_old), range(k_old, k_old + k_new))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
        r_real.append(meter_new.value())
        r_synth.append(meter_old.value())
    net.eval()
    profile = weight_norm_profile(net.weight, [k_old, k_new])
    return BiasExperimentResult(scheme, profile, r_real, r_synth, slice(0, k_old),
                                slice(k_old, k_old + k_new))


def fraction_real_above_synth(result: BiasExperimentResult) -> float:
    pairs = list(zip(result.r_real, result.r_synth))
    return sum(a > b for a, b in pairs) / len(pairs) if pairs else math.nan
