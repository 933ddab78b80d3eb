"""Training stage losses, debias comparators and the per-task training loop."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .data import augment_images, iterate_batches
from .errors import NonFiniteLossError
from .model import GeneratorBundle, IncrementalNet, evaluation

log = logging.getLogger(__name__)

DEBIAS_MODES = ("war", "wa", "sce", "none")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list[int] = field(default_factory=lambda: [80, 120])
    lr_gamma: float = 0.1
    hkd_weight: float = 1.0  # lambda_3
    hkd_scale_by_ratio: bool = True
    lce_weight: float = 1.0  # lambda_4
    rkd_weight: float = 0.0  # lambda_5
    war_weight: float = 0.1  # lambda_war
    war_pairing: str = "cross"
    temperature: float = 1.0
    debias_mode: str = "war"
    replay: bool = True
    augment: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.war_weight < 0:
            raise ValueError("war_weight must be >= 0")
        if self.debias_mode not in DEBIAS_MODES:
            raise ValueError(f"debias_mode must be one of {DEBIAS_MODES}")
        if self.war_pairing not in ("cross", "same"):
            raise ValueError("war_pairing must be 'cross' or 'same'")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def hkd_loss(old_logits: torch.Tensor, new_logits_old_slice: torch.Tensor) -> torch.Tensor:
    """Batch-mean L1 distance between logit rows, divided by the old class count."""
    if old_logits.shape != new_logits_old_slice.shape:
        raise ValueError(f"shape mismatch {tuple(old_logits.shape)} vs {tuple(new_logits_old_slice.shape)}")
    k_old = old_logits.shape[1]
    return (old_logits - new_logits_old_slice).abs().sum(1).mean() / k_old


def lce_loss(slice_logits: torch.Tensor, labels: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Cross-entropy with the softmax restricted to one class block.

    ``labels`` are block-local, i.e. in ``[0, slice_logits.shape[1])``.
    """
    k = slice_logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(slice_logits / temperature, labels.long())


def sce_loss(synth_old_logits, synth_labels, real_new_logits, real_labels,
             temperature: float = 1.0) -> torch.Tensor:
    """Two independent local cross-entropies, one per class block."""
    return (lce_loss(synth_old_logits, synth_labels, temperature)
            + lce_loss(real_new_logits, real_labels, temperature))


def _split_ids(k, old_ids, new_ids):
    old_ids = torch.as_tensor(list(old_ids), dtype=torch.long)
    new_ids = torch.as_tensor(list(new_ids), dtype=torch.long)
    if len(old_ids) == 0 or len(new_ids) == 0:
        raise ValueError("old and new class groups must both be non-empty")
    return old_ids, new_ids


def war_targets(weight: torch.Tensor, old_ids, new_ids) -> tuple[float, float]:
    """Detached mean row norms ``(n_old, n_new)``."""
    old_ids, new_ids = _split_ids(len(weight), old_ids, new_ids)
    norms = weight.detach().norm(dim=1)
    return float(norms[old_ids].mean()), float(norms[new_ids].mean())


def war_loss(weight: torch.Tensor, old_ids, new_ids, pairing: str = "cross",
             targets: tuple[float, float] | None = None) -> torch.Tensor:
    """Weight-alignment regulariser on per-class row norms.

    With the default ``cross`` pairing old rows are pulled toward the mean new
    norm and new rows toward the mean old norm; ``same`` pulls each group to
    its own mean.  Group means are constants (no gradient flows through them);
    ``targets`` pins them explicitly.
    """
    old_ids, new_ids = _split_ids(len(weight), old_ids, new_ids)
    n_old, n_new = targets if targets is not None else war_targets(weight, old_ids, new_ids)
    norms = weight.norm(dim=1)
    if pairing == "cross":
        t_old, t_new = n_new, n_old
    elif pairing == "same":
        t_old, t_new = n_old, n_new
    else:
        raise ValueError("pairing must be 'cross' or 'same'")
    total = (norms[old_ids] - t_old).abs().sum() + (norms[new_ids] - t_new).abs().sum()
    return total / (len(old_ids) + len(new_ids))


@torch.no_grad()
def wa_postprocess(weight: torch.Tensor, old_ids, new_ids) -> tuple[torch.Tensor, float]:
    """Scale new-class rows so their mean norm equals the old-class mean norm.

    Returns the rescaled copy and the factor ``gamma``.
    """
    old_ids, new_ids = _split_ids(len(weight), old_ids, new_ids)
    norms = weight.norm(dim=1)
    mean_new = norms[new_ids].mean()
    if mean_new == 0:
        raise ValueError("new-class rows have zero mean norm")
    gamma = float(norms[old_ids].mean() / mean_new)
    out = weight.clone()
    out[new_ids] = out[new_ids] * gamma
    return out, gamma


def angle_rkd_loss(old_features: torch.Tensor, new_features: torch.Tensor) -> torch.Tensor:
    """Simplified angle-preserving relational distillation (non-canonical).

    Matches the cosines of all triplet angles between the old and new feature
    geometry with a smooth-L1 penalty.
    """
    def angles(z):
        diff = z.unsqueeze(0) - z.unsqueeze(1)
        diff = F.normalize(diff, p=2, dim=2)
        return torch.bmm(diff, diff.transpose(1, 2)).view(-1)

    with torch.no_grad():
        target = angles(old_features)
    return F.smooth_l1_loss(angles(new_features), target)


def zero_rkd(old_features, new_features):
    return new_features.new_zeros(())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def prepare_next_model(old_model: IncrementalNet, new_class_count: int, seed: int) -> IncrementalNet:
    """Copy of the old model with ``new_class_count`` freshly initialised head rows."""
    model = copy.deepcopy(old_model)
    for p in model.parameters():
        p.requires_grad_(True)
    return model.expand_classifier(new_class_count, seed=seed)


def _optimizer(model, cfg: TrainConfig):
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.lr_gamma)
    return opt, sched


def hkd_coefficient(cfg: TrainConfig, n_old: int, n_new: int) -> float:
    return cfg.hkd_weight * (n_old / n_new if cfg.hkd_scale_by_ratio else 1.0)


def train_task(model: IncrementalNet, train_x: torch.Tensor, train_y: torch.Tensor,
               new_classes: slice, cfg: TrainConfig, old_model: IncrementalNet | None = None,
               generator: GeneratorBundle | None = None,
               rkd_hook: Callable | None = None, log_path: str | Path | None = None,
               task_seed: int = 0) -> IncrementalNet:
    """Train ``model`` on one task and return it.

    ``train_y`` holds global class indices inside ``new_classes``.  Without an
    old model this is the first-task branch (local CE only).  Otherwise every
    iteration pairs a real batch with an equally sized generated batch.
    """
    cfg.validate()
    first_task = old_model is None
    k_old = new_classes.start
    k_new = new_classes.stop - new_classes.start
    if new_classes.stop != model.num_classes:
        raise ValueError("new_classes must end at the last head row")
    if not first_task and generator is None and cfg.replay:
        raise ValueError("tasks after the first need a generator for replay")
    rkd_hook = rkd_hook or zero_rkd
    mode = cfg.debias_mode
    hkd_w = hkd_coefficient(cfg, k_old, k_new) if not first_task else 0.0
    # Generated batches are only drawn when some loss term consumes them.
    use_replay = (not first_task and cfg.replay and generator is not None
                  and (hkd_w > 0 or mode == "sce"))
    old_ids = range(0, k_old)
    new_ids = range(k_old, k_old + k_new)

    opt, sched = _optimizer(model, cfg)
    noise_g = torch.Generator().manual_seed(task_seed * 7919 + cfg.seed + 11)
    aug_g = torch.Generator().manual_seed(task_seed * 7919 + cfg.seed + 13)
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["epoch", "l_hkd", "l_lce", "l_rkd", "l_war", "total", "train_acc"])
    if old_model is not None:
        for p in old_model.parameters():
            p.requires_grad_(False)
    try:
        model.train()
        for epoch in range(cfg.epochs):
            sums = dict(l_hkd=0.0, l_lce=0.0, l_rkd=0.0, l_war=0.0, total=0.0)
            correct = seen = batches = 0
            for x, y in iterate_batches(train_x, train_y, cfg.batch_size,
                                        seed=cfg.seed * 1000 + task_seed, epoch=epoch):
                if cfg.augment and x.dim() == 4:
                    x = augment_images(x, aug_g)
                b = len(x)
                if use_replay:
                    x_syn = generator.sample(b, generator=noise_g)
                    with torch.no_grad(), evaluation(old_model):
                        old_logits = old_model.forward_logits(x_syn)
                    logits_all = model.forward_logits(torch.cat([x, x_syn]))
                    logits, logits_syn = logits_all[:b], logits_all[b:]
                else:
                    logits = model.forward_logits(x)
                y_local = y - k_old
                zero = logits.new_zeros(())
                l_hkd = l_lce = l_rkd = l_war = zero
                if use_replay and mode == "sce":
                    loss = sce_loss(logits_syn[:, :k_old], old_logits.argmax(1),
                                    logits[:, new_classes], y_local, cfg.temperature)
                    l_lce = loss
                else:
                    l_lce = lce_loss(logits[:, new_classes], y_local, cfg.temperature)
                    loss = cfg.lce_weight * l_lce
                    if use_replay and hkd_w > 0:
                        l_hkd = hkd_loss(old_logits, logits_syn[:, :k_old])
                        loss = loss + hkd_w * l_hkd
                if not first_task and cfg.rkd_weight > 0:
                    with torch.no_grad(), evaluation(old_model):
                        old_feat = old_model.forward_features(x)
                    l_rkd = rkd_hook(old_feat, model.forward_features(x))
                    loss = loss + cfg.rkd_weight * l_rkd
                if not first_task and mode == "war" and cfg.war_weight > 0:
                    l_war = war_loss(model.weight, old_ids, new_ids, cfg.war_pairing)
                    loss = loss + cfg.war_weight * l_war
                if not torch.isfinite(loss):
                    raise NonFiniteLossError("training", f"non-finite training loss in epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                batches += 1
                for key, val in (("l_hkd", l_hkd), ("l_lce", l_lce), ("l_rkd", l_rkd),
                                 ("l_war", l_war), ("total", loss)):
                    sums[key] += float(val.detach())
                correct += int((logits.argmax(1) == y).sum())
                seen += b
            sched.step()
            if writer:
                writer.writerow([epoch] + [f"{sums[k] / max(batches, 1):.6g}" for k in sums]
                                + [f"{correct / max(seen, 1):.6f}"])
    finally:
        if fh:
            fh.close()
    if not first_task and mode == "wa":
        with torch.no_grad():
            w, gamma = wa_postprocess(model.weight, old_ids, new_ids)
            model.weight.copy_(w)
        log.debug("weight aligning applied with gamma=%.4f", gamma)
    model.eval()
    return model
