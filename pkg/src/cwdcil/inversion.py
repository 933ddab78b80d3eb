"""Inversion stage: train a fresh generator against the frozen old model.

The objective is ``L_ce + l1 * L_stat + l2 * L_div + l_dce * L_dce``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import NonFiniteLossError
from .model import BNStatsRecorder, GeneratorBundle, IncrementalNet, build_generator, evaluation
from .statistics import BatchStatistics, ClassStatistics, batch_stats, dce_loss

log = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    ce_weight: float = 1.0
    stat_weight: float = 1.0  # lambda_1
    div_weight: float = 1.0  # lambda_2
    dce_weight: float = 0.05  # lambda_dce
    temperature: float = 1.0
    noise_dim: int = 128
    generator_width: int = 64
    # +1 minimises negative entropy (maximises class balance); -1 is the literal form.
    div_sign: float = 1.0
    seed: int = 0
    log_every: int = 50
    sample_every: int = 0

    def validate(self):
        if self.steps < 1:
            raise ValueError("inversion steps must be >= 1")
        if self.dce_weight < 0:
            raise ValueError("dce_weight must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 2:
            raise ValueError("inversion batch size must be >= 2")


def inversion_ce_loss(old_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Temperature-scaled cross-entropy of each row against its own argmax."""
    if old_logits.shape[1] < 2:
        raise ValueError("need at least 2 old classes")
    targets = old_logits.argmax(dim=1)
    return F.cross_entropy(old_logits / temperature, targets)


def gaussian_kl(mean_p, var_p, mean_q, var_q) -> torch.Tensor:
    """Elementwise KL(N(mean_p, var_p) || N(mean_q, var_q))."""
    return 0.5 * (torch.log(var_q / var_p) + (var_p + (mean_p - mean_q) ** 2) / var_q - 1.0)


def bn_stat_loss(running_stats, batch_stats_list) -> torch.Tensor:
    """Sum over layers of the channel-averaged KL from running to batch statistics."""
    if len(running_stats) != len(batch_stats_list):
        raise ValueError("running and batch statistics cover different numbers of layers")
    total = None
    for (mu, var), (mu_hat, var_hat) in zip(running_stats, batch_stats_list):
        if mu.shape != mu_hat.shape or var.shape != var_hat.shape:
            raise ValueError("per-layer statistic shapes differ")
        if (var <= 0).any() or (var_hat <= 0).any():
            raise ValueError("variances must be strictly positive")
        term = gaussian_kl(mu.to(mu_hat.dtype), var.to(var_hat.dtype), mu_hat, var_hat).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no normalization layers")
    return total


def diversity_loss(mean_softmax: torch.Tensor, sign: float = 1.0, atol: float = 1e-4) -> torch.Tensor:
    """Negative entropy of the batch-averaged class distribution.

    Minimised by the uniform vector (value ``-ln K``).  ``sign=-1`` gives the
    plain entropy instead.
    """
    p = mean_softmax
    if p.dim() != 1 or (p.detach() < 0).any() or abs(float(p.detach().sum()) - 1.0) > atol:
        raise ValueError("mean_softmax must be a probability vector")
    plogp = torch.where(p > 0, p * torch.log(p.clamp_min(1e-300)), torch.zeros_like(p))
    return sign * plogp.sum()


def _save_grid(samples: torch.Tensor, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = samples[:64].detach().cpu()
    n = x.shape[0]
    cols = int(math.ceil(math.sqrt(n)))
    fig, axes = plt.subplots(cols, cols, figsize=(cols, cols))
    for ax, i in zip(axes.flat, range(cols * cols)):
        ax.axis("off")
        if i < n:
            img = x[i].permute(1, 2, 0).squeeze(-1).numpy()
            ax.imshow((img - img.min()) / (img.max() - img.min() + 1e-8), cmap="gray")
    fig.savefig(path, dpi=80)
    plt.close(fig)


def _known_classes(batch: BatchStatistics, stored: ClassStatistics) -> BatchStatistics:
    # A class can be missing from the stored statistics when the previous
    # estimation pass never produced it; such classes have no mean target.
    keep = [i for i, k in enumerate(batch.class_ids) if k in stored.class_ids]
    if len(keep) == len(batch.class_ids):
        return batch
    return BatchStatistics(tuple(batch.class_ids[i] for i in keep), batch.batch_means[keep],
                           batch.batch_cov, tuple(batch.counts[i] for i in keep))


def inversion_losses(old_model: IncrementalNet, x_hat: torch.Tensor, cfg: InversionConfig,
                     stored_stats: ClassStatistics | None):
    """All inversion loss terms for one generated batch (old model in eval mode)."""
    recorder = BNStatsRecorder(old_model)
    with recorder:
        feats = old_model.forward_features(x_hat)
    logits = old_model.classifier(feats)
    l_ce = inversion_ce_loss(logits, cfg.temperature)
    # Batch-norm normalises with var + eps; compare the same quantities.
    running = [(m.running_mean, m.running_var + m.eps) for m in recorder.layers]
    observed = [(mu, var + m.eps) for (mu, var), m in zip(recorder.stats, recorder.layers)]
    l_stat = bn_stat_loss(running, observed) if running else logits.new_zeros(())
    l_div = diversity_loss(F.softmax(logits, dim=1).mean(0), sign=cfg.div_sign)
    if stored_stats is not None:
        l_dce = dce_loss(_known_classes(batch_stats(feats, logits.argmax(1)), stored_stats),
                         stored_stats)
    else:
        l_dce = logits.new_zeros(())
    total = cfg.ce_weight * l_ce + cfg.stat_weight * l_stat + cfg.div_weight * l_div + cfg.dce_weight * l_dce
    return {"l_ce": l_ce, "l_stat": l_stat, "l_div": l_div, "l_dce": l_dce, "total": total}


def train_generator(old_model: IncrementalNet, stored_stats: ClassStatistics | None,
                    cfg: InversionConfig, generator: GeneratorBundle | None = None,
                    log_path: str | Path | None = None, sample_dir: str | Path | None = None,
                    out_scale: float = 1.0) -> GeneratorBundle:
    """Run ``cfg.steps`` Adam steps on the inversion objective and return the generator.

    The old model is used in evaluation mode with gradients disabled for its
    parameters, so neither its weights nor its running statistics change.
    """
    cfg.validate()
    if cfg.dce_weight > 0 and stored_stats is None:
        raise ValueError("dce_weight > 0 requires stored class statistics")
    if generator is None:
        generator = build_generator(old_model.input_shape, cfg.noise_dim, seed=cfg.seed,
                                    width=cfg.generator_width, out_scale=out_scale)
    generator.train()
    opt = torch.optim.Adam(generator.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    flags = [p.requires_grad for p in old_model.parameters()]
    for p in old_model.parameters():
        p.requires_grad_(False)

    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "l_ce", "l_stat", "l_div", "l_dce", "total"])
    try:
        with evaluation(old_model):
            for step in range(1, cfg.steps + 1):
                x_hat = generator(generator.noise(cfg.batch_size, g))
                losses = inversion_losses(old_model, x_hat, cfg, stored_stats)
                total = losses["total"]
                if not torch.isfinite(total):
                    raise NonFiniteLossError("inversion", f"non-finite inversion loss at step {step}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                if writer is not None and (step % cfg.log_every == 0 or step == cfg.steps):
                    writer.writerow([step] + [f"{float(losses[k].detach()):.6g}" for k in
                                              ("l_ce", "l_stat", "l_div", "l_dce", "total")])
                if sample_dir is not None and cfg.sample_every and step % cfg.sample_every == 0:
                    _save_grid(x_hat, Path(sample_dir) / f"inversion_{step:06d}.png")
    finally:
        for p, flag in zip(old_model.parameters(), flags):
            p.requires_grad_(flag)
        if fh is not None:
            fh.close()
    log.debug("generator trained for %d steps", cfg.steps)
    return generator
