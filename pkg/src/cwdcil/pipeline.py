"""End-to-end orchestration of the incremental learning loop.

Per task: inversion (tasks after the first), training, estimation.  Only the
model and its class statistics cross a task boundary; each generator is dropped
once the estimation pass that needs it has finished.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .analysis import MetricsRecord, incremental_accuracy, weight_norm_profile
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import OracleTaskSpec, TaskSequence, fixed_class_order, load_dataset, split_tasks
from .errors import ConfigError, StageOrderError
from .inversion import InversionConfig, train_generator
from .model import IncrementalNet, evaluation
from .statistics import (ClassStatistics, collect_estimation_features, estimate_class_stats,
                         group_by_class, kde_kl_mc, mixture_kl_mc)
from .training import angle_rkd_loss, prepare_next_model, train_task

log = logging.getLogger("cwdcil")

VARIANTS = ("cwd", "cwd_minus_dce", "cwd_minus_war", "baseline", "finetune", "wa", "sce")


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------


class Stage(str, Enum):
    INVERSION = "inversion"
    TRAINING = "training"
    ESTIMATION = "estimation"


class StageTracker:
    """Enforces the per-task stage order and the statistics hand-over."""

    def __init__(self):
        self.task = 0
        self.done: list[Stage] = []
        self.stats_task: int | None = None

    def begin_task(self, index: int):
        if index != self.task + 1:
            raise StageOrderError(f"task {index} started after task {self.task}")
        if self.task and Stage.ESTIMATION not in self.done:
            raise StageOrderError(f"task {self.task} finished without estimation")
        self.task = index
        self.done = []

    def enter(self, stage: Stage, stats_from: int | None = None):
        if stage in self.done:
            raise StageOrderError(f"{stage.value} ran twice in task {self.task}")
        if stage is Stage.INVERSION:
            if self.task == 1 or self.done:
                raise StageOrderError("inversion must open a task after the first")
            if stats_from is not None and stats_from != self.task - 1:
                raise StageOrderError(f"inversion at task {self.task} got statistics from task {stats_from}")
        if stage is Stage.ESTIMATION and Stage.TRAINING not in self.done:
            raise StageOrderError("estimation before training")
        if stage is Stage.TRAINING and self.done and self.done[-1] is not Stage.INVERSION:
            raise StageOrderError("training must follow inversion")
        self.done.append(stage)
        if stage is Stage.ESTIMATION:
            self.stats_task = self.task


class JsonLinesFormatter(logging.Formatter):
    def format(self, record):
        payload = {
            "time": round(record.created, 3),
            "level": record.levelname,
            "msg": record.getMessage(),
        }
        for key in ("stage", "task", "event"):
            if hasattr(record, key):
                payload[key] = getattr(record, key)
        return json.dumps(payload)


@contextmanager
def run_logging(out_dir: Path):
    handler = logging.FileHandler(out_dir / "log.jsonl", mode="w")
    handler.setFormatter(JsonLinesFormatter())
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        yield
    finally:
        log.removeHandler(handler)
        handler.close()


def set_determinism(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(deterministic)


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------


def build_tasks(cfg: ExperimentConfig) -> TaskSequence:
    oracle = None
    if cfg.dataset == "oracle":
        oracle = OracleTaskSpec(seed=cfg.seed, **cfg.oracle)
    ds = load_dataset(cfg.dataset, cfg.dataset_root, seed=cfg.seed, oracle=oracle)
    order = cfg.class_order
    try:
        if isinstance(order, int):
            order = fixed_class_order(ds.num_classes, order)
        return split_tasks(ds, cfg.num_tasks, order, seed=cfg.class_order_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out_scale(tasks: TaskSequence) -> float:
    lo, hi = tasks.value_range
    return max(abs(lo), abs(hi)) if np.isfinite(lo) and np.isfinite(hi) else 1.0


def run_experiment(cfg: ExperimentConfig, tasks: TaskSequence | None = None) -> MetricsRecord:
    """Run every task of the sequence and write metrics, checkpoints and logs."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved-config.yaml")
    set_determinism(cfg.seed, cfg.deterministic)
    tasks = tasks or build_tasks(cfg)
    (out / "tasks.json").write_text(json.dumps(tasks.manifest(), indent=2))
    record = MetricsRecord(task_sizes=[len(t.class_ids) for t in tasks])
    tracker = StageTracker()
    chash = cfg.config_hash()
    rkd = angle_rkd_loss if cfg.train.rkd_weight > 0 else None
    model: IncrementalNet | None = None
    stats: ClassStatistics | None = None

    with run_logging(out):
        log.info("run started", extra={"event": "start", "task": 0, "stage": "setup"})
        for task in tasks:
            i = task.index
            tracker.begin_task(i)
            timings: dict[str, float] = {}
            task_dir = out / f"task_{i:02d}"
            task_dir.mkdir(exist_ok=True)
            generator = None
            old_model = model
            train_cfg = replace(cfg.train, seed=cfg.seed)
            if i == 1:
                if cfg.first_task_epochs:
                    train_cfg = replace(train_cfg, epochs=cfg.first_task_epochs)
                model = IncrementalNet.from_spec(cfg.backbone, tasks.input_shape, len(task.class_ids),
                                                 seed=cfg.seed * 1000 + i)
            else:
                if cfg.train.replay:
                    tracker.enter(Stage.INVERSION, stats_from=tracker.stats_task)
                    t0 = time.perf_counter()
                    inv_cfg = replace(cfg.inversion, seed=cfg.seed * 1000 + i)
                    generator = train_generator(
                        old_model, stats, inv_cfg,
                        log_path=task_dir / "inversion.csv",
                        sample_dir=task_dir if inv_cfg.sample_every else None,
                        out_scale=_out_scale(tasks))
                    timings["inversion"] = time.perf_counter() - t0
                    log.info("inversion done", extra={"stage": "inversion", "task": i})
                model = prepare_next_model(old_model, len(task.class_ids), seed=cfg.seed * 1000 + i)
                if cfg.incremental_lr is not None:
                    train_cfg = replace(train_cfg, lr=cfg.incremental_lr)

            tracker.enter(Stage.TRAINING)
            t0 = time.perf_counter()
            train_task(model, task.train_x, task.train_y, task.class_slice, train_cfg,
                       old_model=old_model, generator=generator, rkd_hook=rkd,
                       log_path=task_dir / "train.csv", task_seed=i)
            timings["training"] = time.perf_counter() - t0
            log.info("training done", extra={"stage": "training", "task": i})

            tracker.enter(Stage.ESTIMATION)
            t0 = time.perf_counter()
            feats = collect_estimation_features(
                model, task.train_x, task.train_y, generator, old_model,
                old_class_count=task.class_slice.start if generator is not None else 0,
                new_class_count=len(task.class_ids), batch_size=cfg.estimation_batch_size,
                seed=cfg.seed * 1000 + i)
            stats = estimate_class_stats(feats)
            timings["estimation"] = time.perf_counter() - t0
            del generator

            acc = incremental_accuracy(model, *tasks.cumulative_test(i))
            record.accuracies.append(acc)
            record.stage_seconds.append(timings)
            record.weight_norms.append(model.weight.detach().norm(dim=1).double().tolist())
            sizes = record.task_sizes[:i]
            weight_norm_profile(model.weight, sizes).write_csv(task_dir / "norms.csv")
            (task_dir / "summary.json").write_text(json.dumps({
                "task": i, "A_i": acc, "weight_norms": record.weight_norms[-1],
                "seconds": timings}, indent=2))
            log.info(f"task {i} accuracy {acc:.4f}", extra={"stage": "estimation", "task": i,
                                                              "event": "task_done"})
            if cfg.save_checkpoints:
                save_checkpoint(task_dir / "checkpoint", Checkpoint(
                    model, list(tasks.class_order), stats, chash, i, task_sizes=sizes))
        record.write(out / "metrics.json")
        log.info("run finished", extra={"event": "end", "task": len(tasks), "stage": "done"})
    return record


# ---------------------------------------------------------------------------
# Ablations and sweeps
# ---------------------------------------------------------------------------


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Config for one named ablation / comparator variant."""
    if variant == "cwd":
        return cfg
    if variant == "cwd_minus_dce":
        return cfg.replace(**{"inversion.dce_weight": 0.0})
    if variant == "cwd_minus_war":
        return cfg.replace(**{"train.war_weight": 0.0})
    if variant == "baseline":
        return cfg.replace(**{"inversion.dce_weight": 0.0, "train.war_weight": 0.0})
    if variant == "finetune":
        return cfg.replace(**{"train.replay": False, "train.hkd_weight": 0.0,
                              "train.rkd_weight": 0.0, "train.war_weight": 0.0})
    if variant in ("wa", "sce"):
        return cfg.replace(**{"train.debias_mode": variant, "train.war_weight": 0.0})
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class AblationRow:
    variant: str
    seeds: list[int]
    last_accuracies: list[float]
    norm_gaps: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.last_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.last_accuracies))


def final_norm_gap(record: MetricsRecord) -> float:
    """``|mean n_old - mean n_new|`` of the final head (old = all but the last task)."""
    norms = np.asarray(record.weight_norms[-1])
    k_new = record.task_sizes[-1]
    return float(abs(norms[:-k_new].mean() - norms[-k_new:].mean()))


def run_ablation_suite(cfg: ExperimentConfig, variants=("cwd", "cwd_minus_dce", "cwd_minus_war", "baseline"),
                       seeds=(0, 1, 2), vary_class_order: bool = True) -> list[AblationRow]:
    """Run every variant over shared seeds and write CSV/Markdown tables of A_N."""
    root = Path(cfg.out_dir)
    rows = []
    for variant in variants:
        row = AblationRow(variant, list(seeds), [], [])
        for s in seeds:
            changes = {"seed": s, "out_dir": str(root / variant / f"seed_{s}")}
            if vary_class_order and isinstance(cfg.class_order, int):
                changes["class_order"] = s % 3
            rec = run_experiment(variant_config(cfg, variant).replace(**changes))
            row.last_accuracies.append(rec.last_accuracy)
            row.norm_gaps.append(final_norm_gap(rec) if len(rec.task_sizes) > 1 else 0.0)
        rows.append(row)
    write_ablation_tables(rows, root)
    return rows


def write_ablation_tables(rows: list[AblationRow], out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean_A_N", "std_A_N", "mean_norm_gap", "seeds"])
        for r in rows:
            w.writerow([r.variant, f"{100 * r.mean:.2f}", f"{100 * r.std:.2f}",
                        f"{np.mean(r.norm_gaps):.4f}", " ".join(map(str, r.seeds))])
    lines = ["| Method | A_N (mean ± std %) |", "|---|---|"]
    lines += [f"| {r.variant} | {100 * r.mean:.2f} ± {100 * r.std:.2f} |" for r in rows]
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n")


SWEEP_DCE = (0.01, 0.02, 0.05, 0.1, 0.2)
SWEEP_WAR = (0.02, 0.05, 0.1, 0.2, 0.5)


def run_sweep(cfg: ExperimentConfig, dce_values=SWEEP_DCE, war_values=SWEEP_WAR,
              fixed_war: float = 0.1, fixed_dce: float = 0.05, seeds=(0,)) -> list[dict]:
    """Two-phase search: sweep lambda_dce at fixed lambda_war, then the reverse."""
    root = Path(cfg.out_dir)
    results = []
    grid = [("dce", v, {"inversion.dce_weight": v, "train.war_weight": fixed_war}) for v in dce_values]
    grid += [("war", v, {"inversion.dce_weight": fixed_dce, "train.war_weight": v}) for v in war_values]
    for phase, value, changes in grid:
        accs = []
        for s in seeds:
            run_cfg = cfg.replace(**changes, seed=s, out_dir=str(root / f"{phase}_{value}" / f"seed_{s}"))
            accs.append(run_experiment(run_cfg).last_accuracy)
        results.append({"phase": phase, "value": value, "mean_A_N": float(np.mean(accs)),
                        "std_A_N": float(np.std(accs))})
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["phase", "value", "mean_A_N", "std_A_N"])
        w.writeheader()
        w.writerows(results)
    return results


# ---------------------------------------------------------------------------
# Consistency measurement
# ---------------------------------------------------------------------------


@torch.no_grad()
def extract_features(model: IncrementalNet, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    with evaluation(model):
        return torch.cat([model.forward_features(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def consistency_between(real_feats, real_labels, synth_feats, synth_labels,
                        num_samples: int = 100_000, kde_samples: int = 10_000, seed: int = 0) -> dict:
    """Gaussian-mixture and KDE KL(real || synthetic) for two labelled feature sets."""
    p = estimate_class_stats(group_by_class(real_feats, real_labels))
    q = estimate_class_stats(group_by_class(synth_feats, synth_labels))
    kl_gauss = mixture_kl_mc(p, q, num_samples, seed)
    try:
        kl_kde = kde_kl_mc(real_feats, synth_feats, kde_samples, seed)
    except ValueError as exc:
        log.warning("KDE KL unavailable: %s", exc)
        kl_kde = None
    return {"kl_gaussian": kl_gauss, "kl_kde": kl_kde, "num_samples": num_samples, "seed": seed}


def run_consistency_report(model: IncrementalNet, stats: ClassStatistics | None,
                           real_x: torch.Tensor, real_y: torch.Tensor,
                           inversion_configs: dict[str, InversionConfig], num_samples: int = 100_000,
                           kde_samples: int = 10_000, seed: int = 0, num_generated: int | None = None,
                           out_scale: float = 1.0) -> list[dict]:
    """Invert ``model`` once per config and measure consistency with real old data.

    ``real_x``/``real_y`` are real samples of the classes ``model`` knows.
    """
    real_feats = extract_features(model, real_x)
    n_gen = num_generated or len(real_x)
    reports = []
    for name, inv_cfg in inversion_configs.items():
        gen = train_generator(model, stats, inv_cfg, out_scale=out_scale)
        x_syn = gen.sample(n_gen, generator=torch.Generator().manual_seed(seed + 17))
        with torch.no_grad(), evaluation(model):
            syn_labels = model.forward_logits(x_syn).argmax(1)
        syn_feats = extract_features(model, x_syn)
        rep = consistency_between(real_feats, real_y, syn_feats, syn_labels, num_samples,
                                  kde_samples, seed)
        rep["config"] = {"name": name, **asdict(inv_cfg)}
        reports.append(rep)
    return reports


def load_feature_file(path: str | Path):
    """Dense feature file: one row per sample, label in the last column (.npy/.csv/.txt)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        arr = np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=2)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"{path}: expected a 2-D array with a label column")
    return arr[:, :-1].astype(np.float64), arr[:, -1].astype(np.int64)


def consistency_from_files(real_path, synth_path, num_samples: int = 100_000,
                           kde_samples: int = 10_000, seed: int = 0) -> dict:
    rf, rl = load_feature_file(real_path)
    sf, sl = load_feature_file(synth_path)
    rep = consistency_between(rf, rl, sf, sl, num_samples, kde_samples, seed)
    rep["config"] = {"real": str(real_path), "synthetic": str(synth_path)}
    return rep


# Loss combinations compared in the data-consistency study.
CONSISTENCY_CONFIGS = {
    "ce+div": {"stat_weight": 0.0, "dce_weight": 0.0},
    "stat+div": {"ce_off": True, "dce_weight": 0.0},
    "ce+stat+div": {"dce_weight": 0.0},
    "ce+stat+div+dce": {},
}


def consistency_inversion_configs(base: InversionConfig, names=None) -> dict[str, InversionConfig]:
    out = {}
    for name in names or CONSISTENCY_CONFIGS:
        if name not in CONSISTENCY_CONFIGS:
            raise ValueError(f"unknown consistency config {name!r}")
        changes = dict(CONSISTENCY_CONFIGS[name])
        if changes.pop("ce_off", False):
            changes["ce_weight"] = 0.0
        if "dce_weight" not in changes and base.dce_weight == 0:
            changes["dce_weight"] = InversionConfig().dce_weight
        out[name] = replace(base, **changes)
    return out


# ---------------------------------------------------------------------------
# Bias experiment driver
# ---------------------------------------------------------------------------


def run_bias_experiment(cfg: ExperimentConfig, schemes=None, seeds=(0,), keep_war: bool = False) -> dict[str, list]:
    """Two-task bias study: one task-one model (and generator) per seed, every scheme on top.

    The study measures the bias itself, so the norm regulariser is switched off
    unless ``keep_war`` is set.  Task two reuses the task-one optimiser schedule
    (``incremental_lr`` is ignored) so old and new rows see the same step sizes
    and only the data source differs.
    """
    from .analysis import BIAS_SCHEMES, two_task_bias_experiment

    schemes = list(schemes or BIAS_SCHEMES)
    root = Path(cfg.out_dir)
    results: dict[str, list] = {s: [] for s in schemes}
    for seed in seeds:
        run_cfg = cfg.replace(num_tasks=2, seed=seed)
        set_determinism(seed, run_cfg.deterministic)
        tasks = build_tasks(run_cfg)
        t1 = tasks[0]
        model = IncrementalNet.from_spec(run_cfg.backbone, tasks.input_shape, len(t1.class_ids),
                                         seed=seed * 1000 + 1)
        train_cfg = replace(run_cfg.train, seed=seed)
        t1_cfg = replace(train_cfg, epochs=run_cfg.first_task_epochs) if run_cfg.first_task_epochs else train_cfg
        train_task(model, t1.train_x, t1.train_y, t1.class_slice, t1_cfg, task_seed=1)
        generator = None
        if any(s.startswith("synth") for s in schemes):
            stats = estimate_class_stats(collect_estimation_features(model, t1.train_x, t1.train_y))
            generator = train_generator(model, stats, replace(run_cfg.inversion, seed=seed * 1000 + 2),
                                        out_scale=_out_scale(tasks))
        t2_cfg = train_cfg if keep_war else replace(train_cfg, debias_mode="none")
        for scheme in schemes:
            res = two_task_bias_experiment(scheme, tasks, model, t2_cfg, generator, seed=seed)
            res.write(root / f"seed_{seed}")
            results[scheme].append(res)
    return results


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def plot_run(run_dir: str | Path) -> list[Path]:
    """Regenerate PNGs (norm bars, R-bar curves, accuracy curve) from a run's CSV/JSON outputs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    written = []
    for norms_csv in sorted(run_dir.rglob("norm*.csv")):
        with open(norms_csv) as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        ids = [int(r["class_id"]) for r in rows]
        tids = [int(r["task_id"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(ids, [float(r["norm"]) for r in rows], color=[f"C{(t - 1) % 10}" for t in tids])
        ax.set_xlabel("class")
        ax.set_ylabel("weight norm")
        fig.tight_layout()
        png = norms_csv.with_suffix(".png")
        fig.savefig(png)
        plt.close(fig)
        written.append(png)
    for rbar_csv in sorted(run_dir.rglob("rbar_*.csv")):
        with open(rbar_csv) as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(5, 3))
        ep = [int(r["epoch"]) for r in rows]
        ax.plot(ep, [float(r["r_real"]) for r in rows], label="real")
        ax.plot(ep, [float(r["r_synth"]) for r in rows], label="old data")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean direction ratio")
        ax.legend()
        fig.tight_layout()
        png = rbar_csv.with_suffix(".png")
        fig.savefig(png)
        plt.close(fig)
        written.append(png)
    metrics = run_dir / "metrics.json"
    if metrics.exists():
        rec = MetricsRecord.read(metrics)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(range(1, len(rec.accuracies) + 1), [100 * a for a in rec.accuracies], marker="o")
        ax.set_xlabel("task")
        ax.set_ylabel("accuracy (%)")
        fig.tight_layout()
        fig.savefig(run_dir / "accuracy.png")
        plt.close(fig)
        written.append(run_dir / "accuracy.png")
    return written
