"""Acceptance suite: one test (or group) per criterion, each tagged with its number.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion.  Criteria 5-8 train real models and
take several minutes on one CPU core.
"""

import dataclasses
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from cwdcil.analysis import fraction_real_above_synth
from cwdcil.config import resolve_config
from cwdcil.data import OracleTaskSpec, sample_oracle
from cwdcil.inversion import bn_stat_loss, diversity_loss, inversion_ce_loss
from cwdcil.model import IncrementalNet
from cwdcil.pipeline import build_tasks, run_ablation_suite, run_bias_experiment, run_consistency_report
from cwdcil.statistics import (ClassStatistics, batch_stats, collect_estimation_features, dce_loss,
                               estimate_class_stats, group_by_class, mixture_kl_mc)
from cwdcil.training import hkd_loss, lce_loss, sce_loss, train_task, wa_postprocess, war_loss, war_targets

SEEDS = (0, 1, 2)
F64 = torch.float64


# ---------------------------------------------------------------------------
# 1. Gaussian KL oracle
# ---------------------------------------------------------------------------


def _single(mean):
    mean = np.asarray(mean, float)[None]
    return ClassStatistics((0,), mean, np.eye(mean.shape[1]), (1,))


@pytest.mark.criterion(1, "Monte-Carlo mixture KL matches the closed form; self-KL ~ 0; < 10 s")
def test_c01_gaussian_kl_oracle():
    start = time.perf_counter()
    for d in (2, 8):
        mu = np.linspace(0.5, 1.0, d) / math.sqrt(d) * 1.5
        exact = 0.5 * float(mu @ mu)
        est = mixture_kl_mc(_single(np.zeros(d)), _single(mu), 100_000, seed=d)
        assert abs(est - exact) / exact < 0.02, (d, est, exact)
        p = _single(np.zeros(d))
        assert abs(mixture_kl_mc(p, p, 100_000, seed=d + 1)) <= 0.02
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 2. Estimator consistency
# ---------------------------------------------------------------------------


@pytest.mark.criterion(2, "estimate_class_stats recovers oracle means/covariance within 0.1; < 30 s")
def test_c02_estimator_consistency():
    start = time.perf_counter()
    spec = OracleTaskSpec(num_classes=4, feature_dim=8, seed=11)
    means, cov = spec.resolved()
    x, y = sample_oracle(spec, 10_000, np.random.default_rng(0))
    stats = estimate_class_stats(group_by_class(x, y))
    for k in range(4):
        assert np.linalg.norm(stats.mean_of(k) - means[k]) < 0.1
    assert np.linalg.norm(stats.tied_cov - cov, "fro") < 0.1
    assert time.perf_counter() - start < 30.0


# ---------------------------------------------------------------------------
# 3. Finite-difference gradient suite
# ---------------------------------------------------------------------------


def _fd_check(fn, *inputs, h=1e-6, tol=1e-3):
    """Central differences against autograd for every input; returns the worst relative error."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*inputs), inputs)
    worst = 0.0
    for i, (x, g) in enumerate(zip(inputs, grads)):
        fd = torch.zeros_like(x)
        flat = fd.view(-1)
        for j in range(x.numel()):
            plus = [v.detach().clone() for v in inputs]
            minus = [v.detach().clone() for v in inputs]
            plus[i].view(-1)[j] += h
            minus[i].view(-1)[j] -= h
            flat[j] = (fn(*plus) - fn(*minus)) / (2 * h)
        err = float((g - fd).norm() / max(float(fd.norm()), 1e-12))
        worst = max(worst, err)
    assert worst < tol, worst
    return worst


def _gen(seed):
    return torch.Generator().manual_seed(seed)


@pytest.mark.criterion(3, "eight losses match central finite differences (1e-3 relative, float64)")
@pytest.mark.parametrize("seed", range(3))
def test_c03_gradient_suite(seed):
    start = time.perf_counter()
    g = _gen(seed)
    d, k = 5, 4
    # dce_loss through batch statistics of a feature batch.
    feats = torch.randn(12, d, generator=g, dtype=F64)
    labels = torch.arange(12) % 3
    stored = ClassStatistics((0, 1, 2), np.random.default_rng(seed).normal(size=(3, d)),
                             np.eye(d) * 0.7, (4, 4, 4))
    _fd_check(lambda z: dce_loss(batch_stats(z, labels), stored), feats)
    # bn_stat_loss with respect to both batch means and batch variances.
    mu_r = torch.randn(6, generator=g, dtype=F64)
    var_r = torch.rand(6, generator=g, dtype=F64) + 0.5
    mu_b = torch.randn(6, generator=g, dtype=F64)
    var_b = torch.rand(6, generator=g, dtype=F64) + 0.5
    _fd_check(lambda m, v: bn_stat_loss([(mu_r, var_r)], [(m, v)]), mu_b, var_b)
    # diversity_loss composed with the batch-mean softmax.
    logits = torch.randn(7, k, generator=g, dtype=F64)
    _fd_check(lambda z: diversity_loss(torch.softmax(z, 1).mean(0)), logits)
    _fd_check(lambda z: inversion_ce_loss(z, 1.7), logits)
    # hkd: L1 is smooth away from ties, which random doubles avoid.
    old = torch.randn(6, k, generator=g, dtype=F64)
    _fd_check(lambda z: hkd_loss(old, z), old + torch.randn(6, k, generator=g, dtype=F64))
    y = torch.tensor([0, 1, 2, 3, 1, 0])
    _fd_check(lambda z: lce_loss(z, y, 0.8), torch.randn(6, k, generator=g, dtype=F64))
    # war with the group-mean targets held at their current values.
    w = torch.randn(6, d, generator=g, dtype=F64)
    targets = war_targets(w, range(3), range(3, 6))
    _fd_check(lambda m: war_loss(m, range(3), range(3, 6), targets=targets), w)
    a, b = torch.randn(5, 3, generator=g, dtype=F64), torch.randn(4, 2, generator=g, dtype=F64)
    ya, yb = torch.tensor([0, 1, 2, 2, 1]), torch.tensor([1, 0, 1, 1])
    _fd_check(lambda u, v: sce_loss(u, ya, v, yb, 1.3), a, b)
    # The 60 s budget covers all three seeds.
    assert time.perf_counter() - start < 20.0


# ---------------------------------------------------------------------------
# 4. Trivial zeros
# ---------------------------------------------------------------------------


@pytest.mark.criterion(4, "matched inputs give zero loss; diversity loss is minimal at uniform")
def test_c04_trivial_zeros():
    stored = ClassStatistics((0, 1), [[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]], np.diag([1.0, 2.0, 0.5]), (3, 3))
    from cwdcil.statistics import BatchStatistics
    same = BatchStatistics((0, 1), torch.tensor(stored.means), torch.tensor(stored.tied_cov), (3, 3))
    assert float(dce_loss(same, stored)) <= 1e-9
    stats = [(torch.tensor([0.3, -1.0], dtype=F64), torch.tensor([0.4, 2.0], dtype=F64))]
    assert abs(float(bn_stat_loss(stats, stats))) <= 1e-9
    z = torch.randn(5, 4, dtype=F64)
    assert float(hkd_loss(z, z.clone())) <= 1e-9
    w = torch.randn(6, 3, dtype=F64)
    w = w / w.norm(dim=1, keepdim=True) * 1.7
    assert float(war_loss(w, range(2), range(2, 6))) <= 1e-9
    rng = np.random.default_rng(0)
    for k in (2, 3, 6, 10):
        uniform = float(diversity_loss(torch.full((k,), 1.0 / k, dtype=F64)))
        assert uniform == pytest.approx(-math.log(k), abs=1e-12)
        for p in rng.dirichlet(np.ones(k), size=200):
            assert float(diversity_loss(torch.tensor(p / p.sum()))) >= uniform - 1e-12


# ---------------------------------------------------------------------------
# 5. DCE efficacy on the oracle pipeline
# ---------------------------------------------------------------------------


def _oracle_consistency(seed):
    cfg = resolve_config(overrides=["dataset=oracle"], seed=seed)
    tasks = build_tasks(cfg)
    t1 = tasks[0]
    model = IncrementalNet.from_spec(cfg.backbone, tasks.input_shape, len(t1.class_ids), seed=seed)
    train_task(model, t1.train_x, t1.train_y, t1.class_slice, dataclasses.replace(cfg.train, seed=seed),
               task_seed=1)
    stats = estimate_class_stats(collect_estimation_features(model, t1.train_x, t1.train_y))
    inv = dataclasses.replace(cfg.inversion, seed=seed, dce_weight=0.05)
    reports = run_consistency_report(model, stats, t1.test_x, t1.test_y,
                                     {"dce": inv, "no_dce": dataclasses.replace(inv, dce_weight=0.0)},
                                     num_samples=100_000, seed=seed)
    return {r["config"]["name"]: r["kl_gaussian"] for r in reports}


@pytest.mark.criterion(5, "alignment loss lowers Gaussian KL to real old features (3/3 seeds)")
def test_c05_dce_efficacy():
    start = time.perf_counter()
    results = [_oracle_consistency(s) for s in SEEDS]
    print("kl_gaussian per seed:", json.dumps(results))
    assert all(r["dce"] < r["no_dce"] for r in results), results
    assert time.perf_counter() - start < 15 * 60


# ---------------------------------------------------------------------------
# 6 + 7. Desk image split: forgetting smoke and WAR efficacy
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    cfg = resolve_config(profile="desk", overrides=["save_checkpoints=false"],
                         out_dir=str(tmp_path_factory.mktemp("desk_ablation")))
    start = time.perf_counter()
    rows = run_ablation_suite(cfg, ["cwd", "cwd_minus_war", "finetune"], SEEDS)
    assert time.perf_counter() - start < 4 * 3600
    return {r.variant: r for r in rows}


@pytest.mark.criterion(6, "CwD A_N beats finetuning by >= 15 points on the 5-task desk split (3 seeds)")
def test_c06_forgetting_smoke(desk_ablation):
    cwd, ft = desk_ablation["cwd"], desk_ablation["finetune"]
    print(f"A_N cwd={cwd.last_accuracies} finetune={ft.last_accuracies}")
    assert 100 * (cwd.mean - ft.mean) >= 15.0


@pytest.mark.criterion(7, "final |mean n_old - mean n_new| with WAR <= 50% of the no-WAR gap (3 seeds)")
def test_c07_war_efficacy(desk_ablation):
    war = float(np.mean(desk_ablation["cwd"].norm_gaps))
    none = float(np.mean(desk_ablation["cwd_minus_war"].norm_gaps))
    print(f"norm gap with WAR={desk_ablation['cwd'].norm_gaps} without={desk_ablation['cwd_minus_war'].norm_gaps}")
    assert war <= 0.5 * none


# ---------------------------------------------------------------------------
# 8. Two-task bias experiment
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bias_runs(tmp_path_factory):
    cfg = resolve_config(profile="desk", out_dir=str(tmp_path_factory.mktemp("bias")))
    return run_bias_experiment(cfg, ["realLCE_realLCE", "synthLCE_realLCE"], SEEDS)


@pytest.mark.criterion(8, "real/real control is unbiased; real-data gradients are more stable than synthetic")
def test_c08_bias_experiment(bias_runs):
    gaps = [r.relative_gap for r in bias_runs["realLCE_realLCE"]]
    fractions = [fraction_real_above_synth(r) for r in bias_runs["synthLCE_realLCE"]]
    print(f"control relative gaps={gaps} R_real>R_synth fractions={fractions}")
    assert all(g < 0.1 for g in gaps)
    assert all(f >= 0.8 for f in fractions)


# ---------------------------------------------------------------------------
# 9. Determinism
# ---------------------------------------------------------------------------


@pytest.mark.criterion(9, "identical config and seed reproduce A_N bit-identically across two processes")
def test_c09_determinism(tmp_path):
    args = ["--seed", "3", "--override", "inversion.steps=40", "--override", "train.epochs=4",
            "--override", "train.milestones=[2]", "--override", "save_checkpoints=false"]
    results = []
    for run in ("a", "b"):
        out = tmp_path / run
        proc = subprocess.run([sys.executable, "-m", "cwdcil", "run", "--out", str(out), *args],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr[-2000:]
        results.append(json.loads((out / "metrics.json").read_text()))
    assert results[0]["A_N"] == results[1]["A_N"]
    assert results[0]["accuracies"] == results[1]["accuracies"]
    assert results[0]["weight_norms"] == results[1]["weight_norms"]


# ---------------------------------------------------------------------------
# 10. WA comparator contract
# ---------------------------------------------------------------------------


@pytest.mark.criterion(10, "weight aligning equalises group mean norms and keeps within-block argmax")
@pytest.mark.parametrize("seed", range(3))
def test_c10_weight_aligning(seed):
    g = _gen(seed)
    w = torch.randn(10, 6, generator=g, dtype=F64)
    w[6:] *= 2.5
    old, new = range(6), range(6, 10)
    out, gamma = wa_postprocess(w, old, new)
    norms = out.norm(dim=1)
    assert abs(float(norms[6:].mean() / norms[:6].mean()) - 1.0) <= 1e-6
    assert torch.equal(out[:6], w[:6])
    probes = torch.randn(100, 6, generator=g, dtype=F64)
    assert torch.equal((probes @ w[6:].T).argmax(1), (probes @ out[6:].T).argmax(1))
    assert torch.equal((probes @ w[:6].T).argmax(1), (probes @ out[:6].T).argmax(1))
    assert gamma > 0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
