"""Desk-scale experiments on synthetic panels: variant comparison, gate
statistics and missing-value robustness."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .datasets import generate_synthetic
from .evaluation import coherency_of, default_halfwidth, evaluate_origins, run_hfmv
from .refinement import mean_gamma
from .state import derive_seed
from .training import FitResult, fit

# 8 leaves, depth 3, T = 200. Ten held-out steps: test origins for CRPS and
# room for the five masked steps of the missing-value runs.
DESK_CONFIG = TrainConfig(
    d_u=8,
    hidden=16,
    preprocess="none",
    min_len=24,
    max_len=24,
    batch_size=16,
    windows_per_epoch=96,
    learning_rate=3e-3,
    max_epochs=100,
    pretrain_epochs=20,
    patience=30,
    val_samples=16,
    val_steps=10,
    holdout=10,
)
DESK_DATA = dict(n_leaves=8, depth=3, T=200, leaf_noise_std=0.1)
EVAL_SAMPLES = 100


@dataclass
class DeskRun:
    consistency: str
    seed: int
    variant: str
    crps: float
    interval_score: float
    coherency: float
    gamma_mean: float
    gamma_std: float
    seconds: float
    fit: FitResult


def desk_run(consistency: str, seed: int, variant: str, cfg: TrainConfig = DESK_CONFIG) -> DeskRun:
    t0 = time.perf_counter()
    h, panel = generate_synthetic(consistency=consistency, seed=seed, **DESK_DATA)
    result = fit(panel, h, cfg.with_(variant=variant, seed=seed))
    tau = cfg.tau
    origins = range(result.train_end - 1, panel.T - tau)
    L = default_halfwidth(result.panel, tau, result.train_end)
    rep = evaluate_origins(result.state, result.panel, result.hierarchy, tau, origins, EVAL_SAMPLES, seed, L)
    l2 = coherency_of(result.state, result.panel, result.hierarchy, origins, seed)
    g_mean, g_std = mean_gamma(result.state.refinement.gammas(), result.hierarchy)
    return DeskRun(
        consistency, seed, variant, rep.overall[0], rep.overall[1], l2, g_mean, g_std,
        time.perf_counter() - t0, result,
    )


@dataclass
class HfmvPoint:
    k_percent: float
    crps: float
    baseline_crps: float
    pct_degradation: float


def hfmv_curve(
    run: DeskRun, ks=(0, 5, 10), rho: int = 5, iterations: int = 8, samples: int = 100, n_targets: int = 5,
) -> list[HfmvPoint]:
    """Degradation at each ``k`` averaged over ``n_targets`` consecutive targets.

    For target ``j`` the panel is cut to ``train_end + rho + tau + j`` steps,
    so the masked steps lie after the training range. Degradation uses the
    CRPS averaged over targets, masked against unmasked.
    """
    r = run.fit
    tau = r.config.tau
    per_k = {k: [] for k in ks}
    base = []
    for j in range(n_targets):
        end = r.train_end + rho + tau + j
        if end > r.panel.T:
            break
        panel = r.panel.truncate(end)
        baseline = None
        for k in ks:
            res = run_hfmv(
                r.state, panel, r.hierarchy, rho, k, tau, iterations, derive_seed(run.seed, "hfmv", j),
                samples, baseline=baseline,
            )
            baseline = res.baseline_metrics
            per_k[k].append(res.crps)
        base.append(baseline.overall[0])
    b = float(np.mean(base))
    return [HfmvPoint(float(k), float(np.mean(v)), b, 100.0 * (np.mean(v) - b) / b) for k, v in per_k.items()]


def median(xs) -> float:
    return float(np.median(np.asarray(list(xs), float)))
