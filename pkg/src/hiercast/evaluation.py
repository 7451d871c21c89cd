"""Monte-Carlo forecasting, per-level metrics and the missing-values
robustness protocol."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .datasets import TimeSeriesPanel, mask_hfmv
from .errors import ShapeMismatchError
from .gaussian import (
    GaussianDist,
    GaussianForecastSet,
    coherency_loss as _coherency_loss,
    crps_from_samples,
    fit_gaussian,
    interval_score,
)
from .hierarchy import Hierarchy
from .state import ModelState, make_generator

DEFAULT_SAMPLES = 100
DEFAULT_ITERATIONS = 10


@dataclass(frozen=True)
class Forecast:
    """``S`` samples per node (original scale) and the Gaussians fitted to them."""

    samples: np.ndarray  # (S, N)
    fitted: GaussianForecastSet

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def node(self, i: int) -> tuple[np.ndarray, GaussianDist]:
        return self.samples[:, i - 1], self.fitted.dist(i)

    def as_dict(self) -> dict[int, tuple[np.ndarray, GaussianDist]]:
        return {i: self.node(i) for i in range(1, self.samples.shape[1] + 1)}

    @classmethod
    def from_samples(cls, samples) -> "Forecast":
        samples = np.asarray(samples, float)
        d = fit_gaussian(samples, axis=0)
        return cls(samples, GaussianForecastSet(np.asarray(d.mu), np.asarray(d.sigma)))


def context(values: np.ndarray, origin: int, max_len: int | None) -> np.ndarray:
    lo = 0 if max_len is None else max(0, origin + 1 - max_len)
    return values[:, lo : origin + 1]


@torch.no_grad()
def sample_normalized(
    state: ModelState, inputs: np.ndarray, S: int, generator: torch.Generator, freeze_latents: bool = False,
) -> np.ndarray:
    """``S`` draws ``(S, N)`` of the refined predictive from one ``(N, L)`` context."""
    batch = 1 if freeze_latents else S
    x = torch.as_tensor(inputs, dtype=state.dtype).unsqueeze(0).expand(batch, -1, -1).contiguous()
    lengths = torch.full((batch,), x.shape[-1], dtype=torch.long)
    mu, sigma, _ = state(x, lengths, generator, use_posterior=False, refined=True)
    if freeze_latents:
        mu, sigma = mu.expand(S, -1), sigma.expand(S, -1)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return (mu + sigma * eps).numpy()


def forecast(
    state: ModelState, panel: TimeSeriesPanel, tau: int, S: int = DEFAULT_SAMPLES, seed: int = 0,
    origin: int | None = None, freeze_latents: bool = False,
) -> Forecast:
    """Forecast step ``origin + tau`` from the panel's values up to ``origin``.

    ``origin`` defaults to the panel's last step. With ``freeze_latents``
    one latent draw is shared by all ``S`` samples, so the samples come from
    a single refined Gaussian.
    """
    if S < 2:
        raise ValueError("need S >= 2 samples")
    origin = panel.T - 1 if origin is None else int(origin)
    ctx = context(panel.filled_values(), origin, state.cfg.max_len)
    g = make_generator(seed, "forecast", origin, tau)
    z = sample_normalized(state, ctx, S, g, freeze_latents)
    return Forecast.from_samples(panel.to_original(z, axis=-1))


# ----------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    per_node: dict[int, tuple[float, float]]
    per_level: dict[int, tuple[float, float]]
    overall: tuple[float, float]
    n_samples: int
    interval_halfwidth: np.ndarray

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "level_or_node", "crps", "interval_score"])
        w.writerow(["overall", "all", repr(self.overall[0]), repr(self.overall[1])])
        for lvl, (c, s) in sorted(self.per_level.items()):
            w.writerow(["level", lvl, repr(c), repr(s)])
        for i, (c, s) in sorted(self.per_node.items()):
            w.writerow(["node", i, repr(c), repr(s)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _report(crps: dict, isc: dict, h: Hierarchy, n_samples: int, L) -> MetricsReport:
    per_node = {i: (float(crps[i]), float(isc[i])) for i in sorted(crps)}
    per_level = {}
    for lvl, nodes in h.levels().items():
        nodes = [i for i in nodes if i in per_node]
        if nodes:
            per_level[lvl] = (
                float(np.mean([per_node[i][0] for i in nodes])),
                float(np.mean([per_node[i][1] for i in nodes])),
            )
    vals = np.array(list(per_node.values()))
    overall = (float(vals[:, 0].mean()), float(vals[:, 1].mean()))
    return MetricsReport(per_node, per_level, overall, n_samples, np.asarray(L, float))


def _node_vector(x, n: int, name: str) -> np.ndarray:
    if isinstance(x, dict):
        if sorted(x) != list(range(1, n + 1)):
            raise ShapeMismatchError(f"{name} must cover nodes 1..{n}")
        return np.array([float(x[i]) for i in range(1, n + 1)])
    arr = np.broadcast_to(np.asarray(x, float), (n,)) if np.ndim(x) == 0 else np.asarray(x, float)
    if arr.shape != (n,):
        raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected ({n},)")
    return arr


def evaluate(forecasts: Forecast | np.ndarray, truth, hierarchy: Hierarchy, L) -> MetricsReport:
    """CRPS and interval score per node, per level and overall.

    ``forecasts`` is a ``Forecast`` or a sample array ``(S, N)``; ``truth``
    and ``L`` are length-N arrays or mappings node -> value.
    """
    samples = forecasts.samples if isinstance(forecasts, Forecast) else np.asarray(forecasts, float)
    n = hierarchy.n_nodes
    if samples.ndim != 2 or samples.shape[1] != n:
        raise ShapeMismatchError(f"samples must have shape (S, {n}), got {samples.shape}")
    y = _node_vector(truth, n, "truth")
    Lv = _node_vector(L, n, "L")
    fitted = fit_gaussian(samples, axis=0)
    crps = crps_from_samples(samples.T, y)
    isc = interval_score(fitted, y, Lv)
    return _report(
        {i: crps[i - 1] for i in hierarchy.nodes}, {i: isc[i - 1] for i in hierarchy.nodes},
        hierarchy, samples.shape[0], Lv,
    )


def merge_reports(reports: list[MetricsReport], hierarchy: Hierarchy) -> MetricsReport:
    """Average per-node scores across several forecast origins."""
    if not reports:
        raise ValueError("no reports to merge")
    crps = {i: np.mean([r.per_node[i][0] for r in reports]) for i in hierarchy.nodes}
    isc = {i: np.mean([r.per_node[i][1] for r in reports]) for i in hierarchy.nodes}
    return _report(crps, isc, hierarchy, reports[0].n_samples, reports[0].interval_halfwidth)


def default_halfwidth(panel: TimeSeriesPanel, tau: int, train_end: int | None = None) -> np.ndarray:
    """Per-node std of ``tau``-step naive residuals over the training range (original scale)."""
    end = panel.T if train_end is None else int(train_end)
    orig = panel.to_original(np.where(panel.mask, panel.values, np.nan)[:, :end], axis=0)
    resid = orig[:, tau:] - orig[:, :-tau]
    with np.errstate(invalid="ignore"):
        sd = np.nanstd(resid, axis=1, ddof=1)
    return np.where(np.isfinite(sd) & (sd > 0), sd, 1.0)


def truth_at(panel: TimeSeriesPanel, t: int) -> np.ndarray:
    if not panel.mask[:, t].all():
        raise ShapeMismatchError(f"truth at step {t} is not fully observed")
    return panel.to_original(panel.values[:, t], axis=0)


def evaluate_origins(
    state: ModelState, panel: TimeSeriesPanel, hierarchy: Hierarchy, tau: int, origins, S: int,
    seed: int, L,
) -> MetricsReport:
    reports = [
        evaluate(forecast(state, panel, tau, S, seed, origin=o), truth_at(panel, o + tau), hierarchy, L)
        for o in origins
    ]
    return reports[0] if len(reports) == 1 else merge_reports(reports, hierarchy)


@torch.no_grad()
def coherency_of(state: ModelState, panel: TimeSeriesPanel, hierarchy: Hierarchy, origins, seed: int = 0) -> float:
    """Mean coherency loss of the refined forecasts (normalised scale) at ``origins``."""
    filled = panel.filled_values()
    vals = []
    for o in origins:
        ctx = torch.as_tensor(context(filled, o, state.cfg.max_len), dtype=state.dtype).unsqueeze(0)
        g = make_generator(seed, "coherency", o)
        mu, sigma, _ = state(ctx, torch.tensor([ctx.shape[-1]]), g, use_posterior=False, refined=True)
        vals.append(float(_coherency_loss(hierarchy, GaussianForecastSet(mu[0], sigma[0]))))
    return float(np.mean(vals))


# ----------------------------------------------------------------------------
# missing values


@dataclass(frozen=True)
class HfmvResult:
    k_percent: float
    baseline_metrics: MetricsReport
    masked_metrics: MetricsReport
    pct_degradation: float
    iterations: int
    n_masked: int

    @property
    def crps(self) -> float:
        return self.masked_metrics.overall[0]


def _hfmv_samples(
    state: ModelState, panel: TimeSeriesPanel, tau: int, iterations: int, S: int, seed: int,
) -> np.ndarray:
    """Pooled normalised samples for step ``panel.T - 1 + tau`` after imputing
    every unobserved cell, once per round, in increasing time order."""
    max_len = state.cfg.max_len
    origin = panel.T - 1
    missing_t = sorted({int(t) for t in np.flatnonzero(~panel.mask.all(axis=0))})
    pooled = []
    for r in range(iterations):
        work = panel
        g = make_generator(seed, "hfmv-impute", r)
        for t in missing_t:
            if t - tau < 0:
                continue
            hole = ~work.mask[:, t]
            draw = sample_normalized(state, context(work.filled_values(), t - tau, max_len), 1, g)[0]
            values, mask = work.values.copy(), work.mask.copy()
            values[hole, t] = draw[hole]
            mask[hole, t] = True
            work = replace(work, values=values, mask=mask)
        gf = make_generator(seed, "hfmv-forecast", r)
        pooled.append(sample_normalized(state, context(work.filled_values(), origin, max_len), S, gf))
    return np.concatenate(pooled, axis=0)


def run_hfmv(
    state: ModelState, panel: TimeSeriesPanel, hierarchy: Hierarchy, rho: int, k_percent: float,
    tau: int, iterations: int = DEFAULT_ITERATIONS, seed: int = 0, S: int = DEFAULT_SAMPLES, L=None,
    baseline: MetricsReport | None = None,
) -> HfmvResult:
    """Mask ``k_percent`` of the last ``rho`` input steps, impute, forecast, score.

    The forecast origin is ``panel.T - 1 - tau`` and the target the panel's
    last step. The baseline (k = 0) runs the identical pipeline with the
    same seeds, so ``k_percent = 0`` gives zero degradation exactly.
    """
    inputs = panel.truncate(panel.T - tau)
    truth = truth_at(panel, panel.T - 1)
    L = default_halfwidth(inputs, tau) if L is None else L

    def score(masked: TimeSeriesPanel) -> MetricsReport:
        z = _hfmv_samples(state, masked, tau, iterations, S, seed)
        return evaluate(inputs.to_original(z, axis=-1), truth, hierarchy, L)

    if baseline is None:
        baseline = score(inputs)
    masked_panel = mask_hfmv(inputs, rho, k_percent, seed)
    masked = baseline if masked_panel is inputs else score(masked_panel)
    base = baseline.overall[0]
    pct = 100.0 * (masked.overall[0] - base) / base if base > 0 else float("nan")
    n_masked = int((~masked_panel.mask).sum() - (~inputs.mask).sum())
    return HfmvResult(float(k_percent), baseline, masked, pct, iterations, n_masked)
