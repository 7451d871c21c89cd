"""Objective, pre-training, the main training loop, ablation variants and
backtest-based hyperparameter selection."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, VARIANTS
from .datasets import TimeSeriesPanel, WindowSet, make_windows, preprocess
from .errors import NaNLossError, UnknownVariantError
from .gaussian import GaussianForecastSet, coherency_loss, crps_from_samples
from .hierarchy import Hierarchy
from .model import ModelConfig, _normal_log_prob
from .state import ModelState, derive_seed, make_generator

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("phase", "epoch", "l1", "l2", "total", "val_crps")
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class TrainHistory:
    """Per-epoch losses of every phase; ``best_epoch`` refers to the main phase.

    Epoch 0 of a phase is the state before any update (losses are NaN there,
    only the validation CRPS is measured).
    """

    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == name]

    @property
    def main(self) -> list[dict]:
        return [r for r in self.phase("train") if r["epoch"] > 0]

    def column(self, name: str, phase: str = "train") -> np.ndarray:
        return np.array([r[name] for r in self.phase(phase) if r["epoch"] > 0], dtype=float)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r["phase"], r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[2:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


# ----------------------------------------------------------------------------
# objective


def gaussian_nll(mu, sigma, y):
    return torch.log(sigma) + _LOG_SQRT_2PI + 0.5 * ((y - mu) / sigma) ** 2


def elbo_from_outputs(mu, sigma, y, mask, log_q=None, log_p=None):
    """Mean over observed (window, node) items of NLL + ``log q(u) - log P(u)``.

    ``log_q``/``log_p`` are per-item log densities of the sampled embedding,
    already summed over the embedding dimension (omit both for a pure
    likelihood loss).
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = mask.sum()
    if n == 0:
        raise ValueError("batch has no observed targets")
    per_item = gaussian_nll(mu, sigma, y)
    if log_q is not None:
        per_item = per_item + (log_q - log_p)
    return torch.where(mask, per_item, torch.zeros_like(per_item)).sum() / n


def total_loss(l1, l2, lam: float):
    return l1 + lam * l2


def _tensors(batch, dtype, repeats: int = 1):
    x, lengths, y, m = batch
    x = torch.as_tensor(x, dtype=dtype)
    lengths = torch.as_tensor(lengths, dtype=torch.long)
    y = torch.as_tensor(y, dtype=dtype)
    m = torch.as_tensor(m, dtype=torch.bool)
    if repeats > 1:
        x, lengths, y, m = (t.repeat_interleave(repeats, 0) for t in (x, lengths, y, m))
    return x, lengths, y, m


def batch_terms(state: ModelState, batch, generator, refined: bool = True, repeats: int = 1):
    """One posterior pass over a batch: ``(l1, forecasts, mask)``.

    ``batch`` is the tuple produced by ``WindowSet.batch``.
    """
    x, lengths, y, m = _tensors(batch, state.dtype, repeats)
    mu, sigma, latent = state(x, lengths, generator, use_posterior=True, refined=refined)
    q, p = latent.posterior, latent.prior
    log_q = _normal_log_prob(latent.u, q.mu_u, q.sigma_u).sum(-1)
    log_p = _normal_log_prob(latent.u, p.mu_u, p.sigma_u).sum(-1)
    l1 = elbo_from_outputs(mu, sigma, y, m, log_q, log_p)
    return l1, GaussianForecastSet(mu, sigma), m


def elbo_loss(state: ModelState, batch, generator=None, refined: bool = True, repeats: int = 1):
    """Single-sample negative ELBO of a batch of shared windows."""
    l1, _, _ = batch_terms(state, batch, generator, refined, repeats)
    if not torch.isfinite(l1):
        raise NaNLossError("non-finite likelihood loss")
    return l1


# ----------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationSet:
    """Forecast origins whose targets are the last ``n_targets`` steps of a panel."""

    x: np.ndarray
    lengths: np.ndarray
    y: np.ndarray
    mask: np.ndarray


def validation_set(panel: TimeSeriesPanel, tau: int, max_len: int | None, n_targets: int | None = None):
    n_targets = tau if n_targets is None else n_targets
    filled = panel.filled_values()
    origins = [t - tau for t in range(panel.T - n_targets, panel.T) if t - tau >= 0]
    L = max(o + 1 if max_len is None else min(o + 1, max_len) for o in origins)
    x = np.zeros((len(origins), panel.n_nodes, L))
    lengths = np.zeros(len(origins), dtype=int)
    for b, o in enumerate(origins):
        lo = 0 if max_len is None else max(0, o + 1 - max_len)
        x[b, :, : o + 1 - lo] = filled[:, lo : o + 1]
        lengths[b] = o + 1 - lo
    t = np.asarray(origins) + tau
    mask = panel.mask[:, t].T
    y = np.where(mask, panel.values[:, t].T, 0.0)
    return ValidationSet(x, lengths, y, mask)


@torch.no_grad()
def validation_crps(state: ModelState, val: ValidationSet, n_samples: int, seed: int, refined: bool = True) -> float:
    """Mean CRPS over observed validation targets of the sample-fitted forecasts."""
    S = max(2, int(n_samples))
    g = make_generator(seed, "validation")
    x = torch.as_tensor(val.x, dtype=state.dtype).repeat_interleave(S, 0)
    lengths = torch.as_tensor(val.lengths).repeat_interleave(S, 0)
    mu, sigma, _ = state(x, lengths, g, use_posterior=False, refined=refined)
    eps = torch.randn(mu.shape, generator=g, dtype=mu.dtype)
    samples = (mu + sigma * eps).numpy().reshape(len(val.x), S, -1)
    if not np.all(np.isfinite(samples)):
        raise NaNLossError("non-finite validation forecasts")
    crps = crps_from_samples(np.moveaxis(samples, 1, -1), val.y)
    return float(crps[val.mask].mean())


# ----------------------------------------------------------------------------
# loops


def reference_sequences(panel: TimeSeriesPanel, max_len: int | None) -> np.ndarray:
    filled = panel.filled_values()
    return filled if max_len is None else filled[:, -max_len:]


@dataclass
class _Phase:
    name: str
    params: list
    refined: bool
    lam: float
    epochs: int
    patience: int
    coherency: bool


def _run_phase(
    state: ModelState, phase: _Phase, windows: WindowSet, val: ValidationSet,
    ref_seq: np.ndarray, hierarchy: Hierarchy, cfg: TrainConfig, history: TrainHistory,
) -> int:
    """Optimise one phase with early stopping; returns the best epoch."""
    opt = torch.optim.Adam(phase.params, lr=cfg.learning_rate)
    rng = np.random.default_rng(derive_seed(cfg.seed, phase.name, "windows"))
    gen = make_generator(cfg.seed, phase.name, "noise")
    val_seed = derive_seed(cfg.seed, "val")

    def score_at(epoch: int) -> float:
        state.refresh_reference(ref_seq)
        try:
            return validation_crps(state, val, cfg.val_samples, val_seed, phase.refined)
        except NaNLossError as exc:
            raise NaNLossError(f"{exc} in {phase.name} at epoch {epoch}", epoch=epoch, phase=phase.name) from exc

    best = score_at(0)
    best_epoch, best_params = 0, copy.deepcopy(state.state_dict())
    history.rows.append(dict(phase=phase.name, epoch=0, l1=math.nan, l2=math.nan, total=math.nan, val_crps=best))
    stopped = False
    n_win = windows.n_windows
    per_epoch = n_win if cfg.windows_per_epoch is None else min(n_win, cfg.windows_per_epoch)

    for epoch in range(1, phase.epochs + 1):
        state.train()
        order = rng.permutation(n_win)[:per_epoch]
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, per_epoch, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            l1, fc, _ = batch_terms(state, windows.batch(idx), gen, phase.refined, cfg.mc_samples_train)
            if phase.coherency:
                l2 = coherency_loss(hierarchy, fc).mean()
            else:
                l2 = torch.zeros((), dtype=l1.dtype)
            loss = total_loss(l1, l2, phase.lam)
            if not torch.isfinite(loss):
                raise NaNLossError(
                    f"non-finite loss in {phase.name} at epoch {epoch}", epoch=epoch, phase=phase.name
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(phase.params, cfg.grad_clip)
            opt.step()
            sums += [l1.item(), l2.item(), loss.item()]
            n_batches += 1
        state.eval()
        score = score_at(epoch)
        l1m, l2m, tm = sums / max(n_batches, 1)
        history.rows.append(dict(phase=phase.name, epoch=epoch, l1=l1m, l2=l2m, total=tm, val_crps=score))
        log.debug("%s epoch %d: l1=%.4f l2=%.4f val_crps=%.4f", phase.name, epoch, l1m, l2m, score)
        if score < best:
            best, best_epoch, best_params = score, epoch, copy.deepcopy(state.state_dict())
        elif epoch - best_epoch >= phase.patience:
            stopped = True
            break
    state.load_state_dict(best_params)
    if phase.name == "train":
        history.best_epoch = best_epoch
        history.stopped_early = stopped
    return best_epoch


def _inputs(panel: TimeSeriesPanel, cfg: TrainConfig):
    val = validation_set(panel, cfg.tau, cfg.max_len, cfg.effective_val_steps)
    return val, reference_sequences(panel, cfg.max_len)


def pretrain(
    state: ModelState, windows: WindowSet, panel: TimeSeriesPanel, cfg: TrainConfig,
    history: TrainHistory | None = None,
) -> ModelState:
    """Likelihood-only training of the raw forecaster; refinement is untouched."""
    history = TrainHistory() if history is None else history
    if cfg.pretrain_epochs <= 0:
        return state
    val, ref = _inputs(panel, cfg)
    patience = cfg.patience if cfg.pretrain_patience is None else cfg.pretrain_patience
    phase = _Phase("pretrain", list(state.raw.parameters()), False, 0.0, cfg.pretrain_epochs, patience, False)
    _run_phase(state, phase, windows, val, ref, None, cfg, history)
    return state


def train(
    state: ModelState, windows: WindowSet, panel: TimeSeriesPanel, hierarchy: Hierarchy,
    cfg: TrainConfig, history: TrainHistory | None = None,
) -> tuple[ModelState, TrainHistory]:
    """End-to-end training of the combined objective, followed by the
    decoder-only fine-tune phase for ``p_finetune``."""
    history = TrainHistory() if history is None else history
    apply_variant(state, cfg.variant)
    val, ref = _inputs(panel, cfg)
    coherent = cfg.variant != "p_nocoherent"
    phase = _Phase(
        "train", list(state.parameters()), True, cfg.effective_lambda, cfg.max_epochs, cfg.patience, coherent
    )
    _run_phase(state, phase, windows, val, ref, hierarchy, cfg, history)
    if cfg.variant == "p_finetune" and cfg.finetune_epochs > 0:
        phase = _Phase(
            "finetune", list(state.decoder_parameters()), True, 0.0, cfg.finetune_epochs, cfg.patience, False
        )
        _run_phase(state, phase, windows, val, ref, hierarchy, cfg, history)
    return state, history


def apply_variant(state: ModelState, variant: str) -> ModelState:
    """Check that ``state`` is structured for ``variant``.

    Decoder sharing is fixed at construction (``ModelConfig.shared_decoder``,
    set by ``model_config``); the loss-side rules live in ``train``.
    """
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if (variant == "p_global") != state.cfg.shared_decoder:
        raise UnknownVariantError(
            f"variant {variant!r} needs shared_decoder={variant == 'p_global'}"
        )
    return state


def model_config(cfg: TrainConfig, n_nodes: int) -> ModelConfig:
    return ModelConfig(
        n_nodes=n_nodes, d_u=cfg.d_u, hidden=cfg.hidden, kappa=cfg.kappa, c=cfg.c,
        shared_decoder=cfg.variant == "p_global", max_len=cfg.max_len,
    )


# ----------------------------------------------------------------------------
# pipeline


@dataclass
class FitResult:
    state: ModelState
    history: TrainHistory
    hierarchy: Hierarchy
    panel: TimeSeriesPanel
    train_end: int
    config: TrainConfig


def fit(panel: TimeSeriesPanel, hierarchy: Hierarchy, cfg: TrainConfig, train_end: int | None = None) -> FitResult:
    """preprocess -> windows -> pretrain -> train on time steps ``< train_end``.

    ``train_end`` defaults to ``T - holdout``. The returned panel is the
    full preprocessed panel; only its first ``train_end`` steps were used.
    """
    train_end = panel.T - cfg.effective_holdout if train_end is None else int(train_end)
    if panel.preprocessed:
        proc, h = panel, hierarchy
    else:
        proc, h = preprocess(panel, hierarchy, cfg.preprocess, train_end=train_end)
    train_panel = proc.truncate(train_end)
    windows = make_windows(
        train_panel, cfg.tau, cfg.min_len, max_len=cfg.max_len,
        t_max=train_end - 1 - cfg.tau - cfg.effective_val_steps,
    )
    state = ModelState(model_config(cfg, h.n_nodes), seed=cfg.seed)
    history = TrainHistory()
    pretrain(state, windows, train_panel, cfg, history)
    train(state, windows, train_panel, h, cfg, history)
    return FitResult(state, history, h, proc, train_end, cfg)


def backtest_score(result: FitResult, panel: TimeSeriesPanel, cfg: TrainConfig) -> float:
    """CRPS on the last ``tau`` targets of ``panel`` (not seen in training)."""
    val = validation_set(panel, cfg.tau, cfg.max_len)
    return validation_crps(result.state, val, max(cfg.val_samples, 32), derive_seed(cfg.seed, "backtest"))


def backtest_select(
    configs: list[TrainConfig], panel: TimeSeriesPanel, hierarchy: Hierarchy, tau: int | None = None,
    return_scores: bool = False,
):
    """Train each candidate on steps ``< T - tau`` and keep the lowest CRPS on the rest.

    Ties go to the lower lambda, then the lower learning rate.
    """
    if not configs:
        raise ValueError("backtest_select needs at least one candidate")
    if len(configs) == 1 and not return_scores:
        return configs[0]
    scores = []
    for cfg in configs:
        if tau is not None:
            cfg = cfg.with_(tau=tau)
        t_cut = panel.T - cfg.tau
        proc, h = (panel, hierarchy) if panel.preprocessed else preprocess(
            panel, hierarchy, cfg.preprocess, train_end=t_cut
        )
        result = fit(proc, h, cfg, train_end=t_cut)
        scores.append(backtest_score(result, proc, cfg))
    best = min(range(len(configs)), key=lambda i: (scores[i], configs[i].lam, configs[i].learning_rate))
    if return_scores:
        return configs[best], scores
    return configs[best]


def tuning_grid(cfg: TrainConfig) -> list[TrainConfig]:
    return [
        cfg.with_(lam=lam, batch_size=bs, learning_rate=lr)
        for lam in cfg.grid_lambda
        for bs in cfg.grid_batch_size
        for lr in cfg.grid_learning_rate
    ]
