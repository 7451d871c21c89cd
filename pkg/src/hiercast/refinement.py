"""Hierarchy-aware refinement of the raw forecast parameters.

    gamma_i = sigmoid(w_hat_i)
    mu_i    = gamma_i * mu_hat_i + (1 - gamma_i) * w_i . mu_hat
    sigma_i = c * sigma_hat_i * sigmoid(v1_i . mu_hat + v2_i . sigma_hat + b_i)
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .gaussian import GaussianForecastSet
from .hierarchy import Hierarchy

LOGIT_BOUND = 30.0


class Refinement(nn.Module):
    """Learnable refinement parameters for N nodes.

    Starts at gate logit 0 (gamma = 0.5), uniform mixing weights 1/N and a
    centred variance gate; ``c`` is a fixed positive constant.
    """

    def __init__(self, n_nodes: int, c: float = 5.0):
        super().__init__()
        if not c > 0:
            raise ValueError("c must be positive")
        n = n_nodes
        self.w_hat = nn.Parameter(torch.zeros(n))
        self.w = nn.Parameter(torch.full((n, n), 1.0 / n))
        self.v1 = nn.Parameter(torch.zeros(n, n))
        self.v2 = nn.Parameter(torch.zeros(n, n))
        self.b = nn.Parameter(torch.zeros(n))
        self.register_buffer("c", torch.tensor(float(c), dtype=torch.float64))

    @property
    def n_nodes(self) -> int:
        return self.w_hat.shape[0]

    def gammas(self) -> torch.Tensor:
        return _gate(self.w_hat)

    def forward(self, mu_hat: torch.Tensor, sigma_hat: torch.Tensor):
        """Refine (..., N) raw parameters; returns ``(mu, sigma, gamma)``."""
        gamma = _gate(self.w_hat)
        mu = gamma * mu_hat + (1 - gamma) * (mu_hat @ self.w.T)
        gate = _gate(mu_hat @ self.v1.T + sigma_hat @ self.v2.T + self.b)
        sigma = self.c * sigma_hat * gate
        return mu, sigma, gamma


def _gate(x: torch.Tensor) -> torch.Tensor:
    # float64 sigmoid rounds to exactly 0 or 1 beyond |x| ~ 37; clamping the
    # logit keeps gamma and the std gate strictly inside (0, 1)
    return torch.sigmoid(x.clamp(-LOGIT_BOUND, LOGIT_BOUND))


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(x, dtype=like.dtype) if not torch.is_tensor(x) else x


def refine_mean(raw_means, node_id: int, params: Refinement):
    """Refined mean of one node (1-based id) and its gate value."""
    mu_hat = _as_tensor(raw_means, params.w_hat)
    k = node_id - 1
    gamma = _gate(params.w_hat[k])
    mu = gamma * mu_hat[..., k] + (1 - gamma) * (mu_hat @ params.w[k])
    return mu, gamma


def refine_std(raw_means, raw_stds, node_id: int, params: Refinement):
    mu_hat = _as_tensor(raw_means, params.w_hat)
    sigma_hat = _as_tensor(raw_stds, params.w_hat)
    k = node_id - 1
    gate = _gate(mu_hat @ params.v1[k] + sigma_hat @ params.v2[k] + params.b[k])
    return params.c * sigma_hat[..., k] * gate


def refine_all(raw: GaussianForecastSet, params: Refinement):
    """Refine a full forecast set; returns ``(refined set, gammas)``."""
    mu_hat = _as_tensor(raw.mu, params.w_hat)
    sigma_hat = _as_tensor(raw.sigma, params.w_hat)
    mu, sigma, gamma = params(mu_hat, sigma_hat)
    return GaussianForecastSet(mu, sigma), gamma


def mean_gamma(gammas, hierarchy: Hierarchy, scope: str = "all") -> tuple[float, float]:
    """Mean and population std of the gates over ``all``, ``leaves`` or ``internal`` nodes."""
    g = gammas.detach().cpu().numpy() if torch.is_tensor(gammas) else np.asarray(gammas, float)
    if scope == "all":
        nodes = list(hierarchy.nodes)
    elif scope == "leaves":
        nodes = hierarchy.leaves
    elif scope == "internal":
        nodes = hierarchy.internal_nodes
    else:
        raise ValueError(f"unknown scope {scope!r}")
    if not nodes:
        return float("nan"), float("nan")
    sel = g[np.asarray(nodes) - 1]
    return float(sel.mean()), float(sel.std())
