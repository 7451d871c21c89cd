"""Closed-form Gaussian divergences, the distributional coherency loss, and
the CRPS / interval-score metrics.

Every function accepts numpy scalars or arrays. ``coherency_loss`` and the
divergences also accept torch tensors so the same code is used as a
training objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateSamplesError, EmptyChildrenError, NoInternalNodeError
from .hierarchy import Hierarchy

SIGMA_FLOOR = 1e-6
_SQRT_PI = math.sqrt(math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _log(x):
    if _is_torch(x):
        import torch

        return torch.log(x)
    return np.log(x)


def _floor(x, eps=SIGMA_FLOOR):
    if _is_torch(x):
        return x.clamp(min=eps)
    return np.maximum(x, eps)


@dataclass(frozen=True)
class GaussianDist:
    """Univariate normal parameterised by mean and standard deviation."""

    mu: Any
    sigma: Any

    def __post_init__(self):
        if _is_torch(self.mu) or _is_torch(self.sigma):
            return
        mu, sigma = np.asarray(self.mu, float), np.asarray(self.sigma, float)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("Gaussian parameters must be finite")
        if np.any(sigma <= 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class GaussianForecastSet:
    """Per-node Gaussians stored as arrays of shape ``(..., N)``.

    Node ``i`` (1-based) lives at index ``i - 1`` of the last axis. Leading
    axes are batch dimensions (windows, Monte-Carlo samples).
    """

    mu: Any
    sigma: Any

    @property
    def n_nodes(self) -> int:
        return self.mu.shape[-1]

    def dist(self, node: int) -> GaussianDist:
        return GaussianDist(self.mu[..., node - 1], self.sigma[..., node - 1])

    @classmethod
    def from_dists(cls, dists: Mapping[int, GaussianDist]) -> "GaussianForecastSet":
        n = max(dists)
        if sorted(dists) != list(range(1, n + 1)):
            raise ValueError("forecast set must cover nodes 1..N")
        mu = np.array([float(dists[i].mu) for i in range(1, n + 1)])
        sigma = np.array([float(dists[i].sigma) for i in range(1, n + 1)])
        return cls(mu, sigma)


def kl_gaussian(p: GaussianDist, q: GaussianDist):
    """KL(p || q) for univariate normals."""
    s1, s2 = p.sigma, q.sigma
    d2 = (p.mu - q.mu) ** 2
    return 0.5 * (2.0 * _log(s2 / s1) + (s1**2 + d2) / s2**2 - 1.0)


def jsd_gaussian(p: GaussianDist, q: GaussianDist):
    """Symmetrised KL, ``(KL(p||q) + KL(q||p)) / 2``, in closed form.

    This is the divergence the coherency loss is built on; it is not the
    mixture-based Jensen-Shannon divergence.
    """
    s1sq, s2sq = p.sigma**2, q.sigma**2
    d2 = (p.mu - q.mu) ** 2
    return 0.5 * ((s1sq + d2) / (2.0 * s2sq) + (s2sq + d2) / (2.0 * s1sq) - 1.0)


def aggregate_children(
    dists: Mapping[int, GaussianDist] | Sequence[GaussianDist],
    weights: Mapping[int, float] | Sequence[float],
) -> GaussianDist:
    """Distribution of ``sum_j phi_j * Y_j`` for independent ``Y_j``."""
    if isinstance(dists, Mapping):
        keys = list(dists)
        ds = [dists[k] for k in keys]
        ws = [weights[k] for k in keys]
    else:
        ds, ws = list(dists), list(weights)
    if not ds:
        raise EmptyChildrenError("cannot aggregate an empty child set")
    if len(ds) != len(ws):
        raise ValueError("one weight per child is required")
    mu = sum(w * d.mu for w, d in zip(ws, ds))
    var = sum(w**2 * d.sigma**2 for w, d in zip(ws, ds))
    return GaussianDist(mu, var**0.5)


def _aggregates(h: Hierarchy, mu, sigma):
    A = h._aggregation_matrix
    idx = np.asarray(h.internal_nodes) - 1
    if _is_torch(mu):
        import torch

        A = torch.as_tensor(A, dtype=mu.dtype, device=mu.device)
        idx = torch.as_tensor(idx, device=mu.device)
    agg_mu = mu @ A.T
    agg_var = (sigma**2) @ (A**2).T
    return mu[..., idx], sigma[..., idx], agg_mu, agg_var


def coherency_terms(h: Hierarchy, forecasts: GaussianForecastSet):
    """Per-internal-node coherency terms, shape ``(..., n_internal)``.

    Each term equals ``2 * jsd(node, aggregate of children) + 1`` and is
    minimised (value 1) when the node matches its children's aggregate.
    """
    if not h.internal_nodes:
        raise NoInternalNodeError("coherency loss needs at least one internal node")
    sigma = _floor(forecasts.sigma)
    node_mu, node_sigma, agg_mu, agg_var = _aggregates(h, forecasts.mu, sigma)
    agg_var = _floor(agg_var, SIGMA_FLOOR**2)
    node_var = node_sigma**2
    d2 = (node_mu - agg_mu) ** 2
    return (node_var + d2) / (2.0 * agg_var) + (agg_var + d2) / (2.0 * node_var)


def coherency_loss(h: Hierarchy, forecasts: GaussianForecastSet):
    """Distributional coherency loss summed over internal nodes.

    Returns an array over any leading batch axes (a scalar for a single
    forecast set). The minimum, ``n_internal``, is attained exactly when
    every internal node equals the aggregate of its children.
    """
    return coherency_terms(h, forecasts).sum(-1)


def crps_gaussian(dist: GaussianDist, y):
    """Closed-form CRPS of a normal predictive distribution at ``y``."""
    sigma = _floor(np.asarray(dist.sigma, float))
    z = (np.asarray(y, float) - np.asarray(dist.mu, float)) / sigma
    pdf = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / _SQRT_PI)


def fit_gaussian(samples, axis=-1) -> GaussianDist:
    samples = np.asarray(samples, float)
    if samples.shape[axis] < 2:
        raise DegenerateSamplesError("need at least two samples")
    sd = samples.std(axis=axis, ddof=1)
    if np.any(sd == 0):
        raise DegenerateSamplesError("samples have zero variance")
    return GaussianDist(samples.mean(axis=axis), sd)


def crps_from_samples(samples, y):
    """CRPS of the normal fitted (sample mean, sample std) to ``samples``."""
    return crps_gaussian(fit_gaussian(samples), y)


def interval_score(dist: GaussianDist, y, L):
    """Negative log-likelihood integrated over ``[y - L, y + L]``."""
    L = np.asarray(L, float)
    if np.any(L <= 0):
        raise ValueError("interval half-width L must be positive")
    mu = np.asarray(dist.mu, float)
    sigma = _floor(np.asarray(dist.sigma, float))
    y = np.asarray(y, float)
    hi, lo = y + L - mu, y - L - mu
    return 2.0 * L * (np.log(sigma) + _LOG_SQRT_2PI) + (hi**3 - lo**3) / (6.0 * sigma**2)
