"""Neural-process base forecaster producing raw per-node Gaussians.

Pipeline for one window of all N nodes:

    sequences -> bi-GRU + attention pooling -> embedding dist (prior / posterior)
    u_i sampled -> correlation set over reference embeddings -> local latent z_i
    all u_i -> attention -> global latent z
    concat(u_i, z_i, z) -> node-specific decoder -> (mu_hat_i, sigma_hat_i)

All randomness is drawn from an explicit ``torch.Generator`` so a forward
pass is reproducible by reseeding it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import EmptyCorrelationSetError, EmptySequenceError, UnknownNodeError

STD_EPS = 1e-4
LOG_STD_MAX = 10.0


@dataclass
class EmbeddingDist:
    mu_u: torch.Tensor
    sigma_u: torch.Tensor

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        return sample_embedding(self, noise)

    def log_prob(self, u: torch.Tensor) -> torch.Tensor:
        return _normal_log_prob(u, self.mu_u, self.sigma_u)


@dataclass
class LatentState:
    u: torch.Tensor
    z_local: torch.Tensor
    z_global: torch.Tensor
    correlation_sets: torch.Tensor
    attention_weights: torch.Tensor
    prior: EmbeddingDist
    posterior: EmbeddingDist | None


def _normal_log_prob(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * math.log(2 * math.pi)


def sample_embedding(dist: EmbeddingDist, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mu + sigma * noise``."""
    return dist.mu_u + dist.sigma_u * noise


class Encoder(nn.Module):
    """Bidirectional GRU with additive attention pooling and two Gaussian heads.

    The prior head parameterises the embedding used at inference; the
    posterior head is the variational distribution used during training.
    Both read the same pooled hidden state.
    """

    def __init__(self, d_u: int, hidden: int):
        super().__init__()
        self.gru = nn.GRU(1, d_u, batch_first=True, bidirectional=True)
        self.att_proj = nn.Linear(2 * d_u, hidden)
        self.att_vec = nn.Linear(hidden, 1, bias=False)
        self.prior_mu = nn.Linear(4 * d_u, d_u)
        self.prior_sigma = nn.Linear(4 * d_u, d_u)
        self.posterior = nn.Sequential(
            nn.Linear(4 * d_u, hidden), nn.Tanh(), nn.Linear(hidden, 2 * d_u)
        )

    def pooled(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``x``: (M, L) right-padded sequences; returns (M, 4 d_u).

        The attention-pooled hidden states are concatenated with the final
        states of both directions, which carry the most recent values that
        pooling alone averages away.
        """
        M, L = x.shape
        packed = pack_padded_sequence(
            x.unsqueeze(-1), lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, h_n = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=L)
        scores = self.att_vec(torch.tanh(self.att_proj(out))).squeeze(-1)
        valid = torch.arange(L, device=x.device)[None, :] < lengths[:, None]
        scores = scores.masked_fill(~valid, float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        attended = torch.einsum("ml,mlh->mh", alpha, out)
        return torch.cat([attended, h_n[0], h_n[1]], dim=-1)

    def prior(self, pooled: torch.Tensor) -> EmbeddingDist:
        return EmbeddingDist(self.prior_mu(pooled), F.softplus(self.prior_sigma(pooled)) + STD_EPS)

    def variational(self, pooled: torch.Tensor) -> EmbeddingDist:
        mu, s = self.posterior(pooled).chunk(2, dim=-1)
        return EmbeddingDist(mu, F.softplus(s) + STD_EPS)


class CorrelationNets(nn.Module):
    """Mean and log-std networks of the local latent, sharing their first layer."""

    def __init__(self, d_u: int, hidden: int):
        super().__init__()
        self.shared = nn.Sequential(nn.Linear(d_u, hidden), nn.Tanh())
        self.nn1 = nn.Linear(hidden, d_u)
        self.nn2 = nn.Linear(hidden, d_u)

    def forward(self, ref: torch.Tensor):
        h = self.shared(ref)
        return self.nn1(h), self.nn2(h)


class GlobalAttention(nn.Module):
    def __init__(self, d_u: int):
        super().__init__()
        self.key = nn.Linear(d_u, d_u)
        self.query = nn.Parameter(torch.randn(d_u) / math.sqrt(d_u))

    def forward(self, u: torch.Tensor):
        """``u``: (..., N, d) -> weights (..., N) and pooled (..., d)."""
        scores = self.key(u) @ self.query / math.sqrt(u.shape[-1])
        beta = torch.softmax(scores, dim=-1)
        return beta, torch.einsum("...n,...nd->...d", beta, u)


class NodeDecoders(nn.Module):
    """Three-layer MLPs with one weight set per node (or one shared set).

    Weights are stored stacked, shape (G, ...), with G = N or 1, so all
    nodes are decoded in a single batched contraction.
    """

    def __init__(self, n_nodes: int, d_in: int, hidden: int, shared: bool = False):
        super().__init__()
        self.n_nodes = n_nodes
        self.shared = shared
        groups = 1 if shared else n_nodes

        def uniform(*shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))

        self.w1 = uniform(groups, d_in, hidden, fan_in=d_in)
        self.b1 = uniform(groups, hidden, fan_in=d_in)
        self.w2 = uniform(groups, hidden, hidden, fan_in=hidden)
        self.b2 = uniform(groups, hidden, fan_in=hidden)
        self.w3 = uniform(groups, hidden, 2, fan_in=hidden)
        self.b3 = uniform(groups, 2, fan_in=hidden)

    def forward(self, e: torch.Tensor):
        """``e``: (..., N, d_in) -> mu_hat, sigma_hat each (..., N)."""
        def layer(x, w, b):
            if self.shared:
                return x @ w[0] + b[0]
            return torch.einsum("...ni,nio->...no", x, w) + b

        h = torch.tanh(layer(e, self.w1, self.b1))
        h = torch.tanh(layer(h, self.w2, self.b2))
        out = layer(h, self.w3, self.b3)
        return out[..., 0], F.softplus(out[..., 1])


def build_correlation_set(
    u_i: torch.Tensor,
    reference: torch.Tensor,
    kappa: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Sample inclusion of each reference embedding with prob ``exp(-kappa d^2)``.

    Works on any leading batch shape: ``u_i`` (..., d), ``reference`` (R, d)
    and returns a float 0/1 mask (..., R). When a draw includes nothing the
    nearest reference is included instead.
    """
    if reference.shape[0] == 0:
        raise EmptyCorrelationSetError("reference set is empty")
    with torch.no_grad():
        d2 = ((u_i.unsqueeze(-2) - reference) ** 2).sum(-1)
        prob = torch.exp(-kappa * d2)
        draw = torch.rand(prob.shape, generator=generator, dtype=prob.dtype, device=prob.device)
        mask = draw < prob
        empty = ~mask.any(-1)
        if empty.any():
            nearest = F.one_hot(d2.argmin(-1), reference.shape[0]).bool()
            mask = torch.where(empty.unsqueeze(-1), nearest, mask)
    return mask.to(u_i.dtype)


def local_latent(correlation_mask: torch.Tensor, reference: torch.Tensor, nets: CorrelationNets):
    """Mean ``sum_j NN1(u_j)`` and std ``exp(sum_j NN2(u_j))`` over included references."""
    if torch.any(correlation_mask.sum(-1) == 0):
        raise EmptyCorrelationSetError("correlation set must be nonempty")
    m1, m2 = nets(reference)
    mean = correlation_mask @ m1
    log_std = (correlation_mask @ m2).clamp(max=LOG_STD_MAX)
    return mean, torch.exp(log_std)


def global_latent(all_u: torch.Tensor, attention: GlobalAttention):
    beta, z = attention(all_u)
    return z, beta


@dataclass
class ModelConfig:
    n_nodes: int
    d_u: int = 60
    hidden: int = 60
    kappa: float = 1.0
    c: float = 5.0
    shared_decoder: bool = False
    max_len: int | None = None


class RawForecaster(nn.Module):
    """Raw forecaster: encoder, correlation graph, global latent and decoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_u
        self.encoder = Encoder(d, cfg.hidden)
        self.correlation = CorrelationNets(d, cfg.hidden)
        self.global_attention = GlobalAttention(d)
        self.decoder = NodeDecoders(cfg.n_nodes, 3 * d, cfg.hidden, shared=cfg.shared_decoder)
        self.register_buffer("reference", torch.zeros(cfg.n_nodes, d))

    def shared_parameters(self):
        for mod in (self.encoder, self.correlation, self.global_attention):
            yield from mod.parameters()

    def encode_batch(self, x: torch.Tensor, lengths: torch.Tensor):
        """``x`` (B, N, L) -> pooled hidden states (B, N, 4 d_u)."""
        B, N, L = x.shape
        if L == 0 or torch.any(lengths < 1):
            raise EmptySequenceError("input sequences must have length >= 1")
        lens = lengths.repeat_interleave(N) if lengths.dim() == 1 else lengths.reshape(-1)
        pooled = self.encoder.pooled(x.reshape(B * N, L), lens)
        return pooled.reshape(B, N, -1)

    @torch.no_grad()
    def refresh_reference(self, sequences: torch.Tensor) -> None:
        """Cache prior means of one full sequence per node, ``sequences`` (N, L)."""
        seq = sequences.to(self.reference.dtype)
        lengths = torch.full((seq.shape[0],), seq.shape[1], dtype=torch.long)
        pooled = self.encoder.pooled(seq, lengths)
        self.reference.copy_(self.encoder.prior(pooled).mu_u)

    def forward(
        self,
        x: torch.Tensor,
        lengths: torch.Tensor,
        generator: torch.Generator | None = None,
        use_posterior: bool = False,
    ):
        x = x.to(self.reference.dtype)
        pooled = self.encode_batch(x, lengths)
        prior = self.encoder.prior(pooled)
        posterior = self.encoder.variational(pooled) if use_posterior else None
        source = posterior if use_posterior else prior
        noise_u = torch.randn(source.mu_u.shape, generator=generator, dtype=x.dtype)
        u = sample_embedding(source, noise_u)

        corr = build_correlation_set(u, self.reference, self.cfg.kappa, generator)
        z_mean, z_std = local_latent(corr, self.reference, self.correlation)
        noise_z = torch.randn(z_mean.shape, generator=generator, dtype=x.dtype)
        z_i = z_mean + z_std * noise_z

        z, beta = global_latent(u, self.global_attention)
        e = torch.cat([u, z_i, z.unsqueeze(-2).expand_as(u)], dim=-1)
        mu_hat, sigma_hat = self.decoder(e)
        latent = LatentState(u, z_i, z, corr, beta, prior, posterior)
        return mu_hat, sigma_hat, latent


def encode(sequence, model: RawForecaster) -> EmbeddingDist:
    """Prior embedding of a single sequence (deterministic)."""
    seq = torch.as_tensor(np.asarray(sequence, dtype=float), dtype=model.reference.dtype)
    if seq.numel() == 0:
        raise EmptySequenceError("sequence must have length >= 1")
    pooled = model.encoder.pooled(seq[None, :], torch.tensor([seq.numel()]))
    d = model.encoder.prior(pooled)
    return EmbeddingDist(d.mu_u[0], d.sigma_u[0])


def variational_posterior(sequence, model: RawForecaster) -> EmbeddingDist:
    seq = torch.as_tensor(np.asarray(sequence, dtype=float), dtype=model.reference.dtype)
    if seq.numel() == 0:
        raise EmptySequenceError("sequence must have length >= 1")
    pooled = model.encoder.pooled(seq[None, :], torch.tensor([seq.numel()]))
    d = model.encoder.variational(pooled)
    return EmbeddingDist(d.mu_u[0], d.sigma_u[0])


def decode_raw(u_i, z_i, z, node_id: int, model: RawForecaster):
    """Decode one node from its three latent vectors."""
    if not 1 <= node_id <= model.cfg.n_nodes:
        raise UnknownNodeError(f"node {node_id} not in 1..{model.cfg.n_nodes}")
    dec = model.decoder
    g = 0 if dec.shared else node_id - 1
    e = torch.cat([u_i, z_i, z], dim=-1)
    h = torch.tanh(e @ dec.w1[g] + dec.b1[g])
    h = torch.tanh(h @ dec.w2[g] + dec.b2[g])
    out = h @ dec.w3[g] + dec.b3[g]
    return out[..., 0], F.softplus(out[..., 1])
