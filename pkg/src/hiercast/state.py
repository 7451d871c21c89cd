"""The full forecaster (base network + refinement), the raw forward pass,
seed derivation and checkpoint I/O."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointMismatchError
from .gaussian import GaussianForecastSet
from .hierarchy import Hierarchy, parse_hierarchy_csv
from .model import RawForecaster, LatentState, ModelConfig
from .refinement import Refinement

CHECKPOINT_FORMAT = "hiercast-checkpoint"
CHECKPOINT_VERSION = 1


def derive_seed(seed: int, *keys) -> int:
    """Independent 63-bit seed for a (seed, key, ...) tuple.

    String keys are hashed through their UTF-8 bytes so the result does not
    depend on Python's per-process string hashing.
    """
    ints = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            ints.extend(k.encode("utf-8"))
        else:
            ints.append(int(k))
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g


class ModelState(nn.Module):
    """All trainable parameters: ``raw`` (per-node raw forecaster) and ``refinement``."""

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        if seed is None:
            self._build(cfg)
        else:
            with torch.random.fork_rng():
                torch.manual_seed(derive_seed(seed, "init"))
                self._build(cfg)
        self.double()

    def _build(self, cfg: ModelConfig) -> None:
        self.raw = RawForecaster(cfg)
        self.refinement = Refinement(cfg.n_nodes, cfg.c)

    @property
    def n_nodes(self) -> int:
        return self.cfg.n_nodes

    @property
    def dtype(self) -> torch.dtype:
        return self.raw.reference.dtype

    def decoder_parameters(self):
        return self.raw.decoder.parameters()

    def refresh_reference(self, sequences) -> None:
        self.raw.refresh_reference(torch.as_tensor(np.asarray(sequences, float), dtype=self.dtype))

    def forward(self, x, lengths, generator=None, use_posterior=False, refined=True):
        """Forecast parameters for a batch; returns ``(mu, sigma, latent)``."""
        mu_hat, sigma_hat, latent = self.raw(x, lengths, generator, use_posterior)
        if not refined:
            return mu_hat, sigma_hat, latent
        mu, sigma, _ = self.refinement(mu_hat, sigma_hat)
        return mu, sigma, latent


def _as_batch(x, lengths, dtype):
    x = torch.as_tensor(np.asarray(x, float) if not torch.is_tensor(x) else x, dtype=dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[-1], dtype=torch.long)
    return x, torch.as_tensor(lengths, dtype=torch.long).reshape(-1)


def raw_forecast_pass(
    inputs, state: ModelState, generator: torch.Generator | None = None,
    lengths=None, use_posterior: bool = False,
) -> tuple[GaussianForecastSet, LatentState]:
    """Raw per-node Gaussians for input slices ``(N, L)`` or a batch ``(B, N, L)``."""
    x, lens = _as_batch(inputs, lengths, state.dtype)
    mu_hat, sigma_hat, latent = state.raw(x, lens, generator, use_posterior)
    if x.shape[0] == 1 and torch.as_tensor(inputs).dim() == 2:
        mu_hat, sigma_hat = mu_hat[0], sigma_hat[0]
    return GaussianForecastSet(mu_hat, sigma_hat), latent


@dataclass
class Checkpoint:
    state: ModelState
    hierarchy: Hierarchy
    config: dict
    offset: np.ndarray
    scale: np.ndarray
    train_end: int
    variant: str
    preprocess: str


def save_checkpoint(
    path: str | Path, state: ModelState, hierarchy: Hierarchy, config: dict,
    offset, scale, train_end: int, variant: str, preprocess: str,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        # JSON text keeps the pickle independent of string identity, so a
        # reloaded checkpoint saves to the same bytes
        "config": json.dumps(config, sort_keys=True),
        "model_config": json.dumps(asdict(state.cfg), sort_keys=True),
        "state_dict": {k: v.detach().clone() for k, v in state.state_dict().items()},
        "hierarchy_csv": hierarchy.to_csv(),
        "offset": torch.as_tensor(np.asarray(offset, float)),
        "scale": torch.as_tensor(np.asarray(scale, float)),
        "train_end": int(train_end),
        "variant": variant,
        "preprocess": preprocess,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointMismatchError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**json.loads(payload["model_config"]))
    state = ModelState(cfg)
    try:
        state.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatchError(str(exc)) from exc
    return Checkpoint(
        state=state,
        hierarchy=parse_hierarchy_csv(payload["hierarchy_csv"]),
        config=json.loads(payload["config"]),
        offset=payload["offset"].numpy(),
        scale=payload["scale"].numpy(),
        train_end=payload["train_end"],
        variant=payload["variant"],
        preprocess=payload["preprocess"],
    )
