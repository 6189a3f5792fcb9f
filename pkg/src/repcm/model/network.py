"""Region-aware, phenotype-adaptive conditional VAE for single-frame motion completion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from ..mesh import AnchorSet
from .attention import MASK_MODES, ADDITIVE
from .layers import AttentionLayer, RegionInjection, SinusoidalEncoding
from .prior import GaussianParams, MoEPrior, gaussian_from_raw, reparameterize


@dataclass
class ModelConfig:
    anchors: int = 512
    channels: int = 128
    latent_dim: int = 16
    encoder_layers: int = 8
    decoder_layers: int = 8
    experts: int = 4
    regions: int = 16
    mask_mode: str = ADDITIVE
    beta: float = 1e-3
    prototype_momentum: float = 0.99
    heads: int = 4
    frames: int = 25
    n_freqs: int = 6
    mlp_ratio: int = 2
    coord_scale: float = 50.0  # mm per unit fed to the shape encoding
    motion_scale: float = 10.0  # mm per unit for trajectories in and out

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        for name in ("anchors", "channels", "latent_dim", "experts", "regions", "heads", "frames",
                     "n_freqs", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.beta < 0 or not 0.0 <= self.prototype_momentum <= 1.0:
            raise ValueError("beta must be >= 0 and prototype_momentum in [0, 1]")

    def to_dict(self):
        return asdict(self)


class ModelOutput(NamedTuple):
    trajectory: torch.Tensor  # (B, T, N, 3) ED-relative, mm
    posterior: GaussianParams
    prior: GaussianParams
    gates: torch.Tensor  # (B, E)
    shape_embedding: torch.Tensor  # (B, C)


class RePCM(nn.Module):
    """Anchor-token conditional VAE.

    The region partition and anchor set are fixed at construction and stored
    as buffers, so a checkpoint always carries the prior it was trained with.
    """

    def __init__(self, config: ModelConfig, adjacency, anchors: AnchorSet):
        super().__init__()
        cfg = self.config = config
        adjacency = torch.as_tensor(np.asarray(adjacency), dtype=torch.float32)
        if adjacency.shape != (cfg.regions, cfg.regions):
            raise ValueError(f"adjacency {tuple(adjacency.shape)} does not match {cfg.regions} regions")
        if len(anchors) != cfg.anchors:
            raise ValueError(f"{len(anchors)} anchors supplied, config expects {cfg.anchors}")
        counts = np.bincount(anchors.region_ids, minlength=cfg.regions)
        if len(counts) > cfg.regions or np.any(counts == 0):
            missing = int(np.argmin(counts[: cfg.regions]))
            raise ValueError(f"region {missing} owns no anchor")
        self.register_buffer("adjacency", adjacency)
        self.register_buffer("anchor_index", torch.as_tensor(anchors.indices, dtype=torch.long))
        self.register_buffer("anchor_region", torch.as_tensor(anchors.region_ids, dtype=torch.long))

        c, t = cfg.channels, cfg.frames
        self.pe_shape = SinusoidalEncoding(3, c, cfg.n_freqs)
        self.pe_motion = SinusoidalEncoding(3 * t, c, cfg.n_freqs)
        self.injection = RegionInjection(c, cfg.regions, cfg.mask_mode)
        self.encoder = nn.ModuleList(
            AttentionLayer(c, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_layers)
        )
        self.enc_norm0 = nn.LayerNorm(c)
        self.enc_normT = nn.LayerNorm(c)
        self.posterior_head = nn.Sequential(nn.Linear(2 * c, c), nn.GELU(),
                                            nn.Linear(c, 2 * cfg.latent_dim))
        self.prior = MoEPrior(c, cfg.latent_dim, cfg.experts, cfg.prototype_momentum)

        self.latent_to_shape = nn.Linear(cfg.latent_dim, c)
        self.latent_to_motion = nn.Linear(cfg.latent_dim, c)
        self.shape_to_motion = nn.Linear(c, c)
        self.decoder = nn.ModuleList(
            AttentionLayer(c, cfg.heads, cfg.mlp_ratio, self_attention=False)
            for _ in range(cfg.decoder_layers)
        )
        self.dec_norm0 = nn.LayerNorm(c)
        self.dec_normT = nn.LayerNorm(c)
        self.head = nn.Linear(c, 3 * t)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    # -- encoder -------------------------------------------------------------
    def _encode(self, ed: torch.Tensor, traj: torch.Tensor | None):
        idx = self.anchor_index
        x0 = self.pe_shape(ed[:, idx] / self.config.coord_scale)
        xT = None
        if traj is not None:
            if traj.shape[1] != self.config.frames:
                raise ValueError(f"expected {self.config.frames} frames, got {traj.shape[1]}")
            flat = traj[:, :, idx].permute(0, 2, 1, 3).reshape(traj.shape[0], len(idx), -1)
            xT = self.pe_motion(flat / self.config.motion_scale)
        x0, xT, _ = self.injection(x0, xT, self.anchor_region, self.adjacency)
        for layer in self.encoder:
            x0, xT = layer(x0, xT)
        return self.enc_norm0(x0), (None if xT is None else self.enc_normT(xT))

    def shape_tokens(self, ed: torch.Tensor) -> torch.Tensor:
        """Anchor shape tokens (B, K, C); they depend on the ED frame only."""
        return self._encode(ed, None)[0]

    def encode_posterior(self, ed: torch.Tensor, traj: torch.Tensor):
        x0, xT = self._encode(ed, traj)
        pooled = torch.cat([x0.mean(dim=1), xT.mean(dim=1)], dim=-1)
        return gaussian_from_raw(self.posterior_head(pooled)), x0

    def prior_from_tokens(self, x0: torch.Tensor):
        e_s = x0.mean(dim=1)
        prior, gates = self.prior(e_s)
        return prior, gates, e_s

    # -- decoder -------------------------------------------------------------
    def decode(self, z: torch.Tensor, ed: torch.Tensor, x0: torch.Tensor,
               return_weights: bool = False):
        """Latent + ED conditioning -> ED-relative trajectories (B, T, N, 3) in mm."""
        d0 = x0 + self.latent_to_shape(z)[:, None]
        dT = self.shape_to_motion(x0) + self.latent_to_motion(z)[:, None]
        for layer in self.decoder:
            d0, dT = layer(d0, dT)
        d0, dT = self.dec_norm0(d0), self.dec_normT(dT)
        query = self.pe_shape(ed / self.config.coord_scale)  # (B, N, C)
        w = torch.softmax(query @ d0.transpose(1, 2) / math.sqrt(d0.shape[-1]), dim=-1)
        h = w @ dT
        b, n, _ = ed.shape
        out = self.head(h).reshape(b, n, self.config.frames, 3).permute(0, 2, 1, 3)
        out = out * self.config.motion_scale
        return (out, w) if return_weights else out

    # -- full passes ---------------------------------------------------------
    def forward(self, ed: torch.Tensor, traj: torch.Tensor,
                noise: torch.Tensor | None = None) -> ModelOutput:
        posterior, x0 = self.encode_posterior(ed, traj)
        prior, gates, e_s = self.prior_from_tokens(x0)
        z = reparameterize(posterior, noise)
        return ModelOutput(self.decode(z, ed, x0), posterior, prior, gates, e_s)

    def complete(self, ed: torch.Tensor, noise: torch.Tensor | None = None):
        """Trajectories from the ED frame alone, sampling the prior (``noise=None``: its mean)."""
        x0 = self.shape_tokens(ed)
        prior, gates, _ = self.prior_from_tokens(x0)
        z = reparameterize(prior, noise)
        return self.decode(z, ed, x0), prior, gates
