"""Diagonal Gaussians, KL divergence and the shape-conditioned mixture-of-experts prior."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def variance(self):
        return self.log_variance.exp()


def gaussian_from_raw(raw: torch.Tensor) -> GaussianParams:
    mean, logvar = raw.chunk(2, dim=-1)
    return GaussianParams(mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))


def reparameterize(params: GaussianParams, noise: torch.Tensor | None = None) -> torch.Tensor:
    """mean + exp(log_variance / 2) * noise; ``noise=None`` returns the mean."""
    if noise is None:
        return params.mean
    return params.mean + torch.exp(0.5 * params.log_variance) * noise


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension."""
    var_p = p.log_variance.exp()
    if torch.any(var_p <= 0):
        raise ValueError("prior variance must be positive")
    var_q = q.log_variance.exp()
    return 0.5 * torch.sum(
        var_q / var_p + (p.mean - q.mean) ** 2 / var_p - 1.0 + p.log_variance - q.log_variance,
        dim=-1,
    )


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise ValueError(f"zero-norm {what}; cosine similarity is undefined")
    return x / norm


def gate_weights(embedding: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Softmax over cosine similarities between embedding(s) and prototypes, no temperature."""
    cos = _unit(embedding, "shape embedding") @ _unit(prototypes, "prototype").T
    return torch.softmax(cos, dim=-1)


def combine_experts(weights: torch.Tensor, means: torch.Tensor, variances: torch.Tensor) -> GaussianParams:
    """Parameter-space mixture: weights (..., E); means, variances (..., E, D)."""
    mean = torch.sum(weights[..., None] * means, dim=-2)
    var = torch.sum(weights[..., None] * variances, dim=-2)
    return GaussianParams(mean, var.log().clamp(LOGVAR_MIN, LOGVAR_MAX))


@torch.no_grad()
def update_prototypes(prototypes: torch.Tensor, embeddings: torch.Tensor, weights: torch.Tensor,
                      momentum: float) -> torch.Tensor:
    """EMA of the embeddings hard-assigned (argmax gate) to each prototype.

    The batch mean for expert e is weighted by the gate weights of its
    assigned embeddings; experts with no assignment keep their prototype.
    """
    out = prototypes.clone()
    winner = weights.argmax(dim=-1)
    for e in range(prototypes.shape[0]):
        sel = winner == e
        if not torch.any(sel):
            continue
        w = weights[sel, e]
        target = (w[:, None] * embeddings[sel]).sum(0) / w.sum()
        out[e] = momentum * prototypes[e] + (1.0 - momentum) * target
    return out


class ExpertHead(nn.Module):
    """Two-layer perceptron C -> C -> 2D giving a mean and a log-variance."""

    def __init__(self, channels: int, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(channels, channels), nn.GELU(),
                                 nn.Linear(channels, 2 * latent_dim))

    def forward(self, x) -> GaussianParams:
        return gaussian_from_raw(self.net(x))


class MoEPrior(nn.Module):
    """Shape-conditioned prior p(z | ED) as a gated mixture of expert Gaussians.

    Prototypes are buffers maintained by EMA, not by the optimiser.
    """

    def __init__(self, channels: int, latent_dim: int, n_experts: int, momentum: float = 0.99):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        self.momentum = momentum
        self.experts = nn.ModuleList(ExpertHead(channels, latent_dim) for _ in range(n_experts))
        self.register_buffer("prototypes", torch.randn(n_experts, channels))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def forward(self, shape_embedding: torch.Tensor):
        """Returns the combined prior and the gate weights for ``shape_embedding`` (..., C)."""
        w = gate_weights(shape_embedding, self.prototypes.to(shape_embedding.dtype))
        heads = [h(shape_embedding) for h in self.experts]
        means = torch.stack([h.mean for h in heads], dim=-2)
        variances = torch.stack([h.variance for h in heads], dim=-2)
        return combine_experts(w, means, variances), w

    def update(self, shape_embedding: torch.Tensor, weights: torch.Tensor) -> None:
        self.prototypes.copy_(update_prototypes(
            self.prototypes, shape_embedding.detach().to(self.prototypes.dtype),
            weights.detach().to(self.prototypes.dtype), self.momentum))

    @torch.no_grad()
    def reseed(self, embeddings: torch.Tensor, dead: torch.Tensor) -> list[int]:
        """Move each ``dead`` prototype onto the embedding farthest (cosine) from the live ones.

        The online analogue of reseeding an empty k-means cluster at the
        farthest point. Returns the reseeded expert indices.
        """
        dead = torch.as_tensor(dead, dtype=torch.bool)
        if not dead.any() or dead.all() or len(embeddings) == 0:
            return []
        u = F.normalize(embeddings.to(self.prototypes.dtype), dim=-1)
        live = F.normalize(self.prototypes[~dead], dim=-1)
        mind = (1.0 - u @ live.T).min(dim=1).values
        moved = []
        for e in torch.nonzero(dead).flatten().tolist():
            j = int(torch.argmax(mind))
            self.prototypes[e] = embeddings[j].to(self.prototypes.dtype)
            mind = torch.minimum(mind, 1.0 - u @ u[j])
            moved.append(e)
        return moved

    @torch.no_grad()
    def init_prototypes(self, embeddings: torch.Tensor) -> None:
        """Seed prototypes with mutually distant embeddings (greedy max-min on cosine distance)."""
        u = F.normalize(embeddings.to(self.prototypes.dtype), dim=-1)
        n = len(u)
        if n == 0:
            return
        chosen = [0]
        mind = 1.0 - u @ u[0]
        for _ in range(1, min(self.n_experts, n)):
            j = int(torch.argmax(mind))
            chosen.append(j)
            mind = torch.minimum(mind, 1.0 - u @ u[j])
        protos = embeddings[chosen].to(self.prototypes.dtype)
        self.prototypes[: len(chosen)] = protos
