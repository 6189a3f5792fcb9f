from __future__ import annotations

import torch


def reconstruction_loss(pred_frames: torch.Tensor, true_frames: torch.Tensor) -> torch.Tensor:
    """Squared vertex error summed over xyz, averaged over frames and vertices (and batch)."""
    if pred_frames.shape != true_frames.shape:
        raise ValueError(f"shape mismatch {tuple(pred_frames.shape)} vs {tuple(true_frames.shape)}")
    return torch.sum((pred_frames - true_frames) ** 2, dim=-1).mean()


def total_loss(rec: torch.Tensor, kl: torch.Tensor, beta: float) -> torch.Tensor:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return rec + beta * kl
