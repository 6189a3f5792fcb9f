"""Optimisation loop, checkpoints and the per-vertex descriptor autoencoder."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .mesh import AnchorSet, MeshSequence, RegionPartition, select_anchors
from .model import ModelConfig, RePCM, kl_diag_gaussian, reconstruction_loss, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_WEIGHTS = "model.pt"
CHECKPOINT_CONFIG = "config.json"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 25
    weight_decay: float = 1e-2
    seed: int = 0
    beta_warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    max_steps: int | None = None
    lr_schedule: str = "constant"  # or "cosine"
    reseed_dead_prototypes: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("learning_rate, batch_size, max_epochs and patience must be positive")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("weight_decay must be >= 0 and grad_clip > 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def stack_cohort(cohort: Sequence[MeshSequence], dtype=torch.float32):
    """ED frames (S, N, 3) and ED-relative trajectories (S, T, N, 3) as tensors."""
    frames = np.stack([seq.frames for seq in cohort])
    ed = frames[:, 0]
    traj = frames - ed[:, None]
    return torch.as_tensor(ed, dtype=dtype), torch.as_tensor(traj, dtype=dtype)


def template_frame(cohort: Sequence[MeshSequence]) -> np.ndarray:
    return np.mean([seq.frames[0] for seq in cohort], axis=0)


def build_model(config: ModelConfig, partition: RegionPartition, template: np.ndarray,
                seed: int = 0) -> RePCM:
    """Anchor selection on the template ED frame plus seeded parameter init."""
    if partition.region_count != config.regions:
        raise ValueError(f"partition has {partition.region_count} regions, config {config.regions}")
    anchors = select_anchors(template, config.anchors, partition)
    torch.manual_seed(seed)
    return RePCM(config, partition.adjacency, anchors)


def beta_at(epoch: int, beta: float, config: TrainConfig) -> float:
    warm = max(1, math.ceil(config.beta_warmup_fraction * config.max_epochs))
    return beta * min(1.0, (epoch + 1) / warm)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Per-epoch learning rate: constant, or cosine decay from the initial value to 0."""
    if config.lr_schedule == "constant":
        return config.learning_rate
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * epoch / config.max_epochs))


def _check_finite(epoch, step, **tensors):
    for name, t in tensors.items():
        if not torch.all(torch.isfinite(t)):
            raise FloatingPointError(f"non-finite {name} at epoch {epoch}, step {step}")


@dataclass
class FitResult:
    model: RePCM
    log: list[dict]
    step_losses: list[float]
    best_epoch: int
    best_val: float
    steps: int = 0
    extra: dict = field(default_factory=dict)


@torch.no_grad()
def evaluate_loss(model: RePCM, ed, traj, beta: float, batch_size: int = 16):
    """Posterior-mean reconstruction + beta * KL, averaged over subjects."""
    model.eval()
    rec_sum = kl_sum = 0.0
    for i in range(0, len(ed), batch_size):
        e, t = ed[i:i + batch_size], traj[i:i + batch_size]
        out = model(e, t, None)
        rec_sum += float(reconstruction_loss(out.trajectory, t)) * len(e)
        kl_sum += float(kl_diag_gaussian(out.posterior, out.prior).sum())
    n = len(ed)
    return rec_sum / n + beta * kl_sum / n, rec_sum / n, kl_sum / n


@torch.no_grad()
def shape_embeddings(model: RePCM, ed, batch_size: int = 16):
    model.eval()
    return torch.cat([model.shape_tokens(ed[i:i + batch_size]).mean(dim=1)
                      for i in range(0, len(ed), batch_size)])


def fit(model: RePCM, train: Sequence[MeshSequence], val: Sequence[MeshSequence] | None,
        config: TrainConfig, out_dir=None) -> FitResult:
    """AdamW training with KL warm-up, prototype EMA and early stopping on validation loss.

    The returned model holds the best-validation parameters (last epoch when
    no validation set is given). ``out_dir`` receives ``train.log.jsonl`` and
    ``train.steps.jsonl``.
    """
    dtype = next(model.parameters()).dtype
    ed, traj = stack_cohort(train, dtype)
    if val:
        ed_v, traj_v = stack_cohort(val, dtype)
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    model.prior.init_prototypes(shape_embeddings(model, ed))
    target_beta = model.config.beta
    latent = model.config.latent_dim

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train.log.jsonl", "w")
        step_fh = open(out_dir / "train.steps.jsonl", "w")

    history, step_losses = [], []
    best_val, best_epoch, best_state = math.inf, -1, None
    stale, step = 0, 0
    try:
        for epoch in range(config.max_epochs):
            t0 = time.perf_counter()
            model.train()
            beta = beta_at(epoch, target_beta, config)
            for group in opt.param_groups:
                group["lr"] = lr_at(epoch, config)
            perm = torch.randperm(len(ed), generator=gen)
            rec_acc = kl_acc = 0.0
            hist = np.zeros(model.prior.n_experts, dtype=np.int64)
            for i in range(0, len(ed), config.batch_size):
                idx = perm[i:i + config.batch_size]
                e, t = ed[idx], traj[idx]
                noise = torch.randn(len(idx), latent, generator=gen, dtype=dtype)
                out = model(e, t, noise)
                rec = reconstruction_loss(out.trajectory, t)
                kl = kl_diag_gaussian(out.posterior, out.prior).mean()
                loss = total_loss(rec, kl, beta)
                _check_finite(epoch, step, trajectory=out.trajectory,
                              posterior_mean=out.posterior.mean,
                              posterior_log_variance=out.posterior.log_variance,
                              prior_mean=out.prior.mean, prior_log_variance=out.prior.log_variance,
                              reconstruction_loss=rec, kl=kl)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                model.prior.update(out.shape_embedding, out.gates)
                _check_finite(epoch, step, prototypes=model.prior.prototypes)

                step_losses.append(float(loss.detach()))
                if out_dir:
                    step_fh.write(json.dumps({"step": step, "loss": step_losses[-1]}) + "\n")
                rec_acc += float(rec.detach()) * len(idx)
                kl_acc += float(kl.detach()) * len(idx)
                hist += np.bincount(out.gates.argmax(-1).numpy(), minlength=len(hist))
                step += 1
                if config.max_steps and step >= config.max_steps:
                    break

            reseeded = []
            if config.reseed_dead_prototypes and model.prior.n_experts > 1:
                reseeded = model.prior.reseed(shape_embeddings(model, ed), torch.as_tensor(hist == 0))
            if val:
                val_total, val_rec, val_kl = evaluate_loss(model, ed_v, traj_v, target_beta)
            else:
                val_total, val_rec, val_kl = math.nan, math.nan, math.nan
            entry = {
                "epoch": epoch,
                "train_rec": rec_acc / len(ed),
                "train_kl": kl_acc / len(ed),
                "val_total": val_total,
                "val_rec": val_rec,
                "beta": beta,
                "gate_histogram": hist.tolist(),
                "lr": lr_at(epoch, config),
                "reseeded_experts": reseeded,
                "wall_seconds": time.perf_counter() - t0,
            }
            history.append(entry)
            if out_dir:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            log.debug("epoch %d rec %.4f kl %.4f val %.4f", epoch, entry["train_rec"],
                      entry["train_kl"], val_total)

            improved = (not val) or val_total < best_val
            if improved:
                best_val, best_epoch = (val_total if val else math.nan), epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
            if config.max_steps and step >= config.max_steps:
                break
    finally:
        if out_dir:
            log_fh.close()
            step_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    return FitResult(model, history, step_losses, best_epoch, best_val, step)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(directory, model: RePCM, partition_sha256: str, extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / CHECKPOINT_WEIGHTS)
    doc = {"model": model.config.to_dict(), "partition_sha256": partition_sha256}
    doc.update(extra or {})
    (directory / CHECKPOINT_CONFIG).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[RePCM, dict]:
    directory = Path(directory)
    doc = json.loads((directory / CHECKPOINT_CONFIG).read_text())
    state = torch.load(directory / CHECKPOINT_WEIGHTS, map_location="cpu", weights_only=True)
    cfg = ModelConfig(**doc["model"])
    anchors = AnchorSet(state["anchor_index"].numpy(), state["anchor_region"].numpy())
    model = RePCM(cfg, state["adjacency"].numpy(), anchors)
    model.load_state_dict(state)
    model.eval()
    return model, doc


# -- descriptor autoencoder (LEARNED Stage I backend) -----------------------------


@dataclass
class DescriptorAEConfig:
    hidden: int = 64
    learning_rate: float = 3e-3
    batch_size: int = 1024
    max_steps: int = 1500
    tolerance: float = 1e-6
    seed: int = 0


class DescriptorEncoder:
    """Maps (M, 3T) trajectory rows to (M, d) descriptors."""

    def __init__(self, net: nn.Module, scale: float):
        self.net = net.eval()
        self.scale = scale

    @torch.no_grad()
    def __call__(self, rows: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(rows) / self.scale, dtype=torch.float32)
        return self.net(x).double().numpy()


def fit_descriptor_autoencoder(cohort: Sequence[MeshSequence], d: int,
                               config: DescriptorAEConfig = DescriptorAEConfig(),
                               return_history: bool = False):
    """Train a shared 3T -> d -> 3T trajectory autoencoder over all subjects' vertices.

    Stops at ``max_steps`` or once the batch MSE (in units of the data scale)
    falls below ``tolerance``.
    """
    from .partition import flattened_trajectories

    if not cohort:
        raise ValueError("cohort is empty")
    rows = np.concatenate([flattened_trajectories(s) for s in cohort])
    scale = float(rows.std()) or 1.0
    x = torch.as_tensor(rows / scale, dtype=torch.float32)
    dim = x.shape[1]
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    enc = nn.Sequential(nn.Linear(dim, config.hidden), nn.GELU(), nn.Linear(config.hidden, d))
    dec = nn.Sequential(nn.Linear(d, config.hidden), nn.GELU(), nn.Linear(config.hidden, dim))
    params = list(enc.parameters()) + list(dec.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    history = []
    for step in range(config.max_steps):
        idx = torch.randint(len(x), (min(config.batch_size, len(x)),), generator=gen)
        loss = torch.mean((dec(enc(x[idx])) - x[idx]) ** 2)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"descriptor autoencoder diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if history[-1] < config.tolerance:
            break
    encoder = DescriptorEncoder(enc, scale)
    return (encoder, history) if return_history else encoder


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
