"""Desk-scale experiment drivers: overfit smoke run, region-prior and expert ablations."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .mesh import Chamber, MeshSequence, RegionPartition
from .metrics import expert_usage_matrix, volume_curve
from .model import ADDITIVE, ModelConfig
from .partition import functional_partition
from .synthdata import SyntheticCohort, generate_cohort, split_subjects
from .training import TrainConfig, build_model, fit, stack_cohort, template_frame

BASE = "base"
GLOBAL = "global"
SINGLE_EXPERT = "single"
VARIANTS = (BASE, GLOBAL, SINGLE_EXPERT)


@dataclass(frozen=True)
class DeskConfig:
    n_per_phenotype: int = 40
    data_seed: int = 0
    split_seed: int = 0
    regions: int = 16
    anchors: int = 64
    channels: int = 64
    layers: int = 2
    heads: int = 4
    latent_dim: int = 16
    experts: int = 4
    mask_mode: str = ADDITIVE
    learning_rate: float = 3e-3
    batch_size: int = 8
    max_epochs: int = 300
    patience: int = 25


@dataclass
class DeskData:
    cohort: SyntheticCohort
    train: list[MeshSequence]
    val: list[MeshSequence]
    test: list[MeshSequence]
    partition: RegionPartition


def prepare_desk_data(cfg: DeskConfig = DeskConfig()) -> DeskData:
    cohort = generate_cohort(cfg.n_per_phenotype, seed=cfg.data_seed)
    split = split_subjects(cohort.sequences, cfg.split_seed)
    parts = {k: [s for s in cohort.sequences if split[s.subject_id] == k]
             for k in ("train", "val", "test")}
    partition = functional_partition(parts["train"], r=cfg.regions, seed=cfg.data_seed)
    return DeskData(cohort, parts["train"], parts["val"], parts["test"], partition)


def model_config(cfg: DeskConfig, variant: str = BASE) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return ModelConfig(
        anchors=cfg.anchors, channels=cfg.channels, latent_dim=cfg.latent_dim,
        encoder_layers=cfg.layers, decoder_layers=cfg.layers, heads=cfg.heads,
        experts=1 if variant == SINGLE_EXPERT else cfg.experts,
        regions=cfg.regions, mask_mode=cfg.mask_mode,
    )


def train_variant(data: DeskData, cfg: DeskConfig, variant: str, seed: int):
    """Train one ablation arm; the global arm swaps in an all-ones adjacency."""
    partition = data.partition
    if variant == GLOBAL:
        partition = RegionPartition(partition.assignment, np.ones_like(partition.adjacency))
    model = build_model(model_config(cfg, variant), partition, template_frame(data.train), seed)
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                       max_epochs=cfg.max_epochs, patience=cfg.patience, seed=seed)
    t0 = time.perf_counter()
    result = fit(model, data.train, data.val, tcfg)
    result.extra["seconds"] = time.perf_counter() - t0
    return result


@torch.no_grad()
def complete_cohort(model, cohort: Sequence[MeshSequence], batch_size: int = 16):
    """Prior-mean completions (S, T, N, 3) in absolute coordinates, plus gates (S, E)."""
    ed, _ = stack_cohort(cohort, next(model.parameters()).dtype)
    trajs, gates = [], []
    for i in range(0, len(ed), batch_size):
        traj, _, g = model.complete(ed[i:i + batch_size])
        trajs.append(traj)
        gates.append(g)
    traj = torch.cat(trajs).double().numpy()
    return traj + ed.double().numpy()[:, None], torch.cat(gates).double().numpy()


def heldout_summary(model, test: Sequence[MeshSequence], partition: RegionPartition) -> dict:
    """Held-out vtxRMSE overall, mean per-region vtxRMSE, gates and NOR LV curves."""
    pred, gates = complete_cohort(model, test)
    truth = np.stack([s.frames for s in test])
    sq = np.sum((pred - truth) ** 2, axis=-1)  # (S, T, N)
    per_region = np.array([np.sqrt(sq[..., partition.assignment == r].mean())
                           for r in range(partition.region_count)])
    phen = [s.phenotype for s in test]
    usage, labels = expert_usage_matrix(gates, phen)
    curves = []
    for s, p in zip(test, pred):
        if s.phenotype != "NOR":
            continue
        curves.append({
            "id": s.subject_id,
            "es_frame": int(s.meta["es_frame"]),
            "pred": volume_curve(p, s.topology, Chamber.LV, normalized=True),
            "truth": volume_curve(s.frames, s.topology, Chamber.LV, normalized=True),
        })
    return {
        "vtx_rmse": float(np.sqrt(sq.mean())),
        "per_region_rmse": per_region,
        "mean_region_rmse": float(per_region.mean()),
        "gates": gates,
        "usage": usage,
        "usage_labels": labels,
        "nor_lv_curves": curves,
    }


def overfit_smoke(n_subjects: int = 4, steps: int = 2000, learning_rate: float = 3e-3,
                  seed: int = 0):
    """Train the reduced model (K=32, C=32, 2 layers) on a tiny cohort; returns
    (train vtxRMSE of prior-mean completions, mean motion amplitude, FitResult)."""
    cohort = generate_cohort(1, seed=seed).sequences[:n_subjects]
    partition = functional_partition(cohort, r=4, seed=seed)
    cfg = ModelConfig(anchors=32, channels=32, encoder_layers=2, decoder_layers=2,
                      regions=4, experts=min(4, n_subjects))
    model = build_model(cfg, partition, template_frame(cohort), seed)
    tcfg = TrainConfig(learning_rate=learning_rate, batch_size=n_subjects,
                       max_epochs=steps, max_steps=steps, seed=seed)
    result = fit(model, cohort, None, tcfg)
    pred, _ = complete_cohort(result.model, cohort)
    truth = np.stack([s.frames for s in cohort])
    rmse = float(np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=-1))))
    amplitude = float(np.mean(np.linalg.norm(truth - truth[:, :1], axis=-1)))
    return rmse, amplitude, result


def with_overrides(cfg: DeskConfig, **kw) -> DeskConfig:
    return replace(cfg, **kw)
