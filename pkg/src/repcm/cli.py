"""Command-line entry point: generate-data, partition, train, complete, evaluate, plot."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import container
from .mesh import MeshSequence
from .model import MASK_MODES, ModelConfig
from .partition import LEARNED, PCA, functional_partition
from .training import (
    TrainConfig,
    build_model,
    fit,
    load_checkpoint,
    save_checkpoint,
    stack_cohort,
    template_frame,
)

RUN_CONFIG = "run_config.json"


@dataclass
class DataConfig:
    n_per_phenotype: int = 40
    mesh_rings: int = 20
    mesh_segments: int = 24
    split_seed: int = 0


@dataclass
class PartitionConfig:
    descriptor_dim: int = 16
    backend: str = PCA

    def __post_init__(self):
        if self.backend not in (PCA, LEARNED):
            raise ValueError(f"partition backend must be {PCA!r} or {LEARNED!r}")


@dataclass
class PathConfig:
    data: str | None = None
    partition: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None
    report: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in doc.items():
            if name == "seed":
                kwargs[name] = int(value)
                continue
            if not isinstance(value, dict):
                raise ValueError(f"config section {name!r} must be a mapping")
            factory = sections[name].default_factory  # type: ignore[misc]
            bad = set(value) - {f.name for f in fields(factory)}
            if bad:
                raise ValueError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = factory(**value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _load_run_config(args) -> RunConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "regions", None) is not None:
        cfg.model.regions = args.regions
    if getattr(args, "experts", None) is not None:
        cfg.model.experts = args.experts
    if getattr(args, "mask_mode", None) is not None:
        cfg.model.mask_mode = args.mask_mode
    for name in ("data", "partition", "checkpoint", "predictions", "report", "out"):
        value = getattr(args, name.replace("-", "_") + "_path", None)
        if value is not None:
            setattr(cfg.paths, name, str(value))
    # re-validate after overrides
    cfg.model = ModelConfig(**asdict(cfg.model))
    cfg.train = TrainConfig(**asdict(cfg.train))
    return cfg


def _require(cfg: RunConfig, name: str) -> Path:
    value = getattr(cfg.paths, name)
    if value is None:
        raise ValueError(f"missing required path: --{name}")
    return Path(value)


def _out_dir(cfg: RunConfig) -> Path:
    out = _require(cfg, "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, cfg: RunConfig):
    (out / RUN_CONFIG).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _partition_file(cfg: RunConfig) -> Path:
    path = _require(cfg, "partition")
    return path / "partition.json" if path.is_dir() else path


# -- commands --------------------------------------------------------------------


def cmd_generate_data(cfg: RunConfig, args) -> None:
    from .synthdata import generate_cohort, write_cohort

    out = _out_dir(cfg)
    cohort = generate_cohort(cfg.data.n_per_phenotype,
                             mesh_resolution=(cfg.data.mesh_rings, cfg.data.mesh_segments),
                             seed=cfg.seed)
    write_cohort(out, cohort, cfg.data.split_seed)
    _write_run_config(out, cfg)


def cmd_partition(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    train = container.load_cohort(_require(cfg, "data"), split="train")
    if not train:
        raise ValueError("no training subjects in the data manifest")
    part = functional_partition(train, r=cfg.model.regions, backend=cfg.partition.backend,
                                d=cfg.partition.descriptor_dim, seed=cfg.seed)
    digest = container.save_partition(out / "partition.json", part, cfg.seed, cfg.partition.backend)
    _write_run_config(out, cfg)
    print(f"partition.json sha256 {digest}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    data = _require(cfg, "data")
    train = container.load_cohort(data, split="train")
    val = container.load_cohort(data, split="val")
    if not train:
        raise ValueError("no training subjects in the data manifest")
    pfile = _partition_file(cfg)
    part, _ = container.load_partition(pfile)
    model = build_model(cfg.model, part, template_frame(train), cfg.seed)
    result = fit(model, train, val or None, cfg.train, out_dir=out)
    save_checkpoint(out, result.model, container.file_sha256(pfile),
                    {"best_epoch": result.best_epoch, "best_val": result.best_val,
                     "train": asdict(cfg.train)})
    _write_run_config(out, cfg)


def _check_partition(doc: dict, pfile: Path) -> None:
    digest = container.file_sha256(pfile)
    if digest != doc.get("partition_sha256"):
        raise ValueError(f"partition {pfile} (sha256 {digest[:12]}) differs from the one the "
                         f"checkpoint was trained with ({str(doc.get('partition_sha256'))[:12]})")


def cmd_complete(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    model, doc = load_checkpoint(_require(cfg, "checkpoint"))
    _check_partition(doc, _partition_file(cfg))
    subjects = args.subjects.split(",") if args.subjects else None
    source = container.load_cohort(_require(cfg, "data"), subjects=subjects, split=args.split)
    if not source:
        raise ValueError("no subjects selected for completion")
    ed, _ = stack_cohort(source)
    gen = torch.Generator().manual_seed(cfg.seed)
    preds, gates = [], {}
    with torch.no_grad():
        for i, seq in enumerate(source):
            noise = None
            if args.noise == "sample":
                noise = torch.randn(1, model.config.latent_dim, generator=gen)
            traj, _, g = model.complete(ed[i:i + 1], noise)
            frames = traj[0].double().numpy() + seq.frames[0][None]
            preds.append(MeshSequence(frames, seq.topology, seq.phenotype, seq.subject_id))
            gates[seq.subject_id] = {"gates": g[0].double().tolist()}
    container.save_cohort(out, preds, extra={"noise": args.noise, "seed": cfg.seed,
                                             "partition_sha256": doc["partition_sha256"]},
                          subject_extra=gates)
    _write_run_config(out, cfg)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    from .metrics import evaluate, write_report

    out = _out_dir(cfg)
    pred_dir = _require(cfg, "predictions")
    preds = container.load_cohort(pred_dir)
    manifest = container.read_manifest(pred_dir)
    truth = container.load_cohort(_require(cfg, "data"), subjects=[p.subject_id for p in preds])
    missing = {p.subject_id for p in preds} - {t.subject_id for t in truth}
    if missing:
        raise ValueError(f"no ground truth for {sorted(missing)[:5]}")
    gates = {s["id"]: s["gates"] for s in manifest["subjects"] if "gates" in s}
    report = evaluate({p.subject_id: p.frames for p in preds}, truth, gates or None,
                      pooled_hd95=not args.max_directed_hd95)
    report.config = cfg.to_dict()
    write_report(report, out)
    _write_run_config(out, cfg)
    for key, stats in report.summary.items():
        print(f"{key}: {stats['mean']:.4f} +/- {stats['std']:.4f}")


def cmd_plot(cfg: RunConfig, args) -> None:
    from .metrics import plot_report

    out = _out_dir(cfg)
    path = _require(cfg, "report")
    if path.is_dir():
        path = path / "report.json"
    for p in plot_report(json.loads(path.read_text()), out):
        print(p)
    _write_run_config(out, cfg)


COMMANDS = {
    "generate-data": cmd_generate_data,
    "partition": cmd_partition,
    "train": cmd_train,
    "complete": cmd_complete,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; command-line flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_path", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="repcm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", parents=[common], help="write a synthetic cohort")

    p = sub.add_parser("partition", parents=[common], help="functional region partition")
    p.add_argument("--data", dest="data_path", help="cohort directory")
    p.add_argument("--regions", type=int)

    p = sub.add_parser("train", parents=[common], help="train the completion model")
    p.add_argument("--data", dest="data_path")
    p.add_argument("--partition", dest="partition_path", help="partition.json or its directory")
    p.add_argument("--regions", type=int)
    p.add_argument("--experts", type=int)
    p.add_argument("--mask-mode", choices=MASK_MODES)

    p = sub.add_parser("complete", parents=[common], help="complete sequences from ED frames")
    p.add_argument("--checkpoint", dest="checkpoint_path")
    p.add_argument("--partition", dest="partition_path")
    p.add_argument("--data", dest="data_path", help="cohort providing the ED frames")
    p.add_argument("--subjects", help="comma-separated subject ids")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--noise", choices=("zero", "sample"), default="zero")

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against truth")
    p.add_argument("--predictions", dest="predictions_path")
    p.add_argument("--data", dest="data_path", help="ground-truth cohort")
    p.add_argument("--max-directed-hd95", action="store_true",
                   help="HD95 as the larger per-direction percentile instead of pooled")

    p = sub.add_parser("plot", parents=[common], help="render report figures")
    p.add_argument("--report", dest="report_path", help="report.json or its directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_run_config(args)
        COMMANDS[args.command](cfg, args)
    except (OSError, ValueError, KeyError, TypeError, RuntimeError, FloatingPointError,
            json.JSONDecodeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"repcm {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
