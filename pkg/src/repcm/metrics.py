"""Surface distances, vertex RMSE, volume curves and expert-usage analysis."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mesh import PHENOTYPES, Chamber, MeshSequence, MeshTopology, chamber_volume

CHAMBERS = (Chamber.LV, Chamber.RV)


class Surface(NamedTuple):
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) indices into ``vertices``


def chamber_surface(frame: np.ndarray, topology: MeshTopology, chamber) -> Surface:
    faces = topology.chamber_faces(chamber)
    used = np.unique(faces)
    remap = np.full(topology.vertex_count, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Surface(np.asarray(frame, dtype=np.float64)[used], remap[faces])


def surface_samples(surface: Surface) -> np.ndarray:
    """Vertices followed by face barycenters."""
    v, f = surface
    return np.concatenate([v, v[f].mean(axis=1)])


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance from points ``p`` to triangles ``(a, b, c)``.

    Voronoi-region closest-point test; every argument is (M, 3).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    choices = [
        a,
        b,
        a + t_ab[:, None] * ab,
        c,
        a + t_ac[:, None] * ac,
        b + t_bc[:, None] * (c - b),
    ]
    closest = a + v_in[:, None] * ab + w_in[:, None] * ac
    for cond, choice in zip(reversed(conds), reversed(choices)):
        closest = np.where(cond[:, None], choice, closest)
    return np.sqrt(np.sum((p - closest) ** 2, axis=1))


def _coincident(points: np.ndarray, surface: Surface) -> np.ndarray:
    """Mask of points bit-identical to one of the surface's own samples.

    Barycenters are not exactly representable on their triangle, so without
    this an identical surface would score ~1e-17 instead of 0.
    """
    samples = surface_samples(surface)
    row = np.dtype((np.void, samples.dtype.itemsize * 3))
    pts = np.ascontiguousarray(points, dtype=samples.dtype).view(row).ravel()
    return np.isin(pts, np.ascontiguousarray(samples).view(row).ravel())


def directed_distances_bruteforce(points: np.ndarray, surface: Surface, chunk: int = 256) -> np.ndarray:
    """Distance from every point to ``surface`` by testing every triangle."""
    v, f = surface
    if len(points) == 0 or len(f) == 0:
        raise ValueError("empty surface")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    nf = len(f)
    out = np.empty(len(points))
    for i in range(0, len(points), chunk):
        p = points[i:i + chunk]
        m = len(p)
        d = point_triangle_distance(np.repeat(p, nf, axis=0), np.tile(a, (m, 1)),
                                    np.tile(b, (m, 1)), np.tile(c, (m, 1)))
        out[i:i + m] = d.reshape(m, nf).min(axis=1)
    out[_coincident(points, surface)] = 0.0
    return out


def directed_distances(points: np.ndarray, surface: Surface) -> np.ndarray:
    """Point-to-surface distances using a centroid KD-tree to prune triangles.

    A triangle can only beat the nearest-centroid triangle if its centroid lies
    within (that distance + max circumradius about the centroid), so the
    pruned minimum equals the exhaustive one.
    """
    v, f = surface
    if len(points) == 0 or len(f) == 0:
        raise ValueError("empty surface")
    tri = v[f]
    cent = tri.mean(axis=1)
    reach = float(np.max(np.linalg.norm(tri - cent[:, None], axis=2)))
    tree = cKDTree(cent)
    _, nearest = tree.query(points)
    ub = point_triangle_distance(points, tri[nearest, 0], tri[nearest, 1], tri[nearest, 2])
    cands = tree.query_ball_point(points, ub + reach + 1e-9)
    counts = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
    flat = np.fromiter((j for c in cands for j in c), dtype=np.int64, count=int(counts.sum()))
    owner = np.repeat(np.arange(len(points)), counts)
    d = point_triangle_distance(points[owner], tri[flat, 0], tri[flat, 1], tri[flat, 2])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.minimum.reduceat(d, starts)
    out[_coincident(points, surface)] = 0.0
    return out


def _pooled(surface_a: Surface, surface_b: Surface, exhaustive: bool):
    fn = directed_distances_bruteforce if exhaustive else directed_distances
    d_ab = fn(surface_samples(surface_a), surface_b)
    d_ba = fn(surface_samples(surface_b), surface_a)
    return d_ab, d_ba


def assd(surface_a: Surface, surface_b: Surface, exhaustive: bool = False) -> float:
    """Average symmetric surface distance (mean of the two directed means)."""
    d_ab, d_ba = _pooled(surface_a, surface_b, exhaustive)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def percentile_hausdorff(d_ab: np.ndarray, d_ba: np.ndarray, q: float = 95.0,
                         pooled: bool = True) -> float:
    """``q``-th percentile Hausdorff distance from directed distance samples.

    ``pooled`` takes the percentile over both directions together; otherwise
    the larger of the two per-direction percentiles.
    """
    if pooled:
        return float(np.percentile(np.concatenate([d_ab, d_ba]), q, method="linear"))
    return float(max(np.percentile(d_ab, q), np.percentile(d_ba, q)))


def hd95(surface_a: Surface, surface_b: Surface, exhaustive: bool = False,
         pooled: bool = True) -> float:
    d_ab, d_ba = _pooled(surface_a, surface_b, exhaustive)
    return percentile_hausdorff(d_ab, d_ba, 95.0, pooled)


def vtx_rmse(pred_frames: np.ndarray, truth_frames: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Root mean squared vertex error over frames and (masked) vertices."""
    pred = np.asarray(pred_frames, dtype=np.float64)
    truth = np.asarray(truth_frames, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty vertex mask")
        pred, truth = pred[..., mask, :], truth[..., mask, :]
    return float(np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=-1))))


def volume_curve(frames: np.ndarray, topology: MeshTopology, chamber,
                 normalized: bool = False) -> np.ndarray:
    vols = np.array([chamber_volume(f, topology, chamber) for f in frames])
    return vols / vols[0] if normalized else vols


def expert_usage_matrix(gates: np.ndarray, phenotypes: Sequence[str],
                        labels: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Fraction of each phenotype's subjects whose strongest gate is expert e."""
    gates = np.asarray(gates, dtype=np.float64)
    if gates.ndim != 2 or len(gates) != len(phenotypes):
        raise ValueError("need one gate vector per subject")
    if not np.allclose(gates.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("gate weights must sum to 1")
    labels = list(labels) if labels is not None else [p for p in PHENOTYPES if p in set(phenotypes)]
    phen = np.asarray(phenotypes)
    winners = gates.argmax(axis=1)
    out = np.zeros((len(labels), gates.shape[1]))
    for i, lab in enumerate(labels):
        sel = phen == lab
        if not sel.any():
            raise ValueError(f"phenotype {lab} has no subjects")
        out[i] = np.bincount(winners[sel], minlength=gates.shape[1]) / sel.sum()
    return out, labels


# -- cohort evaluation -----------------------------------------------------------


@dataclass
class EvaluationReport:
    subjects: list[dict]
    summary: dict
    volume_curves: dict
    usage: dict | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"subjects": self.subjects, "summary": self.summary,
                "volume_curves": self.volume_curves, "usage": self.usage, "config": self.config}


def _subject_metrics(pred: np.ndarray, truth: MeshSequence, pooled: bool):
    topo = truth.topology
    row = {"id": truth.subject_id, "phenotype": truth.phenotype}
    curves = {}
    for ch in CHAMBERS:
        name = ch.name
        a_vals, h_vals = [], []
        for pf, tf in zip(pred, truth.frames):
            sa, sb = chamber_surface(pf, topo, ch), chamber_surface(tf, topo, ch)
            d_ab, d_ba = _pooled(sa, sb, exhaustive=False)
            a_vals.append(0.5 * (d_ab.mean() + d_ba.mean()))
            h_vals.append(percentile_hausdorff(d_ab, d_ba, 95.0, pooled))
        row[f"{name}_assd"] = float(np.mean(a_vals))
        row[f"{name}_hd95"] = float(np.mean(h_vals))
        row[f"{name}_vtx_rmse"] = vtx_rmse(pred, truth.frames, topo.chamber_mask(ch))
        curves[name] = {
            "pred": volume_curve(pred, topo, ch).tolist(),
            "truth": volume_curve(truth.frames, topo, ch).tolist(),
        }
    return row, curves


def evaluate(predictions: dict[str, np.ndarray], truth: Sequence[MeshSequence],
             gates: dict[str, Sequence[float]] | None = None, pooled_hd95: bool = True,
             workers: int | None = None) -> EvaluationReport:
    """Per-subject, per-chamber ASSD / HD95 / vtxRMSE (frame-averaged) plus curves.

    ``predictions`` maps subject id to (T, N, 3) frames. ASSD and HD95 are
    computed per frame and averaged over all frames.
    """
    todo = [t for t in truth if t.subject_id in predictions]
    if not todo:
        raise ValueError("no predictions match the ground-truth subjects")
    workers = workers or int(os.environ.get("REPCM_NUM_WORKERS", "1"))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda t: _subject_metrics(predictions[t.subject_id], t, pooled_hd95), todo))
    rows = [r for r, _ in results]
    curves = {t.subject_id: c for t, (_, c) in zip(todo, results)}
    summary = {}
    for key in rows[0]:
        if key in ("id", "phenotype"):
            continue
        vals = np.array([r[key] for r in rows])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    usage = None
    if gates:
        ids = [t.subject_id for t in todo if t.subject_id in gates]
        g = np.array([gates[i] for i in ids])
        pheno = [next(t.phenotype for t in todo if t.subject_id == i) for i in ids]
        mat, labels = expert_usage_matrix(g, pheno)
        usage = {"phenotypes": labels, "matrix": mat.tolist()}
    return EvaluationReport(rows, summary, curves, usage)


def write_report(report: EvaluationReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "phenotype", "chamber", "assd_mm", "hd95_mm", "vtx_rmse_mm"])
        for r in report.subjects:
            for ch in CHAMBERS:
                n = ch.name
                w.writerow([r["id"], r["phenotype"], n, r[f"{n}_assd"], r[f"{n}_hd95"], r[f"{n}_vtx_rmse"]])
    for sid, curves in report.volume_curves.items():
        with open(out_dir / "curves" / f"{sid}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "LV_pred", "LV_truth", "RV_pred", "RV_truth"])
            for t in range(len(curves["LV"]["pred"])):
                w.writerow([t, curves["LV"]["pred"][t], curves["LV"]["truth"][t],
                            curves["RV"]["pred"][t], curves["RV"]["truth"][t]])
    return out_dir


def plot_report(report: dict, out_dir) -> list[Path]:
    """Volume curves (mean +/- std band), normalised LV curves by phenotype, usage heatmap."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    curves = report["volume_curves"]
    pheno = {r["id"]: r["phenotype"] for r in report["subjects"]}

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, ch in zip(axes, ("LV", "RV")):
        for kind, color in (("truth", "k"), ("pred", "tab:red")):
            arr = np.array([c[ch][kind] for c in curves.values()]) / 1000.0
            m, s = arr.mean(0), arr.std(0)
            ax.plot(m, color=color, label=kind)
            ax.fill_between(np.arange(len(m)), m - s, m + s, color=color, alpha=0.2)
        ax.set_title(f"{ch} volume")
        ax.set_xlabel("frame")
        ax.set_ylabel("mL")
        ax.legend()
    fig.tight_layout()
    written.append(out_dir / "volume_curves.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for lab in PHENOTYPES:
        sel = [c for sid, c in curves.items() if pheno.get(sid) == lab]
        if not sel:
            continue
        arr = np.array([np.array(c["LV"]["pred"]) / c["LV"]["pred"][0] for c in sel])
        ax.plot(arr.mean(0), label=lab)
    ax.set_xlabel("frame")
    ax.set_ylabel("LVV / EDV")
    ax.legend()
    fig.tight_layout()
    written.append(out_dir / "normalized_lv_curves.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    if report.get("usage"):
        mat = np.array(report["usage"]["matrix"])
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(mat, vmin=0, vmax=1, cmap="viridis")
        ax.set_yticks(range(len(mat)), report["usage"]["phenotypes"])
        ax.set_xticks(range(mat.shape[1]), [f"E{e}" for e in range(mat.shape[1])])
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                ax.text(j, i, f"{mat[i, j]:.2f}", ha="center", va="center", color="w")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        written.append(out_dir / "expert_usage.png")
        fig.savefig(written[-1], dpi=120)
        plt.close(fig)
    return written
