"""Reconstruction metrics, FPS-ratio sweeps and component ablations."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

import numpy as np
import torch

from .mesh import DynamicMesh
from .vae import DyMeshVAE, VaeConfig, make_optimizer, reconstruct, train_vae


def _check_shapes(pred: DynamicMesh, gt: DynamicMesh) -> None:
    if pred.vertices.shape != gt.vertices.shape:
        raise ValueError(f"shape mismatch {pred.vertices.shape} vs {gt.vertices.shape}")


def reconstruction_error(pred: DynamicMesh, gt: DynamicMesh) -> float:
    """Frame-wise average L2: mean over frames of the mean per-vertex distance."""
    _check_shapes(pred, gt)
    d = np.linalg.norm(pred.vertices.astype(np.float64) - gt.vertices.astype(np.float64), axis=-1)
    return float(d.mean(axis=1).mean())


def l2_sum_error(pred: DynamicMesh, gt: DynamicMesh) -> float:
    """Per-instance L2 sum: per-vertex distances summed over vertices, averaged over frames."""
    _check_shapes(pred, gt)
    d = np.linalg.norm(pred.vertices.astype(np.float64) - gt.vertices.astype(np.float64), axis=-1)
    return float(d.sum(axis=1).mean())


SWEEP_RATIOS = (Fraction(1, 32), Fraction(1, 16), Fraction(1, 8), Fraction(1, 4))


@dataclass
class SweepRow:
    mesh: int
    num_vertices: int
    ratio: str
    tokens: int
    frame_avg_l2: float
    l2_sum: float


def fps_ratio_sweep(model: DyMeshVAE, meshes: list[DynamicMesh], ratios=SWEEP_RATIOS):
    """Reconstruct each mesh with ``floor(ratio * N)`` tokens.

    Returns ``(rows, skipped)`` where ``skipped`` lists ``(mesh, ratio)`` pairs
    whose token count would be zero.
    """
    rows, skipped = [], []
    model.eval()
    for i, mesh in enumerate(meshes):
        for r in ratios:
            r = Fraction(r)
            n = int(r * mesh.num_vertices)
            if n < 1:
                skipped.append((i, str(r)))
                continue
            rec = reconstruct(model, mesh, n_tokens=n)
            rows.append(SweepRow(i, mesh.num_vertices, str(r), n, reconstruction_error(rec, mesh), l2_sum_error(rec, mesh)))
    return rows, skipped


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mesh", "num_vertices", "ratio", "tokens", "frame_avg_l2", "l2_sum"])
    for r in rows:
        w.writerow([r.mesh, r.num_vertices, r.ratio, r.tokens, f"{r.frame_avg_l2:.6g}", f"{r.l2_sum:.6g}"])
    return buf.getvalue()


@dataclass(frozen=True)
class AblationFlags:
    use_adj: bool = True
    use_pe0: bool = True
    use_pet: bool = True
    sep_attn: bool = True
    emb_fps: bool = True

    def apply(self, cfg: VaeConfig) -> VaeConfig:
        return replace(
            cfg,
            mask_mode=cfg.mask_mode if self.use_adj else "none",
            use_pe0=self.use_pe0,
            use_pet=self.use_pet,
            sep_attn=self.sep_attn,
            fps_mode="embedding" if self.emb_fps else "raw-coords",
        )

    def label(self) -> str:
        off = [k for k, v in asdict(self).items() if not v]
        return "full" if not off else "no-" + "-".join(off)


# one component disabled per row, then everything on
ABLATION_TABLE = (
    AblationFlags(use_adj=False),
    AblationFlags(use_pe0=False),
    AblationFlags(use_pet=False),
    AblationFlags(sep_attn=False),
    AblationFlags(emb_fps=False),
    AblationFlags(),
)


def params_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def ablation_run(
    flags: AblationFlags,
    corpus: list[DynamicMesh],
    base: VaeConfig,
    steps: int,
    seed: int = 0,
    eval_tokens: int | None = None,
) -> dict:
    """Train a VAE with ``flags`` applied to ``base`` and report training-set error."""
    cfg = flags.apply(base)
    torch.manual_seed(seed)
    model = DyMeshVAE(cfg)
    state = train_vae(model, corpus, steps, seed=seed, optimizer=make_optimizer(model, cfg.lr))
    model.eval()
    frame_avg, l2_sum = [], []
    for mesh in corpus:
        rec = reconstruct(model, mesh, n_tokens=eval_tokens or min(cfg.tokens, mesh.num_vertices))
        frame_avg.append(reconstruction_error(rec, mesh))
        l2_sum.append(l2_sum_error(rec, mesh))
    return {
        "flags": asdict(flags),
        "label": flags.label(),
        "config": asdict(cfg),
        "seed": seed,
        "steps": steps,
        "final_train_loss": state.history[-1]["loss"],
        "frame_avg_l2": float(np.mean(frame_avg)),
        "l2_sum": float(np.mean(l2_sum)),
        "checkpoint_sha256": params_digest(model),
    }


def ablation_manifest(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)
