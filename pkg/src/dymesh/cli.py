"""Command-line entry points.

Exit codes: 0 success, 2 input error, 3 missing artifact, 4 numerical failure.
Every command writes a ``run.json`` next to its outputs recording the
arguments, resolved configuration and seed needed to re-run it.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .data import (
    DmbError,
    compute_stats,
    dmb_encode,
    dmb_read,
    dmb_write,
    load_corpus,
    load_stats,
    process_animation,
    read_caption_sidecar,
    save_stats,
)
from .mesh import DynamicMesh, MeshValidationError
from .numerics import CheckpointError, NumericalError
from .synthetic import generate, parse_generator_spec
from .text import ArchiveTextEncoder, MissingEmbeddingError, StubTextEncoder, archive_import

EXIT_INPUT = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

INIT_STREAM = 4

log = logging.getLogger("dymesh")


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _configure_logging() -> None:
    level = os.environ.get("DYMESH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_manifest(out: Path, command: str, params: dict, extra: dict | None = None) -> None:
    record = {"command": command, "version": __version__, "params": params}
    record.update(extra or {})
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliFailure(EXIT_INPUT, f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliFailure(EXIT_INPUT, f"config file {path} is not valid JSON: {exc}")


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliFailure(EXIT_MISSING, f"missing {what}: {p}")
    return p


def common_options(fn):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config.")
    @click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
    @click.option("--threads", type=click.IntRange(1), default=None, help="Cap on torch worker threads.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, threads, out_dir, **kw):
        if threads:
            torch.set_num_threads(threads)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        try:
            return fn(config=_read_config(config_path), seed=seed, out=out, **kw)
        except CliFailure as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Dynamic mesh autoencoder and text-to-trajectory tools."""
    _configure_logging()


# ---------------------------------------------------------------------------
# dataset-build


def _load_sources(src_dir: str | None, synthetic: tuple[str, ...], seed: int) -> list[tuple[str, DynamicMesh]]:
    sources = []
    if src_dir is not None:
        root = Path(src_dir)
        if not root.is_dir():
            raise CliFailure(EXIT_INPUT, f"source directory not found: {root}")
        for p in sorted(root.glob("*.dmb")):
            try:
                mesh = dmb_read(p)
            except (DmbError, OSError) as exc:
                raise CliFailure(EXIT_INPUT, f"unreadable source {p.name}: {exc}")
            side = read_caption_sidecar(p)
            if side is not None:
                mesh.caption = side
            sources.append((p.stem, mesh))
    for spec in synthetic:
        try:
            kind, count, frames = parse_generator_spec(spec)
            meshes = generate(kind, count, frames, seed)
        except (KeyError, ValueError) as exc:
            raise CliFailure(EXIT_INPUT, f"bad generator spec {spec!r}: {exc}")
        sources.extend((f"{kind}-{i:03d}", m) for i, m in enumerate(meshes))
    return sources


@main.command("dataset-build")
@click.argument("src_dir", required=False, type=click.Path())
@click.option("--synthetic", multiple=True, help="Generator spec kind:count:frames (repeatable).")
@click.option("--window", type=click.Choice(["16", "32"]), default=None, help="Window length (default 16).")
@click.option("--merge-tol", type=float, default=None, help="Duplicate-vertex tolerance (default 0).")
@common_options
def dataset_build(src_dir, synthetic, window, merge_tol, config, seed, out):
    """Merge, slice, normalize and filter animations into training windows."""
    window = int(window or config.get("window", 16))
    merge_tol = float(merge_tol if merge_tol is not None else config.get("merge_tol", 0.0))
    synthetic = tuple(synthetic) or tuple(config.get("synthetic", ()))
    sources = _load_sources(src_dir, synthetic, seed)
    if not sources:
        raise CliFailure(EXIT_INPUT, "no input sequences")

    records, counts = [], Counter()
    for name, anim in sources:
        try:
            produced = list(process_animation(name, anim, window, merge_tol))
        except MeshValidationError as exc:
            raise CliFailure(EXIT_INPUT, f"invalid source {name}: {exc}")
        for rec, mesh in produced:
            records.append(rec)
            counts[rec.reject_reason or "kept"] += 1
            if mesh is not None:
                dmb_write(out / rec.path, mesh)
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(r.to_json() + "\n" for r in records))
    _write_run_manifest(
        out,
        "dataset-build",
        {"src_dir": src_dir, "synthetic": list(synthetic), "window": window, "merge_tol": merge_tol, "seed": seed},
        {"manifest_sha256": _sha256(manifest)},
    )
    click.echo(f"windows: {len(records)}")
    click.echo(f"kept: {counts.pop('kept', 0)}")
    for reason in sorted(counts):
        click.echo(f"rejected {reason}: {counts[reason]}")


# ---------------------------------------------------------------------------
# training


def _load_training_corpus(corpus: str) -> list[DynamicMesh]:
    root = Path(corpus)
    if not root.is_dir():
        raise CliFailure(EXIT_INPUT, f"corpus directory not found: {root}")
    try:
        meshes = load_corpus(root)
    except DmbError as exc:
        raise CliFailure(EXIT_INPUT, f"unreadable corpus file: {exc}")
    if not meshes:
        raise CliFailure(EXIT_INPUT, "no input sequences")
    return meshes


class _LossLog:
    """Loss CSV, one row per step; appended to when resuming."""

    def __init__(self, path: Path, columns: list[str], append: bool):
        self.columns = columns
        fresh = not (append and path.exists())
        self.fh = path.open("w" if fresh else "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=columns, extrasaction="ignore")
        if fresh:
            self.writer.writeheader()

    def __call__(self, report: dict) -> None:
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in report.items()})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _split_train_config(config: dict, steps, batch_size):
    """Separate run options from model fields; ``preset`` is "desk" (default) or "full"."""
    cfg = dict(config)
    steps = steps or cfg.pop("steps", 200)
    batch_size = batch_size or cfg.pop("batch_size", 8)
    cfg.pop("steps", None)
    cfg.pop("batch_size", None)
    preset = cfg.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise CliFailure(EXIT_INPUT, f"unknown preset {preset!r}")
    return cfg, int(steps), int(batch_size), preset


def _train_loop(run_steps, save, total_steps: int, save_every: int, start: int) -> None:
    """Run in chunks, checkpointing between them so a NaN leaves the last good state on disk."""
    done = start
    if start == 0:
        save(0)
    while done < total_steps:
        chunk = min(save_every, total_steps - done)
        run_steps(chunk)
        done += chunk
        save(done)


@main.command("train-vae")
@click.option("--corpus", required=True, type=click.Path(), help="Directory of training .dmb windows.")
@click.option("--steps", type=click.IntRange(1), default=None, help="Total optimizer steps (default 200).")
@click.option("--batch-size", type=click.IntRange(1), default=None)
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint to continue from.")
@click.option("--save-every", type=click.IntRange(1), default=50, show_default=True)
@common_options
def train_vae_cmd(corpus, steps, batch_size, resume, save_every, config, seed, out):
    """Train the dynamic mesh VAE."""
    from .vae import DyMeshVAE, TrainState, VaeConfig, load_vae, make_optimizer, save_vae, step_seed, train_vae

    cfg_dict, steps, batch_size, preset = _split_train_config(config, steps, batch_size)
    meshes = _load_training_corpus(corpus)

    if resume:
        try:
            model, opt, meta = load_vae(_require(resume, "checkpoint"), with_optimizer=True)
        except (CheckpointError, ValueError) as exc:
            raise CliFailure(EXIT_INPUT, f"cannot resume from {resume}: {exc}")
        start = int(meta.get("step", 0))
        seed = int(meta.get("seed", seed))
    else:
        try:
            cfg = VaeConfig.desk(**cfg_dict) if preset == "desk" else VaeConfig.from_dict(cfg_dict)
        except (TypeError, ValueError) as exc:
            raise CliFailure(EXIT_INPUT, f"invalid VAE config: {exc}")
        torch.manual_seed(step_seed(seed, 0, INIT_STREAM))
        model = DyMeshVAE(cfg)
        opt = make_optimizer(model, cfg.lr)
        start = 0
    bad = [m.num_frames for m in meshes if m.num_frames != model.cfg.frames]
    if bad:
        raise CliFailure(EXIT_INPUT, f"corpus windows have {bad[0]} frames, model expects {model.cfg.frames}")

    ckpt = out / "vae.ckpt"
    params = {"corpus": corpus, "steps": steps, "batch_size": batch_size, "seed": seed, "resume": resume, "preset": preset}
    state = TrainState(step=start)
    losses = _LossLog(out / "vae_loss.csv", ["step", "loss", "rec", "kl", "tokens"], append=bool(resume))

    def save(step):
        save_vae(ckpt, model, opt, {"step": step, "seed": seed})

    try:
        _train_loop(
            lambda k: train_vae(model, meshes, k, seed, batch_size, opt, state, losses),
            save, steps, save_every, start,
        )
    finally:
        losses.close()
    _write_run_manifest(
        out, "train-vae", params, {"config": asdict(model.cfg), "checkpoint_sha256": _sha256(ckpt), "step": state.step}
    )
    click.echo(f"trained to step {state.step}; final loss {state.history[-1]['loss']:.6g}" if state.history else "")


def _load_vae_checkpoint(path):
    from .vae import load_vae

    try:
        return load_vae(_require(path, "VAE checkpoint"))
    except (CheckpointError, ValueError) as exc:
        raise CliFailure(EXIT_INPUT, f"bad VAE checkpoint {path}: {exc}")


@main.command("compute-stats")
@click.option("--corpus", required=True, type=click.Path())
@click.option("--vae", "vae_path", required=True, type=click.Path())
@click.option("--tokens", type=click.IntRange(1), default=None, help="Tokens per mesh (default: VAE token count).")
@common_options
def compute_stats_cmd(corpus, vae_path, tokens, config, seed, out):
    """Per-channel normalization statistics of shape tokens and trajectory latents."""
    vae = _load_vae_checkpoint(vae_path)
    meshes = _load_training_corpus(corpus)
    tokens = tokens or config.get("tokens")
    stats = compute_stats(meshes, vae, tokens)
    path = out / "stats.dyst"
    save_stats(path, stats)
    _write_run_manifest(
        out, "compute-stats",
        {"corpus": corpus, "vae": vae_path, "tokens": tokens, "seed": seed},
        {"vae_sha256": _sha256(vae_path), "stats_sha256": _sha256(path)},
    )
    click.echo(f"wrote {path}")


def _text_provider(embeddings: str | None, dim: int):
    if embeddings is None:
        return StubTextEncoder(dim)
    try:
        return ArchiveTextEncoder(_require(embeddings, "embedding archive"))
    except ValueError as exc:
        raise CliFailure(EXIT_INPUT, f"bad embedding archive {embeddings}: {exc}")


def _embed(provider, prompt: str):
    try:
        return provider.embed(prompt)
    except MissingEmbeddingError as exc:
        raise CliFailure(EXIT_MISSING, str(exc.args[0]))


@main.command("train-flow")
@click.option("--corpus", required=True, type=click.Path())
@click.option("--vae", "vae_path", required=True, type=click.Path())
@click.option("--stats", "stats_path", required=True, type=click.Path())
@click.option("--embeddings", type=click.Path(), default=None, help="Embedding archive (default: hashed stub).")
@click.option("--steps", type=click.IntRange(1), default=None, help="Total optimizer steps (default 200).")
@click.option("--batch-size", type=click.IntRange(1), default=None)
@click.option("--resume", type=click.Path(), default=None)
@click.option("--save-every", type=click.IntRange(1), default=50, show_default=True)
@common_options
def train_flow_cmd(corpus, vae_path, stats_path, embeddings, steps, batch_size, resume, save_every, config, seed, out):
    """Train the text-to-trajectory flow model on VAE latents."""
    from .flow import (
        ConfigurationError,
        FlowConfig,
        FlowTrainState,
        TrajectoryFlowModel,
        flow_items,
        load_flow,
        make_flow_optimizer,
        save_flow,
        train_flow,
    )
    from .vae import step_seed

    cfg_dict, steps, batch_size, preset = _split_train_config(config, steps, batch_size)
    vae = _load_vae_checkpoint(vae_path)
    stats = load_stats(_require(stats_path, "stats file"))
    meshes = _load_training_corpus(corpus)

    if resume:
        try:
            model, opt, meta = load_flow(_require(resume, "checkpoint"), with_optimizer=True)
        except (CheckpointError, ValueError) as exc:
            raise CliFailure(EXIT_INPUT, f"cannot resume from {resume}: {exc}")
        start = int(meta.get("step", 0))
        seed = int(meta.get("seed", seed))
    else:
        try:
            base = dict(shape_dim=vae.cfg.hidden_dim, latent_channels=vae.cfg.latent_channels)
            base.update(cfg_dict)
            cfg = FlowConfig.desk(**base) if preset == "desk" else FlowConfig.from_dict(base)
        except (TypeError, ValueError) as exc:
            raise CliFailure(EXIT_INPUT, f"invalid flow config: {exc}")
        torch.manual_seed(step_seed(seed, 0, INIT_STREAM))
        model = TrajectoryFlowModel(cfg)
        try:
            model.set_stats(stats)
        except ConfigurationError as exc:
            raise CliFailure(EXIT_INPUT, str(exc))
        opt = make_flow_optimizer(model, cfg.lr)
        start = 0
    if model.cfg.shape_dim != vae.cfg.hidden_dim or model.cfg.latent_channels != vae.cfg.latent_channels:
        raise CliFailure(EXIT_INPUT, "flow config widths do not match the VAE")

    provider = _text_provider(embeddings, model.cfg.text_dim)
    texts = [_embed(provider, m.caption or "") for m in meshes]
    uncond = _embed(provider, "")
    n_tokens = model.cfg.tokens or vae.cfg.tokens
    items = flow_items(vae, meshes, texts, n_tokens)

    ckpt = out / "flow.ckpt"
    state = FlowTrainState(step=start)
    losses = _LossLog(out / "flow_loss.csv", ["step", "loss", "dropped"], append=bool(resume))

    def save(step):
        save_flow(ckpt, model, opt, {"step": step, "seed": seed})

    try:
        _train_loop(
            lambda k: train_flow(model, items, uncond, k, seed, batch_size, opt, state, losses),
            save, steps, save_every, start,
        )
    finally:
        losses.close()
    _write_run_manifest(
        out, "train-flow",
        {"corpus": corpus, "vae": vae_path, "stats": stats_path, "embeddings": embeddings, "steps": steps,
         "batch_size": batch_size, "seed": seed, "resume": resume},
        {"config": asdict(model.cfg), "checkpoint_sha256": _sha256(ckpt), "vae_sha256": _sha256(vae_path),
         "step": state.step},
    )
    click.echo(f"trained to step {state.step}; final loss {state.history[-1]['loss']:.6g}" if state.history else "")


# ---------------------------------------------------------------------------
# animate


def write_obj(path: Path, positions: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in positions.astype(np.float32).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces.tolist()]
    path.write_text("\n".join(lines) + "\n")


@main.command("animate")
@click.option("--mesh", "mesh_path", required=True, type=click.Path(), help="Input .dmb (first frame is used).")
@click.option("--prompt", required=True)
@click.option("--vae", "vae_path", required=True, type=click.Path())
@click.option("--flow", "flow_path", required=True, type=click.Path())
@click.option("--embeddings", type=click.Path(), default=None)
@click.option("--cfg-scale", type=float, default=None)
@click.option("--sample-steps", type=click.IntRange(1), default=None)
@click.option("--tokens", type=click.IntRange(1), default=None)
@common_options
def animate_cmd(mesh_path, prompt, vae_path, flow_path, embeddings, cfg_scale, sample_steps, tokens, config, seed, out):
    """Animate a static mesh from a text prompt; writes a .dmb and per-frame OBJ files."""
    from .flow import animate, load_flow

    cfg_scale = cfg_scale if cfg_scale is not None else config.get("cfg_scale")
    sample_steps = sample_steps or config.get("sample_steps")
    tokens = tokens or config.get("tokens")
    vae = _load_vae_checkpoint(vae_path)
    try:
        flow = load_flow(_require(flow_path, "flow checkpoint"))
    except (CheckpointError, ValueError) as exc:
        raise CliFailure(EXIT_INPUT, f"bad flow checkpoint {flow_path}: {exc}")
    try:
        mesh = dmb_read(_require(mesh_path, "input mesh"))
    except DmbError as exc:
        raise CliFailure(EXIT_INPUT, f"unreadable mesh {mesh_path}: {exc}")
    provider = _text_provider(embeddings, flow.cfg.text_dim)
    text, uncond = _embed(provider, prompt), _embed(provider, "")
    try:
        result = animate(mesh, text, uncond, vae, flow, seed, tokens, cfg_scale, sample_steps)
    except MeshValidationError as exc:
        raise CliFailure(EXIT_INPUT, f"cannot animate {mesh_path}: {exc}")

    dmb_path = out / "animation.dmb"
    dmb_path.write_bytes(dmb_encode(result))
    for k in range(result.num_frames):
        write_obj(out / f"frame_{k:04d}.obj", result.vertices[k], result.faces)
    _write_run_manifest(
        out, "animate",
        {"mesh": mesh_path, "prompt": prompt, "vae": vae_path, "flow": flow_path, "embeddings": embeddings,
         "cfg_scale": cfg_scale, "sample_steps": sample_steps, "tokens": tokens, "seed": seed},
        {"vae_sha256": _sha256(vae_path), "flow_sha256": _sha256(flow_path), "output_sha256": _sha256(dmb_path)},
    )
    click.echo(f"wrote {dmb_path} and {result.num_frames} OBJ frames")


# ---------------------------------------------------------------------------
# embed-import


@main.command("embed-import")
@click.option("--archive", required=True, type=click.Path(dir_okay=False))
@click.option("--prompt", required=True)
@click.option("--matrix", required=True, type=click.Path(dir_okay=False), help=".npy file holding an S x d matrix.")
def embed_import_cmd(archive, prompt, matrix):
    """Add an externally computed prompt embedding to an archive."""
    try:
        mat = np.load(_require(matrix, "matrix file"))
        archive_import(archive, prompt, mat)
    except CliFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT)
    click.echo(f"imported {mat.shape[0]}x{mat.shape[1]} embedding into {archive}")


if __name__ == "__main__":
    main()
