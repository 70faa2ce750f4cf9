"""DyMeshVAE: topology-aware attention autoencoder for dynamic meshes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import PaddedBatch, pad_batch
from .mesh import (
    DynamicMesh,
    FpsSelection,
    MeshValidationError,
    TrajectoryDecomposition,
    build_adjacency,
    decompose,
    farthest_point_sampling,
    recompose,
)
from .numerics import (
    FourierEncoding,
    MaskedSelfAttention,
    NumericalError,
    QueryKeyMap,
    SharedMapCrossAttention,
    backward,
    check_finite,
    fourier_encode,
)

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    frames: int = 16
    hidden_dim: int = 512
    latent_channels: int = 32
    encoder_layers: int = 8
    decoder_blocks: int = 8
    tokens: int = 512
    kl_weight: float = 0.001
    pe0_bands: int = 8
    pet_bands: int = 4
    pe_include_input: bool = True
    use_pe0: bool = True
    use_pet: bool = True
    sep_attn: bool = True
    mask_mode: str = "neg-inf"
    fps_mode: str = "embedding"
    attn_norm: bool = True
    lr: float = 1e-4
    # per-step token count drawn from [token_jitter_min, tokens]; 0 keeps it fixed
    token_jitter_min: int = 0

    def __post_init__(self) -> None:
        for name in ("frames", "hidden_dim", "latent_channels", "encoder_layers", "tokens", "pe0_bands", "pet_bands"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.decoder_blocks < 0:
            raise ValueError("decoder_blocks must be >= 0")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.mask_mode not in ("neg-inf", "literal-hadamard", "none"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.fps_mode not in ("embedding", "raw-coords"):
            raise ValueError(f"unknown fps_mode {self.fps_mode!r}")

    @classmethod
    def for_frames(cls, frames: int, **kw) -> VaeConfig:
        """Full-size defaults; 32 latent channels for 16 frames, 64 for 32."""
        return cls(frames=frames, latent_channels=32 if frames <= 16 else 64, **kw)

    @classmethod
    def desk(cls, **kw) -> VaeConfig:
        """Small configuration that trains in minutes on one CPU core."""
        base = dict(
            frames=16, hidden_dim=64, latent_channels=16, encoder_layers=2, decoder_blocks=2,
            tokens=32, pe0_bands=6, pet_bands=2, lr=2e-3,
        )
        base.update(kw)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> VaeConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown VaeConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> VaeConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EncodedMesh:
    v0_full: torch.Tensor
    v0_tokens: torch.Tensor
    mu: torch.Tensor
    log_sigma: torch.Tensor
    fps: FpsSelection

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


@dataclass
class LatentPair:
    v0_tokens: torch.Tensor
    z: torch.Tensor


@dataclass
class EncodedBatch:
    v0_full: torch.Tensor  # (B, N, d)
    v0_tokens: torch.Tensor  # (B, n, d)
    mu: torch.Tensor  # (B, n, C)
    log_sigma: torch.Tensor
    indices: np.ndarray  # (B, n)
    vt_target: torch.Tensor  # (B, N, T*3)

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


@dataclass
class BatchTensors:
    vertices: torch.Tensor  # (B, T, N, 3)
    adj: torch.Tensor  # (B, N, N) bool
    vertex_mask: torch.Tensor  # (B, N) bool
    counts: list[int] = field(default_factory=list)


def batch_tensors(batch: PaddedBatch, dtype=torch.float32) -> BatchTensors:
    B, _, Nmax, _ = batch.vertices.shape
    adj = np.stack([build_adjacency(batch.faces[b], Nmax).dense for b in range(B)])
    counts = [int(c) for c in batch.valid_vertex_count]
    mask = np.arange(Nmax)[None, :] < np.asarray(counts)[:, None]
    return BatchTensors(
        vertices=torch.from_numpy(batch.vertices).to(dtype),
        adj=torch.from_numpy(adj),
        vertex_mask=torch.from_numpy(mask),
        counts=counts,
    )


def flatten_trajectories(vt: torch.Tensor) -> torch.Tensor:
    """(B, T, N, 3) offsets -> (B, N, T*3), frame-major per vertex."""
    B, T, N, _ = vt.shape
    return vt.permute(0, 2, 1, 3).reshape(B, N, T * 3)


def unflatten_trajectories(x: torch.Tensor, frames: int) -> torch.Tensor:
    """(B, N, T*3) -> (B, T, N, 3)."""
    B, N, _ = x.shape
    return x.reshape(B, N, frames, 3).permute(0, 2, 1, 3)


class DyMeshVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        d, C, T = cfg.hidden_dim, cfg.latent_channels, cfg.frames
        self.pe0 = FourierEncoding(cfg.pe0_bands, cfg.pe_include_input)
        self.pet = FourierEncoding(cfg.pet_bands, cfg.pe_include_input)
        self.embed_v0 = nn.Linear(self.pe0.width(3) if cfg.use_pe0 else 3, d)
        self.embed_vt = nn.Linear(self.pet.width(3 * T) if cfg.use_pet else 3 * T, d)
        self.topology_attn = MaskedSelfAttention(d, d, mode=cfg.mask_mode)
        enc_q = d if cfg.sep_attn else 2 * d
        self.encoder = nn.ModuleList(
            SharedMapCrossAttention(enc_q, enc_q, d, d, d, norm=cfg.attn_norm) for _ in range(cfg.encoder_layers)
        )
        self.mu_head = nn.Linear(d, C)
        self.log_sigma_head = nn.Linear(d, C)
        dec_q = d if cfg.sep_attn else d + C
        self.decoder = nn.ModuleList(
            SharedMapCrossAttention(dec_q, dec_q, d, C, d, norm=cfg.attn_norm) for _ in range(cfg.decoder_blocks)
        )
        self.query_map = QueryKeyMap(d, d, d, norm=cfg.attn_norm)
        self.out_head = nn.Linear(C, 3 * T)
        nn.init.zeros_(self.out_head.weight)
        nn.init.zeros_(self.out_head.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.out_head.weight.dtype

    # -- encoder -----------------------------------------------------------

    def shape_features(self, v0: torch.Tensor, adj: torch.Tensor | None, vertex_mask=None) -> torch.Tensor:
        """Topology-aware vertex features from initial positions ``(B, N, 3)``."""
        x = fourier_encode(v0, self.pe0) if self.cfg.use_pe0 else v0
        h0 = self.embed_v0(x)
        return check_finite(self.topology_attn(h0, adj, vertex_mask), "topology attention")

    def trajectory_features(self, vt_flat: torch.Tensor) -> torch.Tensor:
        x = fourier_encode(vt_flat, self.pet) if self.cfg.use_pet else vt_flat
        return self.embed_vt(x)

    def select_tokens(self, v0_full: torch.Tensor, v0: torch.Tensor, counts: list[int], n: int, seed_index: int = 0):
        src = v0_full if self.cfg.fps_mode == "embedding" else v0
        feats = src.detach().cpu().numpy()
        return np.stack(
            [farthest_point_sampling(feats[b, : counts[b]], n, seed_index).indices for b in range(len(counts))]
        )

    def encode_batch(self, bt: BatchTensors, n_tokens: int | None = None, seed_index: int = 0) -> EncodedBatch:
        verts = bt.vertices.to(self.dtype)
        B, T, N, _ = verts.shape
        if T != self.cfg.frames:
            raise MeshValidationError(f"model expects {self.cfg.frames} frames, got {T}")
        n = n_tokens or self.cfg.tokens
        if n < 1 or n > min(bt.counts):
            raise MeshValidationError(f"cannot sample {n} tokens from meshes with {min(bt.counts)} vertices")
        v0 = verts[:, 0]
        vt_flat = flatten_trajectories(verts - v0[:, None])
        v0_full = self.shape_features(v0, bt.adj, bt.vertex_mask)
        h_t = self.trajectory_features(vt_flat)

        idx = self.select_tokens(v0_full, v0, bt.counts, n, seed_index)
        gather = torch.from_numpy(idx)[..., None]
        tokens = torch.gather(v0_full, 1, gather.expand(-1, -1, v0_full.shape[-1]))
        traj_tokens = torch.gather(h_t, 1, gather.expand(-1, -1, h_t.shape[-1]))

        keys = v0_full if self.cfg.sep_attn else torch.cat([v0_full, h_t], -1)
        for layer in self.encoder:
            q = tokens if self.cfg.sep_attn else torch.cat([tokens, traj_tokens], -1)
            tokens, traj_tokens = layer(q, keys, v0_full, h_t, tokens, traj_tokens, bt.vertex_mask)

        mu = self.mu_head(traj_tokens)
        log_sigma = self.log_sigma_head(traj_tokens)
        return EncodedBatch(v0_full, tokens, mu, log_sigma, idx, vt_flat)

    # -- decoder -----------------------------------------------------------

    def decode_batch(self, v0_full: torch.Tensor, v0_tokens: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        tokens, z = v0_tokens, z.to(self.dtype)
        for block in self.decoder:
            q = tokens if self.cfg.sep_attn else torch.cat([tokens, z], -1)
            tokens, z = block(q, q, tokens, z, tokens, z)
        rec = self.query_map(v0_full, tokens, z)
        return check_finite(self.out_head(rec), "decoder output")

    def shape_path(self, bt: BatchTensors, n_tokens: int, seed_index: int = 0):
        """Shape-only encoding (zero trajectories): returns ``(v0_full, v0_tokens, indices)``."""
        v0 = bt.vertices[:, 0].to(self.dtype)
        v0_full = self.shape_features(v0, bt.adj, bt.vertex_mask)
        idx = self.select_tokens(v0_full, v0, bt.counts, n_tokens, seed_index)
        tokens = torch.gather(v0_full, 1, torch.from_numpy(idx)[..., None].expand(-1, -1, v0_full.shape[-1]))
        if self.cfg.sep_attn:
            # with separate maps the shape stream never reads trajectory features
            for layer in self.encoder:
                A = layer.attention_map(tokens, v0_full, bt.vertex_mask)
                tokens = A @ layer.proj_a(v0_full) + tokens
            return v0_full, tokens, idx
        B, N = v0.shape[:2]
        zeros = torch.zeros(B, self.cfg.frames, N, 3, dtype=self.dtype)
        enc = self.encode_batch(
            BatchTensors(zeros + v0[:, None], bt.adj, bt.vertex_mask, bt.counts), n_tokens, seed_index
        )
        return enc.v0_full, enc.v0_tokens, enc.indices


# ---------------------------------------------------------------------------
# Losses


def kl_loss(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """``mean(mu^2 + sigma^2 - log sigma^2) / 2`` over all latent entries."""
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return 0.5 * torch.mean(mu**2 + sigma**2 - torch.log(sigma**2))


def kl_loss_from_log_sigma(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.mean(mu**2 + torch.exp(2 * log_sigma) - 2 * log_sigma)


def rec_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared L2 over the trajectory channels, averaged over vertices."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum(-1).mean()


def masked_rec_loss(pred: torch.Tensor, target: torch.Tensor, vertex_mask: torch.Tensor) -> torch.Tensor:
    """Per-item reconstruction loss over real vertices, averaged over the batch."""
    per_vertex = ((pred - target) ** 2).sum(-1) * vertex_mask.to(pred.dtype)
    per_item = per_vertex.sum(-1) / vertex_mask.sum(-1).to(pred.dtype)
    return per_item.mean()


def _normal(shape, seed: int, dtype) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=torch.float32).to(dtype)


def vae_loss(model: DyMeshVAE, bt: BatchTensors, seed: int, n_tokens: int | None = None) -> dict[str, torch.Tensor]:
    enc = model.encode_batch(bt, n_tokens)
    eps = _normal(enc.mu.shape, seed, enc.mu.dtype)
    z = enc.mu + enc.sigma * eps
    pred = model.decode_batch(enc.v0_full, enc.v0_tokens, z)
    rec = masked_rec_loss(pred, enc.vt_target, bt.vertex_mask)
    kl = kl_loss_from_log_sigma(enc.mu, enc.log_sigma)
    total = rec if model.cfg.kl_weight == 0 else rec + model.cfg.kl_weight * kl
    return {"loss": total, "rec": rec, "kl": kl}


# ---------------------------------------------------------------------------
# Single-mesh API


def mesh_batch(mesh: DynamicMesh) -> BatchTensors:
    return batch_tensors(pad_batch([mesh]))


def default_token_count(cfg: VaeConfig, num_vertices: int) -> int:
    """Inference token count: ``min(tokens, N // 8)``, at least one."""
    return max(1, min(cfg.tokens, num_vertices // 8))


@torch.no_grad()
def encode(model: DyMeshVAE, mesh: DynamicMesh, n_tokens: int | None = None, seed_index: int = 0) -> EncodedMesh:
    mesh.validate()
    n = n_tokens or default_token_count(model.cfg, mesh.num_vertices)
    enc = model.encode_batch(mesh_batch(mesh), n, seed_index)
    return EncodedMesh(
        v0_full=enc.v0_full[0],
        v0_tokens=enc.v0_tokens[0],
        mu=enc.mu[0],
        log_sigma=enc.log_sigma[0],
        fps=FpsSelection(enc.indices[0], seed_index),
    )


def sample_latent(enc: EncodedMesh, rng_seed: int) -> LatentPair:
    eps = _normal(enc.mu.shape, rng_seed, enc.mu.dtype)
    return LatentPair(enc.v0_tokens, enc.mu + enc.sigma * eps)


@torch.no_grad()
def decode(model: DyMeshVAE, v0_full: torch.Tensor, pair: LatentPair) -> torch.Tensor:
    return model.decode_batch(v0_full[None], pair.v0_tokens[None], pair.z[None])[0]


def offsets_to_mesh(v0: np.ndarray, vt_flat: np.ndarray, frames: int, faces: np.ndarray, caption=None) -> DynamicMesh:
    """Recompose decoded offsets onto ``v0``; frame-0 offsets are pinned to zero."""
    vt = vt_flat.reshape(-1, frames, 3).transpose(1, 0, 2).astype(np.float32)
    vt[0] = 0.0
    verts = recompose(TrajectoryDecomposition(v0=v0.astype(np.float32), vt=vt))
    return DynamicMesh(faces.copy(), verts, caption)


@torch.no_grad()
def reconstruct(
    model: DyMeshVAE,
    mesh: DynamicMesh,
    mode: str = "posterior-mean",
    rng_seed: int = 0,
    n_tokens: int | None = None,
) -> DynamicMesh:
    if mode not in ("posterior-mean", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    enc = encode(model, mesh, n_tokens)
    pair = LatentPair(enc.v0_tokens, enc.mu) if mode == "posterior-mean" else sample_latent(enc, rng_seed)
    out = decode(model, enc.v0_full, pair).numpy()
    return offsets_to_mesh(decompose(mesh).v0, out, model.cfg.frames, mesh.faces, mesh.caption)


# ---------------------------------------------------------------------------
# Training


def step_seed(seed: int, step: int, stream: int) -> int:
    """Independent 63-bit seed for (run seed, step, named stream)."""
    return int(np.random.SeedSequence([seed, stream, step]).generate_state(1, np.uint64)[0] >> 1)


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def vae_train_step(
    model: DyMeshVAE,
    optimizer: torch.optim.Optimizer,
    batch: PaddedBatch | BatchTensors,
    noise_seed: int,
    n_tokens: int | None = None,
) -> dict[str, float]:
    bt = batch if isinstance(batch, BatchTensors) else batch_tensors(batch, model.dtype)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = vae_loss(model, bt, noise_seed, n_tokens)
    if not torch.isfinite(losses["loss"]):
        raise NumericalError(
            f"VAE loss is {losses['loss'].item()} (rec={losses['rec'].item()}, kl={losses['kl'].item()})"
        )
    backward(losses["loss"])
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


@dataclass
class TrainState:
    step: int = 0
    history: list[dict] = field(default_factory=list)


def train_vae(
    model: DyMeshVAE,
    meshes: list[DynamicMesh],
    steps: int,
    seed: int = 0,
    batch_size: int = 8,
    optimizer: torch.optim.Optimizer | None = None,
    state: TrainState | None = None,
    callback=None,
) -> TrainState:
    """Run ``steps`` optimizer updates; randomness is a pure function of (seed, step)."""
    optimizer = optimizer or make_optimizer(model, model.cfg.lr)
    state = state or TrainState()
    batches = {}
    for _ in range(steps):
        k = state.step
        rng = np.random.default_rng(step_seed(seed, k, 0))
        if batch_size >= len(meshes):
            order = tuple(range(len(meshes)))
        else:
            order = tuple(sorted(rng.choice(len(meshes), size=batch_size, replace=False)))
        if order not in batches:
            batches[order] = batch_tensors(pad_batch([meshes[i] for i in order]), model.dtype)
        bt = batches[order]
        n = min(model.cfg.tokens, min(bt.counts))
        if model.cfg.token_jitter_min:
            n = int(rng.integers(min(model.cfg.token_jitter_min, n), n + 1))
        report = vae_train_step(model, optimizer, bt, step_seed(seed, k, 1), n)
        report["step"] = k
        report["tokens"] = n
        state.history.append(report)
        state.step += 1
        if callback is not None:
            callback(report)
    return state


# ---------------------------------------------------------------------------
# Persistence


def model_tensors(model: nn.Module, optimizer: torch.optim.Optimizer | None = None, prefix="model/") -> dict:
    out = {prefix + k: v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                out[f"optim/{n}/exp_avg"] = st["exp_avg"]
                out[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
                out[f"optim/{n}/step"] = np.asarray([float(st["step"])], dtype=np.float64)
    return out


def load_model_tensors(model: nn.Module, tensors: dict, optimizer: torch.optim.Optimizer | None = None, prefix="model/"):
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(prefix)}
    model.load_state_dict(state)
    if optimizer is None:
        return
    params = dict(model.named_parameters())
    for n, p in params.items():
        key = f"optim/{n}/exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"optim/{n}/step"][0])),
            "exp_avg": torch.from_numpy(np.array(tensors[key])),
            "exp_avg_sq": torch.from_numpy(np.array(tensors[f"optim/{n}/exp_avg_sq"])),
        }


def save_vae(path, model: DyMeshVAE, optimizer=None, extra_meta: dict | None = None) -> None:
    from .numerics import save_checkpoint

    meta = {"kind": "dymesh-vae", "config": asdict(model.cfg)}
    meta.update(extra_meta or {})
    save_checkpoint(path, model_tensors(model, optimizer), meta)


def load_vae(path, with_optimizer: bool = False):
    from .numerics import load_checkpoint

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "dymesh-vae":
        raise ValueError(f"{path} is not a VAE checkpoint")
    model = DyMeshVAE(VaeConfig.from_dict(meta["config"]))
    opt = make_optimizer(model, model.cfg.lr) if with_optimizer else None
    load_model_tensors(model, tensors, opt)
    model.eval()
    return (model, opt, meta) if with_optimizer else model


def with_flags(cfg: VaeConfig, **changes) -> VaeConfig:
    return replace(cfg, **changes)
