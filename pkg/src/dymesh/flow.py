"""Shape-guided text-to-trajectory rectified flow.

Joint-attention transformer over trajectory tokens and text tokens, with
separate timestep-conditioned AdaLN modulation per stream.  Trained to
predict ``z - eps`` on ``(1 - t) z + t eps``; sampled with Euler steps from
t = 1 down to t = 0 under classifier-free guidance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CorpusStats
from .mesh import DynamicMesh, decompose
from .numerics import NumericalError, backward, check_finite, multi_head_attention
from .text import TextEmbedding
from .vae import DyMeshVAE, default_token_count, mesh_batch, offsets_to_mesh, step_seed


class ConfigurationError(RuntimeError):
    pass


@dataclass
class FlowConfig:
    blocks: int = 12
    heads: int = 8
    model_dim: int = 512
    cfg_scale: float = 3.0
    sample_steps: int = 64
    cond_drop_prob: float = 0.1
    lr: float = 2e-4
    mlp_ratio: float = 4.0
    shape_dim: int = 512
    latent_channels: int = 32
    text_dim: int = 768
    time_freq_dim: int = 256
    # latent tokens per mesh; 0 means min(vae tokens, N // 8)
    tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("blocks", "heads", "model_dim", "sample_steps", "shape_dim", "latent_channels", "text_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError("cond_drop_prob must be in [0, 1)")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @classmethod
    def desk(cls, **kw) -> FlowConfig:
        base = dict(
            blocks=2, heads=4, model_dim=64, shape_dim=64, latent_channels=16, text_dim=64,
            time_freq_dim=64, lr=1e-3, tokens=16,
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> FlowConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown FlowConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> FlowConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Noising


def timestep_warp(u):
    """``t = 1 - 1 / (tan(pi u / 2) + 1)`` for ``u`` in [0, 1)."""
    if isinstance(u, torch.Tensor):
        if torch.any((u < 0) | (u >= 1)):
            raise ValueError("u must lie in [0, 1)")
        return 1 - 1 / (torch.tan(math.pi * u / 2) + 1)
    if not 0 <= u < 1:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    return 1 - 1 / (math.tan(math.pi * u / 2) + 1)


@dataclass
class NoisySample:
    z_tilde: torch.Tensor
    t: float
    epsilon: torch.Tensor


def noise_latent(z: torch.Tensor, u: float, rng_seed: int) -> NoisySample:
    g = torch.Generator().manual_seed(int(rng_seed))
    eps = torch.randn(z.shape, generator=g, dtype=torch.float32).to(z.dtype)
    t = timestep_warp(u)
    return NoisySample((1 - t) * z + t * eps, t, eps)


def velocity_target(sample: NoisySample, z: torch.Tensor) -> torch.Tensor:
    return z - sample.epsilon


# ---------------------------------------------------------------------------
# Network


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.freq_dim))


def _mlp(dim: int, ratio: float) -> nn.Sequential:
    hidden = int(dim * ratio)
    return nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))


class StreamModulation(nn.Module):
    """AdaLN-Zero parameters for one modality: shift/scale/gate for attention and MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.lin = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.lin.weight)
        nn.init.zeros_(self.lin.bias)

    def forward(self, temb):
        return self.lin(F.silu(temb)).chunk(6, dim=-1)


class JointBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.mod_x = StreamModulation(dim)
        self.mod_c = StreamModulation(dim)
        self.norm_x1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm_c1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm_x2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm_c2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv_x = nn.Linear(dim, 3 * dim)
        self.qkv_c = nn.Linear(dim, 3 * dim)
        self.out_x = nn.Linear(dim, dim)
        self.out_c = nn.Linear(dim, dim)
        self.mlp_x = _mlp(dim, mlp_ratio)
        self.mlp_c = _mlp(dim, mlp_ratio)

    def forward(self, x, c, temb, text_mask):
        sx1, cx1, gx1, sx2, cx2, gx2 = self.mod_x(temb)
        sc1, cc1, gc1, sc2, cc2, gc2 = self.mod_c(temb)
        qx, kx, vx = self.qkv_x(modulate(self.norm_x1(x), sx1, cx1)).chunk(3, -1)
        qc, kc, vc = self.qkv_c(modulate(self.norm_c1(c), sc1, cc1)).chunk(3, -1)
        n = x.shape[1]
        key_mask = torch.cat([torch.ones(x.shape[:2], dtype=torch.bool), text_mask], dim=1)
        o = multi_head_attention(
            torch.cat([qx, qc], 1), torch.cat([kx, kc], 1), torch.cat([vx, vc], 1), self.heads, key_mask
        )
        x = x + gx1.unsqueeze(1) * self.out_x(o[:, :n])
        c = c + gc1.unsqueeze(1) * self.out_c(o[:, n:])
        x = x + gx2.unsqueeze(1) * self.mlp_x(modulate(self.norm_x2(x), sx2, cx2))
        c = c + gc2.unsqueeze(1) * self.mlp_c(modulate(self.norm_c2(c), sc2, cc2))
        return x, c


class TrajectoryFlowModel(nn.Module):
    def __init__(self, cfg: FlowConfig, stats: CorpusStats | None = None):
        super().__init__()
        self.cfg = cfg
        D = cfg.model_dim
        self.in_proj = nn.Linear(cfg.shape_dim + cfg.latent_channels, D)
        self.text_proj = nn.Linear(cfg.text_dim, D)
        self.t_embed = TimestepEmbedder(D, cfg.time_freq_dim)
        self.blocks = nn.ModuleList(JointBlock(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_mod = nn.Linear(D, 2 * D)
        self.out = nn.Linear(D, cfg.latent_channels)
        for lin in (self.final_mod, self.out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("mu0", torch.zeros(cfg.shape_dim))
        self.register_buffer("sigma0", torch.ones(cfg.shape_dim))
        self.register_buffer("muT", torch.zeros(cfg.latent_channels))
        self.register_buffer("sigmaT", torch.ones(cfg.latent_channels))
        self.register_buffer("stats_loaded", torch.zeros(1))
        if stats is not None:
            self.set_stats(stats)

    def set_stats(self, stats: CorpusStats) -> None:
        if stats.mu0.shape != (self.cfg.shape_dim,) or stats.muT.shape != (self.cfg.latent_channels,):
            raise ConfigurationError("corpus stats do not match the model's channel widths")
        self.mu0.copy_(torch.from_numpy(stats.mu0))
        self.sigma0.copy_(torch.from_numpy(stats.sigma0))
        self.muT.copy_(torch.from_numpy(stats.muT))
        self.sigmaT.copy_(torch.from_numpy(stats.sigmaT))
        self.stats_loaded.fill_(1)

    def forward(self, z_tilde, v0_tokens, text, text_mask, t):
        """Velocity ``(B, n, C)`` in un-normalized latent units.

        ``text`` is ``(B, S, text_dim)`` with ``text_mask`` marking real tokens;
        ``t`` is ``(B,)``.
        """
        if not bool(self.stats_loaded.item()):
            raise ConfigurationError("corpus statistics not loaded")
        dtype = self.out.weight.dtype
        s = (v0_tokens.to(dtype) - self.mu0) / self.sigma0
        zn = (z_tilde.to(dtype) - self.muT) / self.sigmaT
        x = self.in_proj(torch.cat([s, zn], dim=-1))
        c = self.text_proj(text.to(dtype))
        temb = self.t_embed(t.to(dtype))
        for block in self.blocks:
            x, c = block(x, c, temb, text_mask)
        shift, scale = self.final_mod(F.silu(temb)).chunk(2, dim=-1)
        v = self.out(modulate(self.final_norm(x), shift, scale))
        return check_finite(v * self.sigmaT, "velocity")


def stack_text(texts: list[TextEmbedding], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    S = max(t.length for t in texts)
    d = texts[0].tokens.shape[1]
    out = np.zeros((len(texts), S, d), dtype=np.float32)
    mask = np.zeros((len(texts), S), dtype=bool)
    for i, t in enumerate(texts):
        out[i, : t.length] = t.tokens
        mask[i, : t.length] = True
    return torch.from_numpy(out).to(dtype), torch.from_numpy(mask)


def predict_velocity(model: TrajectoryFlowModel, z_tilde, v0_tokens, text: TextEmbedding, t: float) -> torch.Tensor:
    """Single-item velocity prediction ``(n, C)``."""
    txt, mask = stack_text([text], model.out.weight.dtype)
    tt = torch.full((1,), float(t), dtype=model.out.weight.dtype)
    return model(z_tilde[None], v0_tokens[None], txt, mask, tt)[0]


# ---------------------------------------------------------------------------
# Training


@dataclass
class FlowItem:
    v0_tokens: torch.Tensor  # (n, d)
    mu: torch.Tensor  # (n, C)
    sigma: torch.Tensor  # (n, C)
    text: TextEmbedding


VelocityFn = Callable[..., torch.Tensor]


def rf_loss(
    model: TrajectoryFlowModel,
    items: list[FlowItem],
    uncond: TextEmbedding,
    seed: int,
    cond_drop_prob: float | None = None,
    velocity_fn: VelocityFn | None = None,
) -> dict[str, torch.Tensor]:
    """Mean over items of ``||v(z_t) - (z - eps)||^2``.

    All randomness (latent sample, u, eps, condition drop) is drawn from
    ``seed``.  ``velocity_fn(z_tilde, v0, text, mask, t, target)`` replaces the
    network, for oracle checks.
    """
    p = model.cfg.cond_drop_prob if cond_drop_prob is None else cond_drop_prob
    dtype = model.out.weight.dtype
    g = torch.Generator().manual_seed(int(seed))
    B = len(items)
    mu = torch.stack([it.mu for it in items]).to(dtype)
    sigma = torch.stack([it.sigma for it in items]).to(dtype)
    v0 = torch.stack([it.v0_tokens for it in items]).to(dtype)
    z = mu + sigma * torch.randn(mu.shape, generator=g, dtype=torch.float32).to(dtype)
    u = torch.rand(B, generator=g, dtype=torch.float64)
    eps = torch.randn(mu.shape, generator=g, dtype=torch.float32).to(dtype)
    drop = torch.rand(B, generator=g, dtype=torch.float64) < p
    t = timestep_warp(u).to(dtype)
    z_tilde = (1 - t)[:, None, None] * z + t[:, None, None] * eps
    target = z - eps
    texts = [uncond if bool(drop[i]) else it.text for i, it in enumerate(items)]
    txt, mask = stack_text(texts, dtype)
    if velocity_fn is None:
        pred = model(z_tilde, v0, txt, mask, t)
    else:
        pred = velocity_fn(z_tilde, v0, txt, mask, t, target)
    per_item = ((pred - target) ** 2).flatten(1).sum(-1)
    return {"loss": per_item.mean(), "dropped": drop.sum()}


def make_flow_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def rf_train_step(model, optimizer, items, uncond, seed) -> dict[str, float]:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = rf_loss(model, items, uncond, seed)
    if not torch.isfinite(out["loss"]):
        raise NumericalError(f"flow loss is {out['loss'].item()}")
    backward(out["loss"])
    optimizer.step()
    return {"loss": float(out["loss"].detach()), "dropped": int(out["dropped"])}


@dataclass
class FlowTrainState:
    step: int = 0
    history: list[dict] = field(default_factory=list)


def train_flow(
    model: TrajectoryFlowModel,
    items: list[FlowItem],
    uncond: TextEmbedding,
    steps: int,
    seed: int = 0,
    batch_size: int = 8,
    optimizer=None,
    state: FlowTrainState | None = None,
    callback=None,
) -> FlowTrainState:
    optimizer = optimizer or make_flow_optimizer(model, model.cfg.lr)
    state = state or FlowTrainState()
    for _ in range(steps):
        k = state.step
        rng = np.random.default_rng(step_seed(seed, k, 2))
        if batch_size >= len(items):
            chosen = items
        else:
            chosen = [items[i] for i in sorted(rng.choice(len(items), size=batch_size, replace=False))]
        report = rf_train_step(model, optimizer, chosen, uncond, step_seed(seed, k, 3))
        report["step"] = k
        state.history.append(report)
        state.step += 1
        if callback is not None:
            callback(report)
    return state


@torch.no_grad()
def flow_items(vae: DyMeshVAE, meshes: list[DynamicMesh], texts: list[TextEmbedding], n_tokens: int) -> list[FlowItem]:
    from .vae import encode

    out = []
    for mesh, text in zip(meshes, texts):
        enc = encode(vae, mesh, min(n_tokens, mesh.num_vertices))
        out.append(FlowItem(enc.v0_tokens, enc.mu, enc.sigma, text))
    return out


# ---------------------------------------------------------------------------
# Sampling


def cfg_combine(v_cond: torch.Tensor | None, v_uncond: torch.Tensor | None, scale: float) -> torch.Tensor:
    """``v_u + scale (v_c - v_u)``; scale 1 and 0 return the branch itself."""
    if scale == 1:
        return v_cond
    if scale == 0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def euler_sample(velocity_fn: Callable[[torch.Tensor, float], torch.Tensor], z: torch.Tensor, steps: int) -> torch.Tensor:
    """Integrate from t = 1 to t = 0 in ``steps`` uniform steps.

    The trained field points from noise toward data (``z - eps``), which is
    ``-dz/dt``; stepping t downward therefore adds ``dt * v``.
    """
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        z = z + dt * velocity_fn(z, t)
    return z


@torch.no_grad()
def sample(
    model: TrajectoryFlowModel,
    v0_tokens: torch.Tensor,
    text: TextEmbedding,
    uncond: TextEmbedding,
    rng_seed: int,
    cfg_scale: float | None = None,
    steps: int | None = None,
) -> torch.Tensor:
    scale = model.cfg.cfg_scale if cfg_scale is None else cfg_scale
    steps = steps or model.cfg.sample_steps
    model.eval()
    dtype = model.out.weight.dtype
    n = v0_tokens.shape[0]
    g = torch.Generator().manual_seed(int(rng_seed))
    z = torch.randn((n, model.cfg.latent_channels), generator=g, dtype=torch.float32).to(dtype)

    def field(z, t):
        v_c = predict_velocity(model, z, v0_tokens, text, t) if scale != 0 else None
        v_u = predict_velocity(model, z, v0_tokens, uncond, t) if scale != 1 else None
        return cfg_combine(v_c, v_u, scale)

    return euler_sample(field, z, steps)


@torch.no_grad()
def animate(
    mesh: DynamicMesh,
    text: TextEmbedding,
    uncond: TextEmbedding,
    vae: DyMeshVAE,
    flow: TrajectoryFlowModel,
    rng_seed: int,
    n_tokens: int | None = None,
    cfg_scale: float | None = None,
    steps: int | None = None,
) -> DynamicMesh:
    """Animate the first frame of ``mesh`` into a ``vae.cfg.frames``-frame sequence."""
    still = mesh.first_frame().validate()
    N = still.num_vertices
    n = n_tokens or flow.cfg.tokens or default_token_count(vae.cfg, N)
    n = min(n, N)
    v0_full, v0_tokens, _ = vae.shape_path(mesh_batch(still), n)
    z = sample(flow, v0_tokens[0], text, uncond, rng_seed, cfg_scale, steps)
    offsets = vae.decode_batch(v0_full, v0_tokens, z[None])[0].numpy()
    return offsets_to_mesh(decompose(still).v0, offsets, vae.cfg.frames, still.faces, text.prompt)


# ---------------------------------------------------------------------------
# Persistence


def save_flow(path, model: TrajectoryFlowModel, optimizer=None, extra_meta: dict | None = None) -> None:
    from .numerics import save_checkpoint
    from .vae import model_tensors

    meta = {"kind": "dymesh-flow", "config": asdict(model.cfg)}
    meta.update(extra_meta or {})
    save_checkpoint(path, model_tensors(model, optimizer), meta)


def load_flow(path, with_optimizer: bool = False):
    from .numerics import load_checkpoint
    from .vae import load_model_tensors

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "dymesh-flow":
        raise ValueError(f"{path} is not a flow checkpoint")
    model = TrajectoryFlowModel(FlowConfig.from_dict(meta["config"]))
    opt = make_flow_optimizer(model, model.cfg.lr) if with_optimizer else None
    load_model_tensors(model, tensors, opt)
    model.eval()
    return (model, opt, meta) if with_optimizer else model
