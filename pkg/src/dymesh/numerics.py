"""Numeric building blocks: positional encoding, attention kernels, checkpoints.

Tensors and reverse-mode gradients come from torch; everything here is a thin,
explicitly written layer on top so masking and value routing stay visible.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn

_DEBUG = bool(os.environ.get("DYMESH_DEBUG"))


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def set_debug(enabled: bool) -> None:
    global _DEBUG
    _DEBUG = enabled


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if _DEBUG and not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {where}")
    return t


def backward(loss: torch.Tensor) -> None:
    """Propagate gradients from a scalar loss into every participating parameter."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericalError(f"loss is {loss.item()}")
    loss.backward()


# ---------------------------------------------------------------------------
# Fourier features


@dataclass(frozen=True)
class FourierEncoding:
    num_bands: int = 8
    include_input: bool = True

    def __post_init__(self) -> None:
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")

    def width(self, k: int) -> int:
        return k * (2 * self.num_bands + int(self.include_input))


def fourier_encode(x: torch.Tensor, enc: FourierEncoding) -> torch.Tensor:
    """Sinusoidal features per scalar: ``[s?, sin(2^0 pi s), cos(2^0 pi s), ...]``.

    ``x`` has shape ``(..., k)``; output has shape ``(..., enc.width(k))`` with
    each scalar's features contiguous.
    """
    freqs = math.pi * torch.pow(2.0, torch.arange(enc.num_bands, dtype=x.dtype, device=x.device))
    ang = x[..., None] * freqs
    feats = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    if enc.include_input:
        feats = torch.cat([x[..., None], feats], dim=-1)
    return feats.flatten(-2)


# ---------------------------------------------------------------------------
# Attention


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor | None) -> torch.Tensor:
    """Row softmax with disallowed entries at exactly zero weight."""
    if allowed is not None:
        logits = logits.masked_fill(~allowed, float("-inf"))
    return torch.softmax(logits, dim=-1)


def attention_logits(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])


def _key_allowed(key_mask: torch.Tensor | None) -> torch.Tensor | None:
    return None if key_mask is None else key_mask[..., None, :]


MASK_MODES = ("neg-inf", "literal-hadamard", "none")


class MaskedSelfAttention(nn.Module):
    """Single-head self-attention restricted by a vertex adjacency mask.

    ``out = softmax(mask(q k^T / sqrt(d_k))) v + x`` with ``q, k, v`` linear
    projections of ``x``.  ``mode`` selects how the adjacency enters:

    * ``"neg-inf"``: non-adjacent logits are set to -inf (zero weight).
    * ``"literal-hadamard"``: logits are multiplied by the 0/1 adjacency.
    * ``"none"``: adjacency ignored.

    ``key_mask`` marks real (non-padding) vertices; padded keys always get zero
    weight regardless of mode.
    """

    def __init__(self, dim: int, qk_dim: int | None = None, mode: str = "neg-inf"):
        super().__init__()
        if mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {mode!r}")
        qk_dim = qk_dim or dim
        self.mode = mode
        self.q = nn.Linear(dim, qk_dim)
        self.k = nn.Linear(dim, qk_dim)
        self.v = nn.Linear(dim, dim)

    def weights(
        self, x: torch.Tensor, adj: torch.Tensor | None, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        logits = attention_logits(self.q(x), self.k(x))
        allowed = _key_allowed(key_mask)
        if self.mode == "neg-inf" and adj is not None:
            if allowed is not None:
                # padded rows keep their self-loop so no row is fully masked
                eye = torch.eye(adj.shape[-1], dtype=torch.bool, device=adj.device)
                allowed = adj & (allowed | eye)
            else:
                allowed = adj
        elif self.mode == "literal-hadamard" and adj is not None:
            logits = logits * adj.to(logits.dtype)
        return masked_softmax(logits, allowed)

    def forward(
        self, x: torch.Tensor, adj: torch.Tensor | None, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        return self.weights(x, adj, key_mask) @ self.v(x) + x


class SharedMapCrossAttention(nn.Module):
    """One attention map, two value streams.

    The map ``A = softmax(q' k'^T / sqrt(d_k))`` is computed once from the
    projected query/key inputs and applied to both ``v_a`` and ``v_b``::

        out_a = A @ proj_a(v_a) + res_a
        out_b = A @ proj_b(v_b) + res_b
    """

    def __init__(
        self,
        q_dim: int,
        k_dim: int,
        a_dim: int,
        b_dim: int,
        qk_dim: int,
        norm: bool = True,
    ):
        super().__init__()
        self.norm_q = nn.LayerNorm(q_dim) if norm else nn.Identity()
        self.norm_k = nn.LayerNorm(k_dim) if norm else nn.Identity()
        self.q = nn.Linear(q_dim, qk_dim)
        self.k = nn.Linear(k_dim, qk_dim)
        self.proj_a = nn.Linear(a_dim, a_dim)
        self.proj_b = nn.Linear(b_dim, b_dim)

    def attention_map(
        self, q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        logits = attention_logits(self.q(self.norm_q(q)), self.k(self.norm_k(k)))
        return masked_softmax(logits, _key_allowed(key_mask))

    def forward(self, q, k, v_a, v_b, res_a, res_b, key_mask=None):
        A = self.attention_map(q, k, key_mask)
        return A @ self.proj_a(v_a) + res_a, A @ self.proj_b(v_b) + res_b


class QueryKeyMap(nn.Module):
    """Residual-free cross attention that routes raw values: ``softmax(q' k'^T) z``."""

    def __init__(self, q_dim: int, k_dim: int, qk_dim: int, norm: bool = True):
        super().__init__()
        self.norm_q = nn.LayerNorm(q_dim) if norm else nn.Identity()
        self.norm_k = nn.LayerNorm(k_dim) if norm else nn.Identity()
        self.q = nn.Linear(q_dim, qk_dim)
        self.k = nn.Linear(k_dim, qk_dim)

    def attention_map(self, q, k, key_mask=None):
        logits = attention_logits(self.q(self.norm_q(q)), self.k(self.norm_k(k)))
        return masked_softmax(logits, _key_allowed(key_mask))

    def forward(self, q, k, values, key_mask=None):
        return self.attention_map(q, k, key_mask) @ values


def multi_head_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, key_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Plain multi-head attention over ``(B, L, D)`` inputs already projected."""
    B, L, D = q.shape
    S = k.shape[1]
    hd = D // heads
    qh = q.view(B, L, heads, hd).transpose(1, 2)
    kh = k.view(B, S, heads, hd).transpose(1, 2)
    vh = v.view(B, S, heads, hd).transpose(1, 2)
    allowed = None if key_mask is None else key_mask[:, None, None, :]
    A = masked_softmax(attention_logits(qh, kh), allowed)
    return (A @ vh).transpose(1, 2).reshape(B, L, D)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_difference_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``tensor``.

    ``tensor`` is perturbed in place and restored.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


GRAD_NORM_FLOOR = 1e-7


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = GRAD_NORM_FLOOR) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps exactly-zero gradients (e.g. key biases, which softmax
    cancels) from turning finite-difference roundoff into a unit error.
    """
    scale = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / scale


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-3,
) -> dict[str, float]:
    """Relative error between autograd and central differences, per parameter."""
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = finite_difference_grad(loss_fn, p, h)
        errors[name] = relative_error(analytic, numeric)
    return errors


# ---------------------------------------------------------------------------
# Checkpoint container
#
# little-endian layout:
#   b"DYCK" | u16 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
#   count x ( u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 | raw data )

CKPT_MAGIC = b"DYCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return arr


def encode_checkpoint(tensors: Mapping[str, object], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = _as_numpy(value)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return tensors, meta


def save_checkpoint(path: str | Path, tensors: Mapping[str, object], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, meta))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def state_to_torch(tensors: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, torch.Tensor]:
    return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
