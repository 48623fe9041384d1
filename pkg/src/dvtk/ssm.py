"""Sequence-mixing layers.

Two interchangeable families sit behind the same stack interface:

* ``SSMLayer`` -- a selective state-space layer.  Dynamics (decay, input and
  output maps) are projected from the input, so the layer is input-dependent,
  recurrent in form, and needs no positional encoding.  The recurrence is
  evaluated exactly through its quadratic dual: within a chunk the output is a
  decay-masked attention-like matmul, and a small carried state links chunks,
  which keeps the hot path in GEMMs instead of a per-step Python loop.
* ``TransformerLayer`` -- standard pre-norm attention + MLP; the stack adds a
  sinusoidal positional encoding.  Kept as the ablation baseline.

Causal stacks guarantee that output ``t`` depends only on inputs ``<= t``;
non-causal state-space stacks scan both directions and sum.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError

ATTENTION_KINDS = ("state_space", "transformer_sinusoidal")


def _pick_head_dim(dim: int) -> int:
    for hd in (32, 16, 8, 4, 2, 1):
        if dim % hd == 0:
            return hd
    return 1


def _inv_softplus(y: Tensor) -> Tensor:
    return y + torch.log(-torch.expm1(-y))


class SSMLayer(nn.Module):
    """Gated selective state-space mixer over (B, L, D) sequences.

    ``causal=True`` scans forward only with a causal local conv;
    ``causal=False`` runs forward and reverse scans with independent dynamics
    and sums them, with a symmetric local conv.
    """

    def __init__(
        self,
        dim: int,
        state_dim: int = 64,
        causal: bool = True,
        conv_kernel: int = 4,
        chunk_size: int = 128,
    ):
        super().__init__()
        self.dim = dim
        self.state_dim = state_dim
        self.causal = causal
        self.chunk_size = chunk_size
        self.head_dim = _pick_head_dim(dim)
        self.heads = dim // self.head_dim
        self.n_dirs = 1 if causal else 2

        per_dir = self.heads + 2 * state_dim
        self.in_proj = nn.Linear(dim, 2 * dim + self.n_dirs * per_dir, bias=False)
        if causal:
            self.conv_kernel = conv_kernel
            self.conv = nn.Conv1d(dim, dim, conv_kernel, groups=dim)
        else:
            self.conv_kernel = 3
            self.conv = nn.Conv1d(dim, dim, 3, groups=dim, padding=1)
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim)

        g = torch.Generator().manual_seed(0x55)
        a_init = torch.empty(self.n_dirs, self.heads).uniform_(1.0, 8.0, generator=g)
        self.a_log = nn.Parameter(torch.log(a_init))
        dt_init = torch.exp(
            torch.empty(self.n_dirs, self.heads).uniform_(
                math.log(1e-3), math.log(0.1), generator=g
            )
        )
        self.dt_bias = nn.Parameter(_inv_softplus(dt_init))
        self.skip_weight = nn.Parameter(torch.ones(self.n_dirs, dim))

    def forward(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        per_dir = self.heads + 2 * self.state_dim
        z, u, params = self.in_proj(x).split([d, d, self.n_dirs * per_dir], dim=-1)

        u = u.transpose(1, 2)
        if self.causal:
            u = F.pad(u, (self.conv_kernel - 1, 0))
        u = F.silu(self.conv(u)).transpose(1, 2)

        chunks = params.split([per_dir] * self.n_dirs, dim=-1)
        y = None
        for dir_idx, p in enumerate(chunks):
            dt_raw, bmat, cmat = p.split(
                [self.heads, self.state_dim, self.state_dim], dim=-1
            )
            if dir_idx == 1:
                out = self._scan(
                    u.flip(1), dt_raw.flip(1), bmat.flip(1), cmat.flip(1), dir_idx
                ).flip(1)
            else:
                out = self._scan(u, dt_raw, bmat, cmat, dir_idx)
            y = out if y is None else y + out

        return self.out_proj(self.norm(y * F.silu(z)))

    def _scan(self, u: Tensor, dt_raw: Tensor, bmat: Tensor, cmat: Tensor, dir_idx: int) -> Tensor:
        b, l, d = u.shape
        h_n, p_n, n = self.heads, self.head_dim, self.state_dim
        dt = F.softplus(dt_raw + self.dt_bias[dir_idx])
        loga = -torch.exp(self.a_log[dir_idx]) * dt
        v = u.reshape(b, l, h_n, p_n) * dt.unsqueeze(-1)

        q = min(self.chunk_size, l)
        n_chunks = -(-l // q)
        pad = n_chunks * q - l
        if pad:
            loga = F.pad(loga, (0, 0, 0, pad))
            v = F.pad(v, (0, 0, 0, 0, 0, pad))
            bmat = F.pad(bmat, (0, 0, 0, pad))
            cmat = F.pad(cmat, (0, 0, 0, pad))
        loga = loga.reshape(b, n_chunks, q, h_n)
        v = v.reshape(b, n_chunks, q, h_n, p_n)
        bmat = bmat.reshape(b, n_chunks, q, n)
        cmat = cmat.reshape(b, n_chunks, q, n)

        mask = torch.ones(q, q, dtype=torch.bool, device=u.device).tril()
        neg_inf = torch.tensor(float("-inf"), device=u.device, dtype=u.dtype)
        state = u.new_zeros(b, h_n, p_n, n)
        ys = []
        for k in range(n_chunks):
            ca = loga[:, k].cumsum(1)
            diff = ca.unsqueeze(2) - ca.unsqueeze(1)
            gamma = torch.where(mask.unsqueeze(0).unsqueeze(-1), diff, neg_inf).exp()
            scores = cmat[:, k] @ bmat[:, k].transpose(1, 2)
            mixed = scores.unsqueeze(-1) * gamma
            y = torch.einsum("bijh,bjhp->bihp", mixed, v[:, k])
            y = y + torch.einsum("bqn,bhpn,bqh->bqhp", cmat[:, k], state, ca.exp())
            ys.append(y)
            last = ca[:, -1]
            rel = (last.unsqueeze(1) - ca).exp()
            state = state * last.exp().unsqueeze(-1).unsqueeze(-1) + torch.einsum(
                "bqh,bqn,bqhp->bhpn", rel, bmat[:, k], v[:, k]
            )
        y = torch.cat(ys, dim=1)[:, :l].reshape(b, l, d)
        return y + u * self.skip_weight[dir_idx]


def sinusoidal_encoding(length: int, dim: int, device, dtype) -> Tensor:
    position = torch.arange(length, device=device, dtype=torch.float32).unsqueeze(1)
    half = (dim + 1) // 2
    freq = torch.exp(
        torch.arange(half, device=device, dtype=torch.float32) * (-math.log(10000.0) / max(half, 1))
    )
    angles = position * freq
    pe = torch.zeros(length, dim, device=device, dtype=torch.float32)
    pe[:, 0::2] = torch.sin(angles)[:, : pe[:, 0::2].shape[1]]
    pe[:, 1::2] = torch.cos(angles)[:, : pe[:, 1::2].shape[1]]
    return pe.to(dtype)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + MLP block, optionally causally masked."""

    def __init__(self, dim: int, causal: bool, mlp_ratio: int = 4):
        super().__init__()
        heads = max(h for h in (8, 4, 2, 1) if dim % h == 0)
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        mask = None
        if self.causal:
            l = x.shape[1]
            mask = torch.full((l, l), float("-inf"), device=x.device, dtype=x.dtype).triu(1)
        h = self.norm1(x)
        attn, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        x = x + attn
        return x + self.mlp(self.norm2(x))


class MixingStack(nn.Module):
    """A stack of sequence-mixing layers over flattened (B, L, D) sequences."""

    def __init__(
        self,
        dim: int,
        kind: str,
        causal: bool,
        depth: int = 2,
        state_dim: int = 64,
        chunk_size: int = 128,
    ):
        super().__init__()
        if kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {kind!r}")
        self.kind = kind
        self.dim = dim
        if kind == "state_space":
            self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(depth))
            self.layers = nn.ModuleList(
                SSMLayer(dim, state_dim=state_dim, causal=causal, chunk_size=chunk_size)
                for _ in range(depth)
            )
        else:
            self.layers = nn.ModuleList(TransformerLayer(dim, causal) for _ in range(depth))

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "state_space":
            for norm, layer in zip(self.norms, self.layers):
                x = x + layer(norm(x))
        else:
            x = x + sinusoidal_encoding(x.shape[1], self.dim, x.device, x.dtype)
            for layer in self.layers:
                x = layer(x)
        return x
