"""Quantization kernels: lookup-free (sign) and finite-scalar quantizers, the
channel-split and residual wrappers, code/index arithmetic, and the auxiliary
losses used when training sign-quantized models.

All functions are pure: they take a latent tensor with channels last plus a
spec describing the quantizer, and return a :class:`QuantOutput`.  Gradients
cross the quantization boundary with an identity Jacobian (straight-through),
so ``d quantized / d latent == I`` exactly.

Conventions (fixed for serialization stability):

* sign quantizer: channel 0 is the least-significant bit of the code index,
  and a latent value of exactly 0 quantizes to -1;
* scalar quantizer: channel 0 is the most-significant digit of the
  mixed-radix code index;
* channel split: split ``k`` owns the contiguous channel block
  ``[k*c, (k+1)*c)`` and is the ``k``-th code of each pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import torch
from torch import Tensor

from .errors import ConfigError, DataError, InputError

__all__ = [
    "LFQSpec",
    "FSQSpec",
    "ChannelSplitSpec",
    "ResidualSpec",
    "QuantizerSpec",
    "TokenGrid",
    "QuantOutput",
    "UsageReport",
    "quantize",
    "dequantize",
    "lfq_quantize",
    "lfq_decode",
    "fsq_quantize",
    "fsq_decode",
    "channel_split_quantize",
    "residual_quantize",
    "pack_tokens",
    "unpack_tokens",
    "lfq_entropy_loss",
    "lfq_commitment_loss",
    "codebook_usage",
    "quantizer_to_dict",
    "quantizer_from_dict",
]


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class LFQSpec:
    """Sign quantizer over ``n_bits`` channels; implicit codebook size ``2**n_bits``."""

    n_bits: int

    def __post_init__(self):
        if not isinstance(self.n_bits, int) or self.n_bits < 1:
            raise ConfigError(f"n_bits must be a positive integer, got {self.n_bits!r}")
        if self.n_bits > 62:
            raise ConfigError("n_bits > 62 would overflow int64 code indices")

    @property
    def latent_channels(self) -> int:
        return self.n_bits

    @property
    def codebook_size(self) -> int:
        return 1 << self.n_bits

    @property
    def codes_per_pixel(self) -> int:
        return 1

    @property
    def base_kind(self) -> str:
        return "lfq"


@dataclass(frozen=True)
class FSQSpec:
    """Scalar quantizer with ``levels[i]`` grid points in channel ``i``."""

    levels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if len(self.levels) == 0:
            raise ConfigError("levels must be non-empty")
        if any(v < 2 for v in self.levels):
            raise ConfigError(f"every level must be >= 2, got {self.levels}")

    @property
    def latent_channels(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return math.prod(self.levels)

    @property
    def codes_per_pixel(self) -> int:
        return 1

    @property
    def base_kind(self) -> str:
        return "fsq"


BaseSpec = Union[LFQSpec, FSQSpec]


def _check_base(base) -> None:
    if not isinstance(base, (LFQSpec, FSQSpec)):
        raise ConfigError(f"wrapper base must be LFQSpec or FSQSpec, got {type(base).__name__}")


@dataclass(frozen=True)
class ChannelSplitSpec:
    """Split the latent into ``splits`` contiguous channel groups, quantize each
    with ``base`` independently, concatenate.  Each pixel becomes an ordered
    sequence of ``splits`` codes."""

    base: BaseSpec
    splits: int

    def __post_init__(self):
        _check_base(self.base)
        if not isinstance(self.splits, int) or self.splits < 1:
            raise ConfigError(f"splits must be a positive integer, got {self.splits!r}")

    @property
    def latent_channels(self) -> int:
        return self.splits * self.base.latent_channels

    @property
    def codebook_size(self) -> int:
        return self.base.codebook_size

    @property
    def codes_per_pixel(self) -> int:
        return self.splits

    @property
    def base_kind(self) -> str:
        return self.base.base_kind


@dataclass(frozen=True)
class ResidualSpec:
    """Quantize, subtract, and re-quantize the remainder for ``steps`` rounds;
    the decoded latent is the sum of the per-step values."""

    base: BaseSpec
    steps: int

    def __post_init__(self):
        _check_base(self.base)
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")

    @property
    def latent_channels(self) -> int:
        return self.base.latent_channels

    @property
    def codebook_size(self) -> int:
        return self.base.codebook_size

    @property
    def codes_per_pixel(self) -> int:
        return self.steps

    @property
    def base_kind(self) -> str:
        return self.base.base_kind


QuantizerSpec = Union[LFQSpec, FSQSpec, ChannelSplitSpec, ResidualSpec]


def quantizer_to_dict(spec: QuantizerSpec) -> dict:
    if isinstance(spec, LFQSpec):
        return {"kind": "lfq", "n_bits": spec.n_bits}
    if isinstance(spec, FSQSpec):
        return {"kind": "fsq", "levels": list(spec.levels)}
    if isinstance(spec, ChannelSplitSpec):
        return {"kind": "channel_split", "base": quantizer_to_dict(spec.base), "splits": spec.splits}
    if isinstance(spec, ResidualSpec):
        return {"kind": "residual", "base": quantizer_to_dict(spec.base), "steps": spec.steps}
    raise ConfigError(f"unknown quantizer spec type {type(spec).__name__}")


def quantizer_from_dict(d: dict) -> QuantizerSpec:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"quantizer description must be a mapping with a 'kind' key, got {d!r}")
    kind = d["kind"]
    known = {
        "lfq": {"kind", "n_bits"},
        "fsq": {"kind", "levels"},
        "channel_split": {"kind", "base", "splits"},
        "residual": {"kind", "base", "steps"},
    }
    if kind not in known:
        raise ConfigError(f"unknown quantizer kind {kind!r}")
    extra = set(d) - known[kind]
    if extra:
        raise ConfigError(f"unknown quantizer keys for kind {kind!r}: {sorted(extra)}")
    try:
        if kind == "lfq":
            return LFQSpec(n_bits=int(d["n_bits"]))
        if kind == "fsq":
            return FSQSpec(levels=tuple(int(v) for v in d["levels"]))
        if kind == "channel_split":
            base = quantizer_from_dict(d["base"])
            _check_base(base)
            return ChannelSplitSpec(base=base, splits=int(d["splits"]))
        base = quantizer_from_dict(d["base"])
        _check_base(base)
        return ResidualSpec(base=base, steps=int(d["steps"]))
    except KeyError as e:
        raise ConfigError(f"quantizer kind {kind!r} is missing field {e.args[0]!r}") from None


# ---------------------------------------------------------------------------
# token grids


@dataclass
class TokenGrid:
    """Integer code volume plus the spec that produced it.

    ``codes`` has the per-pixel code sequence as its last axis (length
    ``codes_per_pixel``); leading axes are the latent grid, optionally with a
    batch axis in front.  Every code lies in ``[0, codebook_size)`` of the
    (base) quantizer.
    """

    codes: Tensor
    quantizer: QuantizerSpec

    def __post_init__(self):
        if self.codes.dtype != torch.long:
            self.codes = self.codes.long()
        if self.codes.ndim < 1:
            raise DataError("codes must have at least the per-pixel axis")
        k = self.quantizer.codes_per_pixel
        if self.codes.shape[-1] != k:
            raise DataError(
                f"last codes axis is {self.codes.shape[-1]}, quantizer expects {k} codes per pixel"
            )
        if self.codes.numel():
            lo, hi = self.codes.min().item(), self.codes.max().item()
            if lo < 0 or hi >= self.quantizer.codebook_size:
                raise DataError(
                    f"codes out of range [0, {self.quantizer.codebook_size}): found [{lo}, {hi}]"
                )

    @property
    def codes_per_pixel(self) -> int:
        return self.codes.shape[-1]

    @property
    def dims(self) -> tuple[int, int, int]:
        if self.codes.ndim < 4:
            raise DataError("grid dims require codes shaped (..., T', H', W', codes_per_pixel)")
        return tuple(self.codes.shape[-4:-1])

    @property
    def token_count(self) -> int:
        return self.codes.numel()


@dataclass
class QuantOutput:
    """Result of a quantization pass: the straight-through quantized latent,
    the integer token grid, and any auxiliary loss terms."""

    quantized: Tensor
    grid: TokenGrid
    aux: dict[str, Tensor] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# helpers


def _check_channels(latent: Tensor, expected: int, what: str) -> None:
    if latent.shape[-1] != expected:
        raise ConfigError(
            f"{what} expects {expected} latent channels, got {latent.shape[-1]}"
        )


def _check_finite(latent: Tensor) -> None:
    if not torch.isfinite(latent).all():
        raise InputError("latent contains non-finite entries")


def _ste(latent: Tensor, target: Tensor) -> Tensor:
    # identity Jacobian across the boundary
    return latent + (target - latent).detach()


def _fsq_grid_params(spec: FSQSpec, device, dtype):
    levels = torch.tensor(spec.levels, device=device, dtype=dtype)
    half = (levels - 1) / 2
    shift = torch.where(levels.long() % 2 == 0, 0.5, 0.0).to(dtype)
    return half, shift


def _fsq_basis(spec: FSQSpec, device) -> Tensor:
    # channel 0 most significant
    basis = [1] * len(spec.levels)
    for i in range(len(spec.levels) - 2, -1, -1):
        basis[i] = basis[i + 1] * spec.levels[i + 1]
    return torch.tensor(basis, device=device, dtype=torch.long)


# ---------------------------------------------------------------------------
# sign quantizer


def lfq_quantize(latent: Tensor, spec: LFQSpec) -> QuantOutput:
    """Quantize each channel to -1/+1 by sign; 0 maps to -1.

    The code index is the bit pattern of the positive channels with channel 0
    as the least-significant bit.
    """
    _check_channels(latent, spec.n_bits, "sign quantizer")
    _check_finite(latent)
    bits = latent > 0
    hard = bits.to(latent.dtype) * 2 - 1
    weights = torch.pow(2, torch.arange(spec.n_bits, device=latent.device)).long()
    codes = (bits.long() * weights).sum(dim=-1, keepdim=True)
    quantized = _ste(latent, hard)
    aux = {
        "entropy": lfq_entropy_loss(latent, spec),
        "commitment": lfq_commitment_loss(latent, hard),
    }
    return QuantOutput(quantized=quantized, grid=TokenGrid(codes, spec), aux=aux)


def lfq_decode(codes: TokenGrid | Tensor, spec: LFQSpec, dtype=torch.float32) -> Tensor:
    """Inverse of :func:`lfq_quantize`: codes back to a -1/+1 latent."""
    codes = _grid_codes(codes, spec)
    shifts = torch.arange(spec.n_bits, device=codes.device)
    bits = (codes.unsqueeze(-1) >> shifts) & 1
    return bits.to(dtype) * 2 - 1


def _grid_codes(codes: TokenGrid | Tensor, spec: QuantizerSpec) -> Tensor:
    """Extract a (...,) long tensor of single codes, validating the range."""
    if isinstance(codes, TokenGrid):
        codes = codes.codes
    codes = torch.as_tensor(codes)
    if codes.ndim and codes.shape[-1] == 1:
        codes = codes.squeeze(-1)
    if codes.numel():
        lo, hi = codes.min().item(), codes.max().item()
        if lo < 0 or hi >= spec.codebook_size:
            raise DataError(f"codes out of range [0, {spec.codebook_size}): found [{lo}, {hi}]")
    return codes.long()


# ---------------------------------------------------------------------------
# scalar quantizer


def fsq_quantize(latent: Tensor, spec: FSQSpec) -> QuantOutput:
    """Bound each channel into its grid and round to the nearest grid point.

    Channel ``i`` has ``levels[i]`` values: the integers ``-(L//2)..L//2`` for
    odd ``L`` and the half-shifted grid for even ``L``.  Bounding clamps to the
    grid's extremes, so grid points are exact fixed points and decode/quantize
    round-trips are bit-exact.  The per-pixel code is the mixed-radix index
    with channel 0 most significant.
    """
    _check_channels(latent, len(spec.levels), "scalar quantizer")
    _check_finite(latent)
    half, shift = _fsq_grid_params(spec, latent.device, latent.dtype)
    with torch.no_grad():
        hard = torch.round(torch.clamp(latent, -half, half) + shift) - shift
        idx = torch.round(hard + half).long()
    basis = _fsq_basis(spec, latent.device)
    codes = (idx * basis).sum(dim=-1, keepdim=True)
    quantized = _ste(latent, hard)
    return QuantOutput(quantized=quantized, grid=TokenGrid(codes, spec), aux={})


def fsq_decode(codes: TokenGrid | Tensor, spec: FSQSpec, dtype=torch.float32) -> Tensor:
    """Inverse of :func:`fsq_quantize`: mixed-radix digits back to grid values."""
    codes = _grid_codes(codes, spec)
    basis = _fsq_basis(spec, codes.device)
    levels = torch.tensor(spec.levels, device=codes.device, dtype=torch.long)
    idx = (codes.unsqueeze(-1) // basis) % levels
    half, _ = _fsq_grid_params(spec, codes.device, dtype)
    return idx.to(dtype) - half


# ---------------------------------------------------------------------------
# wrappers


def channel_split_quantize(latent: Tensor, spec: ChannelSplitSpec) -> QuantOutput:
    """Quantize K contiguous channel groups independently and concatenate.

    The grid carries the K codes of each pixel along the last axis, split
    index innermost; auxiliary losses are summed across splits.
    """
    _check_channels(latent, spec.latent_channels, "channel-split quantizer")
    outs = [quantize(part, spec.base) for part in latent.split(spec.base.latent_channels, dim=-1)]
    quantized = torch.cat([o.quantized for o in outs], dim=-1)
    codes = torch.cat([o.grid.codes for o in outs], dim=-1)
    aux = {k: sum(o.aux[k] for o in outs) for k in outs[0].aux}
    return QuantOutput(quantized=quantized, grid=TokenGrid(codes, spec), aux=aux)


def residual_quantize(latent: Tensor, spec: ResidualSpec) -> QuantOutput:
    """Greedy multi-step quantization of the remaining error.

    The quantized output is the sum over steps; the grid carries one code per
    step, step index innermost; auxiliary losses are summed across steps.
    """
    _check_channels(latent, spec.latent_channels, "residual quantizer")
    residual = latent
    total = None
    codes = []
    aux: dict[str, Tensor] = {}
    for _ in range(spec.steps):
        out = quantize(residual, spec.base)
        total = out.quantized if total is None else total + out.quantized
        residual = residual - out.quantized
        codes.append(out.grid.codes)
        for k, v in out.aux.items():
            aux[k] = aux.get(k, 0) + v
    return QuantOutput(quantized=total, grid=TokenGrid(torch.cat(codes, dim=-1), spec), aux=aux)


def quantize(latent: Tensor, spec: QuantizerSpec) -> QuantOutput:
    """Dispatch to the quantizer described by ``spec``."""
    if isinstance(spec, LFQSpec):
        return lfq_quantize(latent, spec)
    if isinstance(spec, FSQSpec):
        return fsq_quantize(latent, spec)
    if isinstance(spec, ChannelSplitSpec):
        return channel_split_quantize(latent, spec)
    if isinstance(spec, ResidualSpec):
        return residual_quantize(latent, spec)
    raise ConfigError(f"unknown quantizer spec type {type(spec).__name__}")


def _decode_single(codes: Tensor, spec: BaseSpec, dtype) -> Tensor:
    if isinstance(spec, LFQSpec):
        return lfq_decode(codes, spec, dtype)
    return fsq_decode(codes, spec, dtype)


def dequantize(grid: TokenGrid, dtype=torch.float32) -> Tensor:
    """Map a token grid back to the latent the decoder network consumes.

    For base quantizers this reproduces the quantized values exactly, so
    ``quantize(dequantize(grid)).grid == grid`` bit-for-bit.  The residual
    wrapper sums its per-step values, which is exact for the decoder but only
    re-quantizes to the same codes for grids a quantization pass can produce.
    """
    spec = grid.quantizer
    if isinstance(spec, (LFQSpec, FSQSpec)):
        return _decode_single(grid.codes, spec, dtype)
    if isinstance(spec, ChannelSplitSpec):
        parts = [
            _decode_single(grid.codes[..., k], spec.base, dtype) for k in range(spec.splits)
        ]
        return torch.cat(parts, dim=-1)
    if isinstance(spec, ResidualSpec):
        total = None
        for k in range(spec.steps):
            part = _decode_single(grid.codes[..., k], spec.base, dtype)
            total = part if total is None else total + part
        return total
    raise ConfigError(f"unknown quantizer spec type {type(spec).__name__}")


# ---------------------------------------------------------------------------
# the single-codebook view of a code sequence


def pack_tokens(codes: Sequence[int], n_bits_per_code: int) -> int:
    """Map an ordered sequence of K codes onto one id in ``[0, 2**(N*K))``.

    Code 1 occupies the most-significant position: ``q_1 * 2**(N*(K-1)) + ...
    + q_K``.  The mapping is injective over the full code space.
    """
    n = int(n_bits_per_code)
    if n < 1:
        raise ConfigError(f"n_bits_per_code must be positive, got {n_bits_per_code!r}")
    packed = 0
    for q in codes:
        q = int(q)
        if not 0 <= q < (1 << n):
            raise DataError(f"code {q} out of range [0, {1 << n})")
        packed = (packed << n) | q
    return packed


def unpack_tokens(packed: int, n_bits_per_code: int, k: int) -> tuple[int, ...]:
    """Inverse of :func:`pack_tokens`."""
    n = int(n_bits_per_code)
    if n < 1:
        raise ConfigError(f"n_bits_per_code must be positive, got {n_bits_per_code!r}")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k!r}")
    packed = int(packed)
    if not 0 <= packed < (1 << (n * k)):
        raise DataError(f"packed id {packed} out of range [0, {1 << (n * k)})")
    mask = (1 << n) - 1
    return tuple((packed >> (n * (k - 1 - i))) & mask for i in range(k))


# ---------------------------------------------------------------------------
# auxiliary losses and usage statistics


def lfq_entropy_loss(pre_quantized: Tensor, spec: LFQSpec, temperature: float = 1.0) -> Tensor:
    """Entropy penalty for sign quantization.

    Soft per-channel assignments ``p = sigmoid(v / temperature)`` give a
    per-sample entropy term (low when assignments are confident) minus the
    entropy of the batch-mean assignment (high when usage is uniform); the
    difference is minimized by confident, diverse codes.
    """
    _check_channels(pre_quantized, spec.n_bits, "entropy penalty")
    p = torch.sigmoid(pre_quantized / temperature)
    per_sample = -(torch.special.xlogy(p, p) + torch.special.xlogy(1 - p, 1 - p))
    p_mean = p.reshape(-1, spec.n_bits).mean(dim=0)
    batch = -(torch.special.xlogy(p_mean, p_mean) + torch.special.xlogy(1 - p_mean, 1 - p_mean))
    return per_sample.mean() - batch.mean()


def lfq_commitment_loss(pre_quantized: Tensor, quantized: Tensor) -> Tensor:
    """Mean squared distance between the latent and its (detached) quantized value."""
    if pre_quantized.shape != quantized.shape:
        raise ConfigError(
            f"shape mismatch: {tuple(pre_quantized.shape)} vs {tuple(quantized.shape)}"
        )
    return torch.mean((pre_quantized - quantized.detach()) ** 2)


@dataclass
class UsageReport:
    """Empirical code usage over a token grid."""

    counts: Tensor
    used_fraction: float
    perplexity: float

    @property
    def total(self) -> int:
        return int(self.counts.sum().item())


def codebook_usage(grid: TokenGrid) -> UsageReport:
    """Count per-code occurrences and derive usage fraction and perplexity.

    Perplexity is ``exp`` of the entropy of the empirical code distribution,
     ranging from 1 (one code used) to the codebook size (uniform usage).
    """
    size = grid.quantizer.codebook_size
    counts = torch.bincount(grid.codes.reshape(-1), minlength=size)
    total = counts.sum().item()
    if total == 0:
        return UsageReport(counts=counts, used_fraction=0.0, perplexity=1.0)
    p = counts.double() / total
    entropy = -torch.special.xlogy(p, p).sum().item()
    return UsageReport(
        counts=counts,
        used_fraction=(counts > 0).double().mean().item(),
        perplexity=float(math.exp(entropy)),
    )
