"""Hierarchical video tokenizer backbone.

Tensors are channels-last throughout: videos are ``(B, T, H, W, 3)`` in
``[-1, 1]`` and latents are ``(B, T', H', W', C)``.  The encoder stacks
blocks of patchify -> spatial mixing -> causal temporal mixing, downsampling
by each block's space-time kernel and residually injecting the pooled output
of the previous block.  The decoder mirrors this bottom-up with temporal ->
spatial mixing -> pixel-shuffle upsampling and nearest-interpolated skips.

Single frames (T=1) are supported by repeating the frame up to each block's
temporal kernel before patchifying, which keeps the causal contract intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from einops import rearrange, reduce, repeat
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .quantizers import (
    QuantizerSpec,
    QuantOutput,
    TokenGrid,
    dequantize,
    quantize,
    quantizer_from_dict,
    quantizer_to_dict,
)
from .ssm import ATTENTION_KINDS, MixingStack

EMBEDDING_KINDS = ("conv3d", "linear")

Kernel = tuple[int, int, int]


@dataclass
class TokenizerConfig:
    """Architecture description: block kernels, widths, mixing flavor, quantizer."""

    kernels: list[Kernel]
    quantizer: QuantizerSpec
    levels: int | None = None
    hidden_dims: int | list[int] = 128
    latent_channels: int | None = None
    attention: str = "state_space"
    state_dim: int = 64
    layers_per_block: int = 2
    embedding: str = "conv3d"
    skip_connections: bool = True

    def __post_init__(self):
        self.kernels = [tuple(int(v) for v in k) for k in self.kernels]
        if not self.kernels:
            raise ConfigError("at least one block kernel is required")
        for k in self.kernels:
            if len(k) != 3 or any(v < 1 for v in k):
                raise ConfigError(f"kernels must be triples of positive integers, got {k}")
        if self.levels is None:
            self.levels = len(self.kernels)
        if self.levels != len(self.kernels):
            raise ConfigError(
                f"levels={self.levels} but {len(self.kernels)} kernels were given"
            )
        if isinstance(self.hidden_dims, int):
            self.hidden_dims = [self.hidden_dims] * self.levels
        self.hidden_dims = [int(v) for v in self.hidden_dims]
        if len(self.hidden_dims) != self.levels:
            raise ConfigError(
                f"hidden_dims has {len(self.hidden_dims)} entries for {self.levels} levels"
            )
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.embedding not in EMBEDDING_KINDS:
            raise ConfigError(f"embedding must be one of {EMBEDDING_KINDS}, got {self.embedding!r}")
        if self.latent_channels is None:
            self.latent_channels = self.quantizer.latent_channels
        if self.latent_channels != self.quantizer.latent_channels:
            raise ConfigError(
                f"latent_channels={self.latent_channels} does not match the quantizer's "
                f"required channel count {self.quantizer.latent_channels}"
            )

    @property
    def compression(self) -> Kernel:
        t = math.prod(k[0] for k in self.kernels)
        h = math.prod(k[1] for k in self.kernels)
        w = math.prod(k[2] for k in self.kernels)
        return (t, h, w)

    def to_dict(self) -> dict:
        return {
            "kernels": [list(k) for k in self.kernels],
            "quantizer": quantizer_to_dict(self.quantizer),
            "levels": self.levels,
            "hidden_dims": list(self.hidden_dims),
            "latent_channels": self.latent_channels,
            "attention": self.attention,
            "state_dim": self.state_dim,
            "layers_per_block": self.layers_per_block,
            "embedding": self.embedding,
            "skip_connections": self.skip_connections,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"tokenizer config must be a mapping, got {type(d).__name__}")
        known = {
            "kernels",
            "quantizer",
            "levels",
            "hidden_dims",
            "latent_channels",
            "attention",
            "state_dim",
            "layers_per_block",
            "embedding",
            "skip_connections",
        }
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown tokenizer config keys: {sorted(extra)}")
        if "kernels" not in d or "quantizer" not in d:
            raise ConfigError("tokenizer config requires 'kernels' and 'quantizer'")
        kwargs = dict(d)
        kwargs["quantizer"] = quantizer_from_dict(d["quantizer"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# resampling primitives


def _check_divisible(shape, kernel, what: str) -> None:
    t, h, w = shape
    kt, kh, kw = kernel
    if t % kt or h % kh or w % kw:
        raise ShapeError(
            f"{what}: dims {t}x{h}x{w} not divisible by kernel {kt}x{kh}x{kw}"
        )


def _pad_single_frame(x: Tensor, kt: int) -> Tensor:
    # repeat-first-frame front padding realizes single-image inputs causally
    if x.shape[1] == 1 and kt > 1:
        return x.expand(-1, kt, -1, -1, -1)
    return x


def token_pool(x: Tensor, kernel: Kernel) -> Tensor:
    """Non-overlapping space-time average pooling by integer factors."""
    _check_divisible(x.shape[1:4], kernel, "token pooling")
    kt, kh, kw = kernel
    return reduce(x, "b (T t) (H h) (W w) c -> b T H W c", "mean", t=kt, h=kh, w=kw)


def token_interp(x: Tensor, kernel: Kernel) -> Tensor:
    """Nearest-neighbor space-time upsampling by integer factors."""
    kt, kh, kw = kernel
    return repeat(x, "b T H W c -> b (T t) (H h) (W w) c", t=kt, h=kh, w=kw)


class Patchify(nn.Module):
    """Space-time downsampling: fold each kernel window into a patch and embed it.

    The conv3d embedding uses kernel == stride, so patches never overlap; the
    linear variant projects the flattened patch with shared weights.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: Kernel, embedding: str):
        super().__init__()
        self.kernel = kernel
        self.embedding = embedding
        kt, kh, kw = kernel
        if embedding == "conv3d":
            self.proj = nn.Conv3d(in_channels, out_channels, kernel, stride=kernel)
        elif embedding == "linear":
            self.proj = nn.Linear(in_channels * kt * kh * kw, out_channels)
        else:
            raise ConfigError(f"unknown embedding {embedding!r}")

    def forward(self, x: Tensor) -> Tensor:
        kt, kh, kw = self.kernel
        x = _pad_single_frame(x, kt)
        _check_divisible(x.shape[1:4], self.kernel, "patchify")
        if self.embedding == "conv3d":
            y = self.proj(x.permute(0, 4, 1, 2, 3))
            return y.permute(0, 2, 3, 4, 1)
        patches = rearrange(
            x, "b (T t) (H h) (W w) c -> b T H W (t h w c)", t=kt, h=kh, w=kw
        )
        return self.proj(patches)


class ToPixel(nn.Module):
    """Space-time upsampling: project channels, then pixel-shuffle each token
    into a kernel-sized window."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Kernel):
        super().__init__()
        self.kernel = kernel
        self.out_channels = out_channels
        kt, kh, kw = kernel
        self.proj = nn.Linear(in_channels, out_channels * kt * kh * kw)

    def forward(self, x: Tensor) -> Tensor:
        kt, kh, kw = self.kernel
        y = self.proj(x)
        return rearrange(
            y, "b T H W (t h w c) -> b (T t) (H h) (W w) c", t=kt, h=kh, w=kw, c=self.out_channels
        )


# ---------------------------------------------------------------------------
# sequence mixing over the two axes


class SpatialMixing(nn.Module):
    """Mix tokens within each frame; no information crosses the time axis."""

    def __init__(self, dim: int, config: TokenizerConfig):
        super().__init__()
        self.stack = MixingStack(
            dim,
            kind=config.attention,
            causal=False,
            depth=config.layers_per_block,
            state_dim=config.state_dim,
        )

    def forward(self, x: Tensor) -> Tensor:
        b, t, h, w, c = x.shape
        seq = rearrange(x, "b t h w c -> (b t) (h w) c")
        return rearrange(self.stack(seq), "(b t) (h w) c -> b t h w c", b=b, h=h)


class TemporalMixing(nn.Module):
    """Causally mix tokens along time at each spatial site."""

    def __init__(self, dim: int, config: TokenizerConfig):
        super().__init__()
        self.stack = MixingStack(
            dim,
            kind=config.attention,
            causal=True,
            depth=config.layers_per_block,
            state_dim=config.state_dim,
        )

    def forward(self, x: Tensor) -> Tensor:
        b, t, h, w, c = x.shape
        seq = rearrange(x, "b t h w c -> (b h w) t c")
        return rearrange(self.stack(seq), "(b h w) t c -> b t h w c", b=b, h=h, w=w)


class EncoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: Kernel, config: TokenizerConfig):
        super().__init__()
        self.patchify = Patchify(in_channels, out_channels, kernel, config.embedding)
        self.spatial = SpatialMixing(out_channels, config)
        self.temporal = TemporalMixing(out_channels, config)

    def forward(self, x: Tensor) -> Tensor:
        return self.temporal(self.spatial(self.patchify(x)))


class DecoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: Kernel, config: TokenizerConfig):
        super().__init__()
        self.temporal = TemporalMixing(in_channels, config)
        self.spatial = SpatialMixing(in_channels, config)
        self.topixel = ToPixel(in_channels, out_channels, kernel)

    def forward(self, x: Tensor) -> Tensor:
        return self.topixel(self.spatial(self.temporal(x)))


# ---------------------------------------------------------------------------
# encoder / decoder


class Encoder(nn.Module):
    """Top-down hierarchy of encoder blocks with pooled residual skips.

    Block l maps the running stream through patchify and both mixers; from the
    second block on, the previous block's output is average-pooled to the new
    resolution and added before the stream continues.  A final channelwise
    projection produces the quantizer's latent width.
    """

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        widths = config.hidden_dims
        self.blocks = nn.ModuleList()
        self.skip_projs = nn.ModuleList()
        in_ch = 3
        for i, kernel in enumerate(config.kernels):
            self.blocks.append(EncoderBlock(in_ch, widths[i], kernel, config))
            if i >= 1 and widths[i - 1] != widths[i]:
                self.skip_projs.append(nn.Linear(widths[i - 1], widths[i]))
            else:
                self.skip_projs.append(nn.Identity())
            in_ch = widths[i]
        self.latent_proj = nn.Linear(widths[-1], config.latent_channels)

    def forward(self, video: Tensor) -> Tensor:
        x = video
        prev = None
        for i, block in enumerate(self.blocks):
            u = block(x)
            if self.config.skip_connections and prev is not None:
                kt, kh, kw = self.config.kernels[i]
                if prev.shape[1] == 1:
                    kt = 1
                pooled = token_pool(prev, (kt, kh, kw))
                x = u + self.skip_projs[i](pooled)
            else:
                x = u
            prev = u
        return self.latent_proj(x)


class Decoder(nn.Module):
    """Bottom-up mirror of the encoder with nearest-interpolated skips.

    Deepest block first; each block's output is the finer-resolution stream,
    and from the second block on the previous (coarser) output is upsampled
    and added.  The output head projects the finest stream to RGB; outputs
    are clamped to [-1, 1] in eval mode only.
    """

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        widths = config.hidden_dims
        self.in_proj = nn.Linear(config.latent_channels, widths[-1])
        self.blocks = nn.ModuleList()
        self.skip_projs = nn.ModuleList()
        # block index j runs deepest-first: level l = L - j
        for j in range(config.levels):
            level = config.levels - j
            in_ch = widths[level - 1]
            out_ch = widths[level - 2] if level >= 2 else widths[0]
            kernel = config.kernels[level - 1]
            self.blocks.append(DecoderBlock(in_ch, out_ch, kernel, config))
            if in_ch != out_ch:
                self.skip_projs.append(nn.Linear(in_ch, out_ch))
            else:
                self.skip_projs.append(nn.Identity())
        self.out_proj = nn.Linear(widths[0], 3)

    def forward(self, latent: Tensor) -> Tensor:
        x = self.in_proj(latent)
        prev = None
        for j, block in enumerate(self.blocks):
            level = self.config.levels - j
            vhat = block(x)
            if self.config.skip_connections and prev is not None:
                kernel = self.config.kernels[level - 1]
                x = vhat + self.skip_projs[j](token_interp(prev, kernel))
            else:
                x = vhat
            prev = vhat
        out = self.out_proj(x)
        if not self.training:
            out = out.clamp(-1.0, 1.0)
        return out


class VideoTokenizer(nn.Module):
    """Encoder + quantizer + decoder; the full tokenization pipeline."""

    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    @property
    def quantizer(self) -> QuantizerSpec:
        return self.config.quantizer

    def check_video_shape(self, shape) -> None:
        t_dim, h_dim, w_dim = shape[-4:-1]
        ct, ch, cw = self.config.compression
        ok_t = t_dim == 1 or t_dim % ct == 0
        if not ok_t or h_dim % ch or w_dim % cw:
            raise ShapeError(
                f"video dims {t_dim}x{h_dim}x{w_dim} incompatible with compression "
                f"{ct}x{ch}x{cw}: T must be 1 or divisible by {ct}, H by {ch}, W by {cw}"
            )

    def encode(self, video: Tensor) -> Tensor:
        self.check_video_shape(video.shape)
        return self.encoder(video)

    def decode(self, latent: Tensor) -> Tensor:
        return self.decoder(latent)

    def forward(self, video: Tensor) -> tuple[Tensor, QuantOutput]:
        out = quantize(self.encode(video), self.quantizer)
        return self.decode(out.quantized), out

    def tokenize(self, video: Tensor) -> TokenGrid:
        """Video (T, H, W, 3) or (B, T, H, W, 3) to its discrete token grid."""
        squeeze = video.ndim == 4
        if squeeze:
            video = video.unsqueeze(0)
        with torch.no_grad():
            out = quantize(self.encode(video), self.quantizer)
        codes = out.grid.codes.squeeze(0) if squeeze else out.grid.codes
        return TokenGrid(codes, self.quantizer)

    def detokenize(self, grid: TokenGrid, num_frames: int | None = None) -> Tensor:
        """Token grid back to a video; the model's reconstruction when fed
        :meth:`tokenize` output.  ``num_frames`` trims the leading frames,
        e.g. back to 1 for single-image grids."""
        codes = grid.codes
        squeeze = codes.ndim == 4
        if squeeze:
            codes = codes.unsqueeze(0)
        param = next(self.parameters())
        latent = dequantize(TokenGrid(codes, grid.quantizer), dtype=param.dtype).to(param.device)
        with torch.no_grad():
            video = self.decode(latent)
        if squeeze:
            video = video.squeeze(0)
        if num_frames is not None:
            video = video[..., :num_frames, :, :, :] if video.ndim == 5 else video[:num_frames]
        return video

    def token_count(self, video_shape) -> int:
        """Analytic token count for a video shape under this configuration."""
        t_dim, h_dim, w_dim = video_shape[-4:-1] if len(video_shape) >= 4 else video_shape
        ct, ch, cw = self.config.compression
        t_lat = 1 if t_dim == 1 else t_dim // ct
        return t_lat * (h_dim // ch) * (w_dim // cw) * self.quantizer.codes_per_pixel
