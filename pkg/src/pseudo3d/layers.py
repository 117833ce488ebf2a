"""Pseudo-3D building blocks.

A pseudo-3D conv is a per-frame 2D conv followed by a per-pixel 1D conv over
frames. A pseudo-3D attention block is per-frame spatial attention followed by
per-pixel temporal attention. Both temporal halves start out as exact identity
maps so a trained image network keeps computing the same per-frame function
after it gains them.
"""
from __future__ import annotations

import math
import warnings
from typing import Literal

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .core import check_video, flatten_spatial, to_spatial_batch, to_temporal_batch, unflatten_spatial
from .errors import InvalidShapeError, UnsupportedConfigError

FPS_RANGE = (1, 30)

InitFlag = Literal["none", "identity", "zero", "trained"]


def init_temporal_identity(conv: nn.Conv1d) -> nn.Conv1d:
    """Set a 1D conv to the identity map: centre tap = I, all else 0."""
    k = conv.kernel_size[0]
    if k % 2 == 0:
        raise UnsupportedConfigError(f"temporal kernel must be odd for identity init, got {k}")
    if conv.in_channels != conv.out_channels or conv.groups != 1:
        raise UnsupportedConfigError("identity init needs in_channels == out_channels and groups == 1")
    with torch.no_grad():
        conv.weight.zero_()
        idx = torch.arange(conv.out_channels)
        conv.weight[idx, idx, k // 2] = 1.0
        if conv.bias is not None:
            conv.bias.zero_()
    return conv


class P3DConv(nn.Module):
    """2D conv per frame, then (optionally) 1D conv per pixel along frames.

    Without a temporal half the layer is a plain image conv applied per frame.
    ``temporal_init`` records whether the temporal half still holds its identity
    initialisation or has been handed to an optimiser.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        temporal_kernel: int | None = None,
        temporal_padding: str = "zeros",
    ):
        super().__init__()
        if kernel_size % 2 == 0:
            raise UnsupportedConfigError(f"spatial kernel must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spatial = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.temporal: nn.Conv1d | None = None
        self.temporal_init: InitFlag = "none"
        if temporal_kernel is not None:
            self.add_temporal(temporal_kernel, temporal_padding)

    def add_temporal(self, kernel: int = 3, padding_mode: str = "zeros") -> None:
        if kernel % 2 == 0:
            raise UnsupportedConfigError(f"temporal kernel must be odd, got {kernel}")
        conv = nn.Conv1d(self.out_channels, self.out_channels, kernel, padding=kernel // 2, padding_mode=padding_mode)
        self.temporal = init_temporal_identity(conv.to(self.spatial.weight))
        self.temporal_init = "identity"

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() == 4:
            if h.shape[1] != self.in_channels:
                raise InvalidShapeError(f"expected {self.in_channels} channels, got {h.shape[1]}")
            return self.spatial(h)
        check_video(h)
        if h.shape[1] != self.in_channels:
            raise InvalidShapeError(f"expected {self.in_channels} channels, got {h.shape[1]}")
        view = to_spatial_batch(h)
        h = view.restore(self.spatial(view.data))
        if self.temporal is None:
            return h
        view = to_temporal_batch(h)
        return view.restore(self.temporal(view.data))


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head softmax attention on ``(N, L, C)`` token tensors."""
    q, k, v = (rearrange(x, "n l (h d) -> n h l d", h=heads) for x in (q, k, v))
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = torch.softmax(torch.einsum("nhid,nhjd->nhij", q, k) * scale, dim=-1)
    out = torch.einsum("nhij,nhjd->nhid", weights, v)
    return rearrange(out, "n h l d -> n l (h d)")


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if dim % heads != 0:
            raise InvalidShapeError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        kv_dim = dim if context_dim is None else context_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        ctx = x if context is None else context
        return self.to_out(attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads))


class SpatialAttention(nn.Module):
    """Self-attention over the H*W tokens of each frame, plus optional cross-attention."""

    def __init__(self, channels: int, heads: int, context_dim: int | None = None):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads)
        self.cross_norm: nn.LayerNorm | None = None
        self.cross: MultiHeadAttention | None = None
        if context_dim:
            self.cross_norm = nn.LayerNorm(channels)
            self.cross = MultiHeadAttention(channels, heads, context_dim)

    def forward(self, tokens: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        tokens = tokens + self.attn(self.norm(tokens))
        if self.cross is not None and context is not None:
            tokens = tokens + self.cross(self.cross_norm(tokens), context)
        return tokens


class TemporalAttention(nn.Module):
    """Self-attention over the F tokens of each pixel.

    Learned absolute position embeddings are added to the query/key input only,
    never to the values or the residual path. A zero output projection then
    gives an exact identity, and frames with identical content attend to
    identical values, so they stay identical.
    """

    def __init__(self, channels: int, heads: int, max_frames: int = 16):
        super().__init__()
        self.max_frames = max_frames
        self.norm = nn.LayerNorm(channels)
        self.pos_emb = nn.Parameter(torch.randn(max_frames, channels) * 0.02)
        self.attn = MultiHeadAttention(channels, heads)
        nn.init.zeros_(self.attn.to_out.weight)
        nn.init.zeros_(self.attn.to_out.bias)

    def branch(self, tokens: torch.Tensor) -> torch.Tensor:
        f = tokens.shape[1]
        if f > self.max_frames:
            raise InvalidShapeError(f"temporal attention supports at most {self.max_frames} frames, got {f}")
        x = self.norm(tokens)
        qk = x + self.pos_emb[:f]
        a = self.attn
        return a.to_out(attention(a.to_q(qk), a.to_k(qk), a.to_v(x), a.heads))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens + self.branch(tokens)


class P3DAttention(nn.Module):
    """Spatial attention per frame, then (optionally) temporal attention per pixel."""

    def __init__(self, channels: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if channels % heads != 0:
            raise InvalidShapeError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.spatial = SpatialAttention(channels, heads, context_dim)
        self.temporal: TemporalAttention | None = None
        self.temporal_init: InitFlag = "none"

    def add_temporal(self, max_frames: int = 16) -> None:
        self.temporal = TemporalAttention(self.channels, self.heads, max_frames).to(self.spatial.norm.weight)
        self.temporal_init = "zero"

    def spatial_only(self, h: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        b, c, f, hh, ww = check_video(h)
        if c != self.channels:
            raise InvalidShapeError(f"expected {self.channels} channels, got {c}")
        flat = flatten_spatial(h)
        tokens = rearrange(flat.data, "b c f n -> (b f) n c")
        if context is not None and context.shape[0] == b and f > 1:
            context = context.repeat_interleave(f, dim=0)
        tokens = self.spatial(tokens, context)
        return unflatten_spatial(rearrange(tokens, "(b f) n c -> b c f n", b=b), flat.origin_shape)

    def temporal_branch(self, h: torch.Tensor) -> torch.Tensor:
        """The residual increment the temporal block would add to ``h``."""
        view = to_temporal_batch(h)
        tokens = rearrange(view.data, "n c f -> n f c")
        return view.restore(rearrange(self.temporal.branch(tokens), "n f c -> n c f"))

    def forward(self, h: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        if h.dim() == 4:
            h5 = h.unsqueeze(2)
            return self.spatial_only(h5, context).squeeze(2)
        h = self.spatial_only(h, context)
        if self.temporal is None:
            return h
        return h + self.temporal_branch(h)


def sinusoidal_encoding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """``(N,) -> (N, dim)`` transformer-style sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[:, None] * freqs[None]
    enc = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


class CondEmbedding(nn.Module):
    """Maps a timestep, an fps value or an image embedding to a ``dim`` vector.

    Scalars go through a sinusoidal encoding first; vectors go straight into the
    two-layer transform. fps values outside ``[1, 30]`` are clamped with a warning.
    """

    def __init__(self, dim: int, source: Literal["t", "fps", "image"], in_dim: int | None = None):
        super().__init__()
        self.dim = dim
        self.source = source
        if source == "image":
            if not in_dim:
                raise UnsupportedConfigError("image conditioning needs in_dim")
            first = in_dim
        else:
            first = dim
        self.net = nn.Sequential(nn.Linear(first, dim), nn.SiLU(), nn.Linear(dim, dim))

    def zero_init_output(self) -> None:
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, value: torch.Tensor | float | int, batch: int | None = None) -> torch.Tensor:
        dtype = self.net[0].weight.dtype
        if self.source == "image":
            return self.net(torch.as_tensor(value, dtype=dtype))
        value = torch.as_tensor(value, dtype=torch.float64)
        if value.dim() == 0:
            value = value.expand(batch or 1)
        if self.source == "fps":
            lo, hi = FPS_RANGE
            if bool(((value < lo) | (value > hi)).any()):
                warnings.warn(f"fps outside training range [{lo}, {hi}]; clamping", stacklevel=2)
                value = value.clamp(lo, hi)
        return self.net(sinusoidal_encoding(value, self.dim).to(dtype))
