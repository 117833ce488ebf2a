"""Diffusion U-Net in image (2D) and video (pseudo-3D) form, and inflation between them.

The same module tree serves both modes. An image-mode network has no temporal
sublayers and, given a video, denoises every frame independently. Inflation
adds identity-initialised temporal convs, zero-initialised temporal attention
and a zero-initialised fps embedding, so the video network starts out
computing exactly the image network's per-frame function.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .core import batch_as_frames, frames_as_batch
from .errors import InvalidShapeError, InvalidStateError, MissingConditionError, UnsupportedConfigError
from .layers import CondEmbedding, P3DAttention, P3DConv

Mode = Literal["image2d", "video3d"]
Role = Literal["decoder", "interp", "sr"]

ROLE_IN_CHANNELS = {"decoder": 3, "interp": 7, "sr": 6}


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] = (1,)
    heads: int = 4
    num_res_blocks: int = 1
    in_channels: int = 3
    out_channels: int = 3
    cond_dim: int = 0
    context_tokens: int = 4
    emb_dim: int = 0
    groups: int = 8
    mode: Mode = "image2d"
    role: Role = "decoder"
    temporal_kernel: int = 3
    max_frames: int = 16
    resolution: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "attn_levels", tuple(sorted(set(self.attn_levels))))
        if self.emb_dim <= 0:
            object.__setattr__(self, "emb_dim", 4 * self.base_channels)
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def validate(self) -> None:
        if self.mode not in ("image2d", "video3d"):
            raise UnsupportedConfigError(f"unknown mode {self.mode!r}")
        if self.role not in ROLE_IN_CHANNELS:
            raise UnsupportedConfigError(f"unknown role {self.role!r}")
        if self.in_channels != ROLE_IN_CHANNELS[self.role]:
            raise UnsupportedConfigError(
                f"role {self.role!r} needs {ROLE_IN_CHANNELS[self.role]} input channels, got {self.in_channels}"
            )
        if not self.channel_mults or any(m <= 0 for m in self.channel_mults):
            raise UnsupportedConfigError("channel multipliers must be positive")
        if any(b < a for a, b in zip(self.channel_mults, self.channel_mults[1:])):
            raise UnsupportedConfigError(f"channel multipliers must be nondecreasing: {self.channel_mults}")
        if any(not 0 <= lvl < self.levels for lvl in self.attn_levels):
            raise UnsupportedConfigError(f"attention level out of range: {self.attn_levels}")
        for lvl in self.attn_levels:
            if self.channels[lvl] % self.heads:
                raise UnsupportedConfigError(f"level {lvl} width {self.channels[lvl]} not divisible by {self.heads} heads")
        if self.temporal_kernel % 2 == 0:
            raise UnsupportedConfigError("temporal kernel must be odd")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attn_levels"] = list(self.attn_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _groups(channels: int, preferred: int) -> int:
    return math.gcd(channels, preferred)


class FrameGroupNorm(nn.GroupNorm):
    """GroupNorm whose statistics are taken per frame, never across frames."""

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() == 5:
            return batch_as_frames(super().forward(frames_as_batch(h)), h.shape[2])
        return super().forward(h)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = FrameGroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = P3DConv(in_ch, out_ch)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = FrameGroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = P3DConv(out_ch, out_ch)
        # 1x1 channel mixing acts pointwise, so it needs no temporal counterpart
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        x = self.conv1(F.silu(self.norm1(h)))
        x = x + self.emb_proj(F.silu(emb))[:, :, None, None, None]
        x = self.conv2(F.silu(self.norm2(x)))
        if self.skip is not None:
            h = batch_as_frames(self.skip(frames_as_batch(h)), h.shape[2])
        return h + x


class Level(nn.Module):
    def __init__(self, res: list[ResBlock], attn: list[P3DAttention]):
        super().__init__()
        self.res = nn.ModuleList(res)
        self.attn = nn.ModuleList(attn)

    def forward(self, h, emb, ctx):
        for i, block in enumerate(self.res):
            h = block(h, emb)
            if len(self.attn) > i:
                h = self.attn[i](h, ctx)
        return h


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = P3DConv(channels, channels)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        f = h.shape[2]
        up = F.interpolate(frames_as_batch(h), scale_factor=2, mode="nearest")
        return self.conv(batch_as_frames(up, f))


def _downsample(h: torch.Tensor) -> torch.Tensor:
    return batch_as_frames(F.avg_pool2d(frames_as_batch(h), 2), h.shape[2])


class UNet(nn.Module):
    """Epsilon-predicting U-Net.

    ``forward(x, t, fps=None, cond=None, extra=None)``:

    x      (B,3,H,W) image or (B,3,F,H,W) video noisy sample
    t      int or (B,) timesteps
    fps    scalar or (B,) frame rate; required in video3d mode
    cond   (B, cond_dim) image embedding, or None for the null condition
    extra  conditioning channels concatenated to ``x`` (masked frames + mask
           for interpolation, upsampled low-res for super-resolution)
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        emb = config.emb_dim
        g = config.groups
        self.time_embed = CondEmbedding(emb, "t")
        self.cond_embed = CondEmbedding(emb, "image", config.cond_dim) if config.cond_dim else None
        self.context_proj = (
            nn.Linear(config.cond_dim, config.context_tokens * config.cond_dim) if config.cond_dim else None
        )
        self.fps_embed: CondEmbedding | None = None
        ctx_dim = config.cond_dim or None

        self.conv_in = P3DConv(config.in_channels, ch[0])
        self.down = nn.ModuleList()
        prev = ch[0]
        for lvl, c in enumerate(ch):
            res, attn = [], []
            for _ in range(config.num_res_blocks):
                res.append(ResBlock(prev, c, emb, g))
                prev = c
                if lvl in config.attn_levels:
                    attn.append(P3DAttention(c, config.heads, ctx_dim))
            self.down.append(Level(res, attn))

        mid_attn = [P3DAttention(ch[-1], config.heads, ctx_dim)] if config.attn_levels else []
        self.mid = Level([ResBlock(ch[-1], ch[-1], emb, g), ResBlock(ch[-1], ch[-1], emb, g)], mid_attn)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = ch[-1]
        for lvl in reversed(range(config.levels)):
            c = ch[lvl]
            res, attn = [], []
            for j in range(config.num_res_blocks):
                res.append(ResBlock(prev + (c if j == 0 else 0), c, emb, g))
                prev = c
                if lvl in config.attn_levels:
                    attn.append(P3DAttention(c, config.heads, ctx_dim))
            self.up.append(Level(res, attn))
            if lvl > 0:
                self.upsample.append(Upsample(c))
        self.norm_out = FrameGroupNorm(_groups(ch[0], g), ch[0])
        self.conv_out = P3DConv(ch[0], config.out_channels)
        self._fps_init = "none"
        if config.mode == "video3d":
            self._add_temporal()

    def _add_temporal(self) -> None:
        for _, conv in self.p3d_convs():
            conv.add_temporal(self.config.temporal_kernel)
        for _, attn in self.p3d_attns():
            attn.add_temporal(self.config.max_frames)
        self.fps_embed = CondEmbedding(self.config.emb_dim, "fps").to(self.time_embed.net[0].weight)
        self.fps_embed.zero_init_output()
        self._fps_init = "zero"

    @property
    def mode(self) -> Mode:
        return self.config.mode

    def p3d_convs(self) -> list[tuple[str, P3DConv]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, P3DConv)]

    def p3d_attns(self) -> list[tuple[str, P3DAttention]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, P3DAttention)]

    def temporal_flags(self) -> dict[str, str]:
        flags = {n: m.temporal_init for n, m in self.p3d_convs() + self.p3d_attns()}
        if self.fps_embed is not None:
            flags["fps_embed"] = self._fps_init
        return flags

    def mark_trained(self) -> None:
        """Record that temporal sublayers have left their initialisation."""
        for _, m in self.p3d_convs() + self.p3d_attns():
            if m.temporal_init in ("identity", "zero"):
                m.temporal_init = "trained"
        if self.fps_embed is not None:
            self._fps_init = "trained"

    def set_temporal_flags(self, flags: dict[str, str]) -> None:
        modules = dict(self.named_modules())
        for name, flag in flags.items():
            if name == "fps_embed":
                self._fps_init = flag
            elif name in modules:
                modules[name].temporal_init = flag

    def embed(self, batch: int, t, fps, cond) -> tuple[torch.Tensor, torch.Tensor | None]:
        dtype = self.time_embed.net[0].weight.dtype
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(batch)
        emb = self.time_embed(t)
        ctx = None
        if self.cond_embed is not None:
            if cond is None:
                cond = torch.zeros(batch, self.config.cond_dim, dtype=dtype)
            cond = torch.as_tensor(cond, dtype=dtype)
            if cond.dim() == 1:
                cond = cond.expand(batch, -1)
            emb = emb + self.cond_embed(cond)
            ctx = self.context_proj(cond).view(batch, self.config.context_tokens, self.config.cond_dim)
        if self.fps_embed is not None and fps is not None:
            emb = emb + self.fps_embed(fps, batch=batch)
        return emb, ctx

    def forward(self, x, t, fps=None, cond=None, extra=None) -> torch.Tensor:
        if extra is not None:
            if extra.dim() != x.dim():
                raise InvalidShapeError(f"extra channels rank {extra.dim()} != input rank {x.dim()}")
            x = torch.cat([x, extra], dim=1)
        if x.shape[1] != self.config.in_channels:
            raise InvalidShapeError(f"model expects {self.config.in_channels} input channels, got {x.shape[1]}")
        image_input = x.dim() == 4
        if self.mode == "video3d":
            if image_input:
                raise InvalidShapeError("video3d model needs a (B,C,F,H,W) input")
            if fps is None:
                raise MissingConditionError("video3d model requires an fps condition")
        if image_input:
            x = x.unsqueeze(2)
        if x.dim() != 5:
            raise InvalidShapeError(f"expected rank 4 or 5 input, got shape {tuple(x.shape)}")
        down_factor = 2 ** (self.config.levels - 1)
        if x.shape[-1] % down_factor or x.shape[-2] % down_factor:
            raise InvalidShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {down_factor}")

        emb, ctx = self.embed(x.shape[0], t, fps, cond)
        h = self.conv_in(x)
        skips = []
        for lvl, level in enumerate(self.down):
            h = level(h, emb, ctx)
            skips.append(h)
            if lvl < self.config.levels - 1:
                h = _downsample(h)
        h = self.mid(h, emb, ctx)
        for i, level in enumerate(self.up):
            h = torch.cat([h, skips.pop()], dim=1)
            h = level(h, emb, ctx)
            if i < len(self.upsample):
                h = self.upsample[i](h)
        h = self.conv_out(F.silu(self.norm_out(h)))
        return h.squeeze(2) if image_input else h


def build_image_unet(config: UNetConfig, seed: int | None = None) -> UNet:
    if config.mode != "image2d":
        raise UnsupportedConfigError("build_image_unet needs an image2d config")
    if seed is None:
        return UNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(config)


def inflate_to_video(model: UNet, seed: int | None = None) -> UNet:
    """Return a video3d copy of an image2d model that computes the same per-frame function."""
    if model.mode != "image2d":
        raise InvalidStateError("model is already in video3d mode")
    video = copy.deepcopy(model)
    video.config = replace(model.config, mode="video3d")
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        video._add_temporal()
    return video


def widen_input(model: UNet, role: Role) -> UNet:
    """Copy of ``model`` whose first conv accepts the channel count of ``role``.

    The added input-channel slices are zero, so the widened model ignores the
    new channels until it is trained.
    """
    new_in = ROLE_IN_CHANNELS[role]
    old = model.conv_in.spatial
    if new_in < old.in_channels:
        raise UnsupportedConfigError("widen_input cannot remove channels")
    wide = copy.deepcopy(model)
    wide.config = replace(model.config, role=role, in_channels=new_in)
    conv = nn.Conv2d(new_in, old.out_channels, old.kernel_size, padding=old.padding).to(old.weight)
    with torch.no_grad():
        conv.weight.zero_()
        conv.weight[:, : old.in_channels] = old.weight
        conv.bias.copy_(old.bias)
    wide.conv_in.spatial = conv
    wide.conv_in.in_channels = new_in
    return wide


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

