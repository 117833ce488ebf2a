"""Video tensor layout and the reshapes used to run 2D and 1D layers on video.

All video tensors are row-major ``(B, C, F, H, W)``. The three views below are
pure re-indexings; none of them changes a value.

* spatial-batch ``(B*F, C, H, W)``: element ``(b, c, f, y, x)`` lands at
  ``(b*F + f, c, y, x)``. Lets per-frame 2D layers see every frame.
* temporal-batch ``(B*H*W, C, F)``: element ``(b, c, f, y, x)`` lands at
  ``(b*H*W + y*W + x, c, f)``. Lets 1D layers see every pixel's time series.
* spatial-flat ``(B, C, F, H*W)``: spatial axes merged in row-major order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from einops import rearrange

from .errors import InvalidShapeError

ViewKind = Literal["spatial-batch", "temporal-batch", "spatial-flat"]


def check_video(h: torch.Tensor, name: str = "h") -> tuple[int, int, int, int, int]:
    if h.dim() != 5:
        raise InvalidShapeError(f"{name} must be rank-5 (B,C,F,H,W), got shape {tuple(h.shape)}")
    if any(d <= 0 for d in h.shape):
        raise InvalidShapeError(f"{name} has a zero dimension: {tuple(h.shape)}")
    return tuple(h.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class AxisView:
    """A re-indexed video tensor that remembers how to go back.

    ``restore`` accepts replacement data whose channel axis may differ from the
    original (a conv changes C); every other axis must still agree.
    """

    data: torch.Tensor
    kind: ViewKind
    origin_shape: tuple[int, int, int, int, int]

    def restore(self, data: torch.Tensor | None = None) -> torch.Tensor:
        data = self.data if data is None else data
        b, _, f, h, w = self.origin_shape
        if self.kind == "spatial-batch":
            if data.dim() != 4 or data.shape[0] != b * f or tuple(data.shape[2:]) != (h, w):
                raise InvalidShapeError(f"cannot restore {tuple(data.shape)} to origin {self.origin_shape}")
            return rearrange(data, "(b f) c h w -> b c f h w", b=b, f=f)
        if self.kind == "temporal-batch":
            if data.dim() != 3 or data.shape[0] != b * h * w or data.shape[2] != f:
                raise InvalidShapeError(f"cannot restore {tuple(data.shape)} to origin {self.origin_shape}")
            return rearrange(data, "(b h w) c f -> b c f h w", b=b, h=h, w=w)
        return unflatten_spatial(data, self.origin_shape)


def to_spatial_batch(h: torch.Tensor) -> AxisView:
    shape = check_video(h)
    return AxisView(rearrange(h, "b c f h w -> (b f) c h w"), "spatial-batch", shape)


def to_temporal_batch(h: torch.Tensor) -> AxisView:
    shape = check_video(h)
    return AxisView(rearrange(h, "b c f h w -> (b h w) c f"), "temporal-batch", shape)


def flatten_spatial(h: torch.Tensor) -> AxisView:
    shape = check_video(h)
    return AxisView(rearrange(h, "b c f h w -> b c f (h w)"), "spatial-flat", shape)


def unflatten_spatial(v: torch.Tensor | AxisView, origin_shape: tuple[int, ...] | None = None) -> torch.Tensor:
    if isinstance(v, AxisView):
        if v.kind != "spatial-flat":
            raise InvalidShapeError(f"expected a spatial-flat view, got {v.kind}")
        origin_shape = v.origin_shape if origin_shape is None else origin_shape
        v = v.data
    if origin_shape is None or len(origin_shape) != 5:
        raise InvalidShapeError("unflatten_spatial needs a rank-5 origin shape")
    b, _, f, h, w = origin_shape
    if v.dim() != 4 or v.shape[0] != b or v.shape[2] != f or v.shape[3] != h * w:
        raise InvalidShapeError(f"spatial-flat tensor {tuple(v.shape)} does not match origin {tuple(origin_shape)}")
    return rearrange(v, "b c f (h w) -> b c f h w", h=h, w=w)


def frames_as_batch(x: torch.Tensor) -> torch.Tensor:
    """``(B,C,F,H,W) -> (B*F,C,H,W)``; the raw-tensor form of ``to_spatial_batch``."""
    return rearrange(x, "b c f h w -> (b f) c h w")


def batch_as_frames(x: torch.Tensor, frames: int) -> torch.Tensor:
    return rearrange(x, "(b f) c h w -> b c f h w", f=frames)


def resize_frames(x: torch.Tensor, size: int, mode: str = "bicubic") -> torch.Tensor:
    """Resize every frame of a 4D image batch or 5D video to ``size`` x ``size``.

    ``area`` is used for downsampling, ``bicubic`` for upsampling; bicubic
    overshoot is clamped back into [-1, 1].
    """
    video = x.dim() == 5
    frames = frames_as_batch(x) if video else x
    kwargs = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    out = F.interpolate(frames, size=(size, size), mode=mode, **kwargs)
    if mode == "bicubic":
        out = out.clamp(-1, 1)
    return batch_as_frames(out, x.shape[2]) if video else out
