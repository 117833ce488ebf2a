"""Masked frame interpolation and extrapolation.

The interpolation network is a video decoder whose input is widened from 3 to
7 channels: the noisy video, the known frames with unknown frames zeroed, and
a binary per-frame mask. Interpolation, pre/post extrapolation and image
animation differ only in where the mask is 1.

Clips longer than the model's temporal attention window are processed in
windows that begin and end on known frames (interpolation) or that carry the
last known frames forward as context (extrapolation).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .core import check_video
from .diffusion import NoiseSchedule, ddpm_sample, trajectory_seed
from .errors import InvalidArgumentError, InvalidShapeError, InvalidStateError
from .unet import UNet, widen_input

Origin = Literal["interpolation", "extrapolate-pre", "extrapolate-post", "image-animation"]
TRAIN_SKIPS = (2, 3, 5)
TRAIN_MODES = ("interp", "pre", "post")


@dataclass(frozen=True)
class MaskedClip:
    frames: torch.Tensor  # (B, 3, F', H, W), zero where mask == 0
    mask: torch.Tensor  # (B, 1, F', H, W), 1 = frame given
    skip: int
    origin: Origin

    @property
    def num_frames(self) -> int:
        return self.frames.shape[2]

    def frame_mask(self) -> list[int]:
        return [int(v) for v in self.mask[0, 0, :, 0, 0].tolist()]

    def channels(self) -> torch.Tensor:
        """The 4 conditioning channels: masked RGB then mask."""
        return torch.cat([self.frames, self.mask], dim=1)


def interpolated_length(frames: int, skip: int) -> int:
    return (frames - 1) * skip + 1


def _mask_tensor(flags, like: torch.Tensor) -> torch.Tensor:
    b, _, _, h, w = like.shape
    m = torch.as_tensor(flags, dtype=like.dtype).view(1, 1, -1, 1, 1)
    return m.expand(b, 1, m.shape[2], h, w).contiguous()


def _assemble(given: torch.Tensor, positions: list[int], length: int) -> torch.Tensor:
    b, c, _, h, w = given.shape
    out = torch.zeros(b, c, length, h, w, dtype=given.dtype)
    out[:, :, positions] = given
    return out


def make_masked_input(given: torch.Tensor, skip: int) -> MaskedClip:
    """Spread ``F`` given frames ``skip`` apart; the ``skip - 1`` frames between are unknown."""
    check_video(given, "given")
    if skip < 1:
        raise InvalidArgumentError(f"skip must be >= 1, got {skip}")
    f = given.shape[2]
    if f < 2:
        raise InvalidArgumentError("interpolation needs at least 2 given frames")
    length = interpolated_length(f, skip)
    positions = list(range(0, length, skip))
    flags = np.zeros(length)
    flags[positions] = 1
    return MaskedClip(_assemble(given, positions, length), _mask_tensor(flags, given), skip, "interpolation")


def make_extrapolation_input(given: torch.Tensor, direction: Literal["pre", "post"], count: int) -> MaskedClip:
    """Known block followed (post) or preceded (pre) by ``count`` unknown frames."""
    check_video(given, "given")
    if count < 0:
        raise InvalidArgumentError(f"count must be >= 0, got {count}")
    if direction not in ("pre", "post"):
        raise InvalidArgumentError(f"direction must be 'pre' or 'post', got {direction!r}")
    f = given.shape[2]
    length = f + count
    positions = list(range(f)) if direction == "post" else list(range(count, length))
    flags = np.zeros(length)
    flags[positions] = 1
    origin: Origin = "extrapolate-post" if direction == "post" else "extrapolate-pre"
    if f == 1 and direction == "post":
        origin = "image-animation"
    return MaskedClip(_assemble(given, positions, length), _mask_tensor(flags, given), 1, origin)


def random_training_mask(frames: int, rng: np.random.Generator) -> tuple[np.ndarray, int, str]:
    """Per-batch mask: skip from {2,3,5} and mode from {interp, pre, post}, uniformly."""
    skip = int(rng.choice(TRAIN_SKIPS))
    mode = str(rng.choice(TRAIN_MODES))
    flags = np.zeros(frames)
    if mode == "interp":
        flags[::skip] = 1
    else:
        n = int(rng.integers(1, -(-frames // skip) + 1))
        if mode == "post":
            flags[:n] = 1
        else:
            flags[frames - n:] = 1
    return flags, skip, mode


def masked_channels(clips: torch.Tensor, flags) -> torch.Tensor:
    """Conditioning channels for training: clips zeroed where unknown, plus the mask."""
    mask = _mask_tensor(flags, clips)
    return torch.cat([clips * mask, mask], dim=1)


def finetune_interp_from_decoder(decoder: UNet) -> UNet:
    """Widen a trained video decoder's input from 3 to 7 channels (new slices zero)."""
    if decoder.mode != "video3d":
        raise InvalidStateError("interpolation is fine-tuned from a video3d decoder")
    if decoder.config.role != "decoder":
        raise InvalidStateError(f"expected a decoder, got role {decoder.config.role!r}")
    return widen_input(decoder, "interp")


def _check_model(model: UNet) -> None:
    if getattr(model, "config", None) is not None and model.config.in_channels != 7:
        raise InvalidShapeError(f"interpolation model needs 7 input channels, got {model.config.in_channels}")


def _per_item(value, repeats: int, batch: int):
    """Repeat a per-batch-item tensor for ``repeats`` windows laid out item-major."""
    if value is None:
        return None
    v = torch.as_tensor(value)
    if v.dim() == 0:
        return v
    if v.shape[0] != batch:
        raise InvalidShapeError(f"per-item condition has batch {v.shape[0]}, expected {batch}")
    return v.repeat_interleave(repeats, dim=0)


def sample_masked(model, frames, mask, *, fps, cond=None, seed=0, schedule=None, steps=None) -> torch.Tensor:
    """One diffusion pass over a window whose length the model supports."""
    schedule = schedule or NoiseSchedule.linear()
    extra = torch.cat([frames * mask, mask], dim=1)
    return ddpm_sample(
        model, frames.shape, schedule, cond=cond, fps=fps, extra=extra, seed=seed,
        steps=steps, known=frames, known_mask=mask,
    )


def _window_limit(model) -> int:
    cfg = getattr(model, "config", None)
    return cfg.max_frames if cfg is not None else 16


def interpolate(model, clip: MaskedClip, fps, seed: int = 0, *, cond=None, schedule=None, steps=None) -> torch.Tensor:
    """Fill the unknown frames of ``clip``; given frames are returned verbatim."""
    _check_model(model)
    limit = _window_limit(model)
    n = clip.num_frames
    if n <= limit or clip.origin != "interpolation":
        if n > limit:
            raise InvalidShapeError(f"{clip.origin} clip of {n} frames exceeds the {limit}-frame window")
        return sample_masked(model, clip.frames, clip.mask, fps=fps, cond=cond, seed=seed,
                             schedule=schedule, steps=steps)
    s = clip.skip
    per_window = max(1, (limit - 1) // s)
    segments = (n - 1) // s
    bounds = [(g, min(g + per_window, segments)) for g in range(0, segments, per_window)]
    out = clip.frames.clone()
    b = clip.frames.shape[0]
    # windows of equal length are sampled together as one batch
    by_len: dict[int, list[tuple[int, int]]] = {}
    for g0, g1 in bounds:
        by_len.setdefault(g1 - g0, []).append((g0, g1))
    for group, (segs, wins) in enumerate(sorted(by_len.items())):
        frames = torch.cat([clip.frames[i : i + 1, :, g0 * s : g1 * s + 1] for i in range(b) for g0, g1 in wins])
        mask = torch.cat([clip.mask[i : i + 1, :, g0 * s : g1 * s + 1] for i in range(b) for g0, g1 in wins])
        res = sample_masked(
            model, frames, mask,
            fps=_per_item(fps, len(wins), b), cond=_per_item(cond, len(wins), b),
            seed=trajectory_seed(seed, group), schedule=schedule, steps=steps,
        )
        k = 0
        for i in range(b):
            for g0, g1 in wins:
                out[i, :, g0 * s : g1 * s + 1] = res[k]
                k += 1
    # window edges are given frames; restate them so overlaps cannot drift
    return clip.mask * clip.frames + (1 - clip.mask) * out


def extrapolate(model, given: torch.Tensor, direction: Literal["pre", "post"], count: int, fps, seed: int = 0,
                *, cond=None, schedule=None, steps=None, context: int | None = None) -> torch.Tensor:
    """Generate ``count`` new frames before or after ``given``.

    Long extensions run window by window, each conditioned on the most recent
    ``context`` frames (default: half the window).
    """
    _check_model(model)
    clip = make_extrapolation_input(given, direction, count)
    if count == 0:
        return given.clone()
    limit = _window_limit(model)
    if clip.num_frames <= limit:
        return sample_masked(model, clip.frames, clip.mask, fps=fps, cond=cond, seed=seed,
                             schedule=schedule, steps=steps)
    context = context or limit // 2
    video = given if direction == "post" else given.flip(2)
    remaining, window = count, 0
    while remaining > 0:
        ctx = video[:, :, -min(context, video.shape[2]):]
        new = min(remaining, limit - ctx.shape[2])
        part = make_extrapolation_input(ctx if direction == "post" else ctx.flip(2), direction, new)
        res = sample_masked(model, part.frames, part.mask, fps=fps, cond=cond,
                            seed=trajectory_seed(seed, window), schedule=schedule, steps=steps)
        res = res if direction == "post" else res.flip(2)
        video = torch.cat([video, res[:, :, ctx.shape[2]:]], dim=2)
        remaining -= new
        window += 1
    return video if direction == "post" else video.flip(2)


def animate(model, image: torch.Tensor, frames: int = 16, fps=4, seed: int = 0, *, cond=None,
            schedule=None, steps=None) -> torch.Tensor:
    """Extrapolate a single still ``(B,3,H,W)`` into ``frames`` frames; frame 0 is the image."""
    if image.dim() != 4:
        raise InvalidShapeError(f"image must be (B,3,H,W), got {tuple(image.shape)}")
    return extrapolate(model, image.unsqueeze(2), "post", frames - 1, fps, seed, cond=cond,
                       schedule=schedule, steps=steps)
