"""Writing generated videos to disk: per-frame PNGs, one animated PNG, a manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidShapeError


def to_uint8(x: torch.Tensor | np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 by rint(255 * (x + 1) / 2), clipping out-of-range values first.

    rint rounds halves to even, so 0.0 maps to 128 (127.5 -> 128) and -1, 1 map to 0, 255.
    """
    a = x.detach().cpu().double().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)
    a = np.clip(a, -1.0, 1.0)
    return np.rint(255.0 * (a + 1.0) / 2.0).astype(np.uint8)


def from_uint8(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(a.astype(np.float32) / 127.5 - 1.0)


def video_frames(video: torch.Tensor) -> list[np.ndarray]:
    """``(1,3,F,H,W)`` or ``(3,F,H,W)`` video to a list of ``(H,W,3)`` uint8 frames."""
    if video.dim() == 5:
        if video.shape[0] != 1:
            raise InvalidShapeError("write one video at a time")
        video = video[0]
    if video.dim() != 4 or video.shape[0] != 3:
        raise InvalidShapeError(f"expected (3,F,H,W), got {tuple(video.shape)}")
    return list(to_uint8(video.permute(1, 2, 3, 0)))


def load_image(path: str | Path, resolution: int | None = None) -> torch.Tensor:
    """Read an RGB image as ``(1,3,H,W)`` in [-1, 1]; no resizing is done."""
    img = np.asarray(Image.open(path).convert("RGB"))
    t = from_uint8(img).permute(2, 0, 1)[None]
    if resolution is not None and tuple(t.shape[-2:]) != (resolution, resolution):
        raise InvalidShapeError(f"{path}: image is {t.shape[-1]}x{t.shape[-2]}, expected {resolution}x{resolution}")
    return t


def save_image(path: str | Path, image: torch.Tensor) -> None:
    """Write a ``(3,H,W)`` or ``(1,3,H,W)`` tensor in [-1, 1] as PNG."""
    if image.dim() == 4:
        image = image[0]
    Image.fromarray(to_uint8(image.permute(1, 2, 0))).save(path)


def write_video(out_dir: str | Path, video: torch.Tensor, playback_fps: float, manifest: dict) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = video_frames(video)
    width = max(3, len(str(len(frames) - 1)))
    paths = []
    for i, frame in enumerate(frames):
        p = out / f"frame_{i:0{width}d}.png"
        Image.fromarray(frame).save(p)
        paths.append(p)
    anim = out / "video.png"
    images = [Image.fromarray(f) for f in frames]
    duration = int(round(1000.0 / playback_fps))
    images[0].save(anim, save_all=True, append_images=images[1:], duration=duration, loop=0)
    record = dict(manifest)
    record["playback_fps"] = playback_fps
    record["files"] = {"frames": [p.name for p in paths], "animation": anim.name}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return {"manifest": mpath, "animation": anim, "first_frame": paths[0]}
