"""Cost accounting for pseudo-3D vs full 3D convs, and small video metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError, InvalidShapeError
from .layers import P3DConv

PSNR_CAP = 99.0


@dataclass(frozen=True)
class CostReport:
    layer: str
    params_p3d: int
    params_full3d: int
    flops_p3d: int
    flops_full3d: int

    @property
    def ratio(self) -> float:
        return self.params_p3d / self.params_full3d

    @property
    def flop_ratio(self) -> float:
        return self.flops_p3d / self.flops_full3d

    def to_record(self) -> dict:
        return {**asdict(self), "ratio": self.ratio, "flop_ratio": self.flop_ratio}


def count_conv_costs(cin: int, cout: int, k: int, k_t: int, input_shape: tuple[int, ...]) -> CostReport:
    """Closed-form parameter and multiply-add counts, same padding, stride 1.

    FLOPs are multiply-adds per output element (one per weight tap plus one
    for the bias) times the number of output elements.
    """
    if min(cin, cout, k, k_t) < 1:
        raise InvalidArgumentError("channel and kernel sizes must be positive")
    if k % 2 == 0 or k_t % 2 == 0:
        raise InvalidArgumentError("kernels must be odd for same padding")
    if len(input_shape) != 5 or input_shape[1] != cin or min(input_shape) < 1:
        raise InvalidShapeError(f"input shape {input_shape} is not (B,{cin},F,H,W)")
    b, _, f, h, w = input_shape
    outputs = b * cout * f * h * w
    spatial = cout * cin * k * k + cout
    temporal = cout * cout * k_t + cout
    full = cout * cin * k * k * k_t + cout
    return CostReport(
        layer=f"conv {cin}->{cout} k={k} k_t={k_t}",
        params_p3d=spatial + temporal,
        params_full3d=full,
        flops_p3d=(cin * k * k + 1) * outputs + (cout * k_t + 1) * outputs,
        flops_full3d=(cin * k * k * k_t + 1) * outputs,
    )


def enumerate_conv_params(cin: int, cout: int, k: int, k_t: int) -> tuple[int, int]:
    """Parameter counts read off constructed layers rather than a formula."""
    p3d = P3DConv(cin, cout, k, temporal_kernel=k_t)
    full = nn.Conv3d(cin, cout, (k_t, k, k), padding=(k_t // 2, k // 2, k // 2))
    return sum(p.numel() for p in p3d.parameters()), sum(p.numel() for p in full.parameters())


def asymptotic_ratio(k: int, k_t: int) -> float:
    return (k * k + k_t) / (k * k * k_t)


def temporal_consistency(video: torch.Tensor) -> float:
    """Mean absolute difference between consecutive frames; 0 for a still video."""
    if video.dim() != 5:
        raise InvalidShapeError("temporal_consistency needs a (B,C,F,H,W) video")
    if video.shape[2] < 2:
        raise InvalidShapeError("temporal_consistency needs at least 2 frames")
    return float((video[:, :, 1:] - video[:, :, :-1]).abs().double().mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for signals in [-1, 1] (peak-to-peak 2); identical inputs give 99."""
    if a.shape != b.shape:
        raise InvalidShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(4.0 / mse))


def classify_shape(frame: torch.Tensor, threshold: float = -0.5) -> str:
    """Name the single shape in a ``(3,H,W)`` frame from how much of its bounding box it fills.

    Squares fill their box, discs about pi/4 of it, upright triangles half.
    """
    fg = (frame.max(dim=0).values > threshold).numpy()
    ys, xs = np.nonzero(fg)
    if len(ys) == 0:
        return "none"
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = len(ys) / box
    if fill > 0.89:
        return "square"
    if fill > 0.64:
        return "circle"
    return "triangle"


def classify_video(video: torch.Tensor) -> str:
    """Majority vote of ``classify_shape`` over the frames of a ``(3,F,H,W)`` clip."""
    votes = [classify_shape(video[:, f]) for f in range(video.shape[1])]
    return max(set(votes), key=votes.count)


def cost_table(reports: list[CostReport]) -> str:
    head = f"{'layer':<28}{'params_p3d':>12}{'params_3d':>12}{'ratio':>8}{'flops_p3d':>14}{'flops_3d':>14}"
    rows = [
        f"{r.layer:<28}{r.params_p3d:>12}{r.params_full3d:>12}{r.ratio:>8.4f}{r.flops_p3d:>14}{r.flops_full3d:>14}"
        for r in reports
    ]
    return "\n".join([head, *rows])


def write_cost_report(reports: list[CostReport], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "costs.txt"
    table.write_text(cost_table(reports) + "\n")
    record = out / "costs.json"
    record.write_text(json.dumps([r.to_record() for r in reports], indent=2, sort_keys=True) + "\n")
    return table, record
