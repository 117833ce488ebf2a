"""Synthetic moving-shape videos with a known frame rate.

Every spec describes a continuous-time trajectory on a 16x16 reference
canvas. A clip is 16 frames sampled at ``fps`` from that trajectory starting at
a seed-dependent time, so the per-frame displacement is ``speed / fps``:
low fps means large motion between frames. The same scene can be rendered at
any resolution for the super-resolution stages.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from .errors import InvalidArgumentError

REFERENCE_CANVAS = 16
NATIVE_RATE = 30
FPS_MIN, FPS_MAX = 1, 30

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.2),
    "blue": (0.2, 0.35, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "magenta": (0.95, 0.2, 0.9),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.55, 0.1),
}
DIRECTIONS = ("right", "left", "up", "down")


def fold(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Position of a point bouncing between ``lo`` and ``hi`` given its unfolded position."""
    span = hi - lo
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    color: str
    trajectory: str = "linear"
    size: float = 3.0
    start: tuple[float, float] = (8.0, 8.0)
    velocity: tuple[float, float] = (10.0, 0.0)
    radius: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    canvas: tuple[int, int] = (REFERENCE_CANVAS, REFERENCE_CANVAS)
    native_rate: int = NATIVE_RATE
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise InvalidArgumentError(f"unknown shape {self.kind!r}")
        if self.color not in COLORS:
            raise InvalidArgumentError(f"unknown color {self.color!r}")
        if self.trajectory not in ("linear", "circular"):
            raise InvalidArgumentError(f"unknown trajectory {self.trajectory!r}")
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))

    @property
    def speed(self) -> float:
        if self.trajectory == "linear":
            return math.hypot(*self.velocity)
        return abs(self.radius * self.omega)

    def position(self, times: np.ndarray) -> np.ndarray:
        """Object centre ``(x, y)`` at each time, shape ``(N, 2)``; reflective walls."""
        times = np.asarray(times, dtype=np.float64)
        h, w = self.canvas
        if self.trajectory == "circular":
            ang = self.phase + self.omega * times
            x = self.start[0] + self.radius * np.cos(ang)
            y = self.start[1] + self.radius * np.sin(ang)
        else:
            x = self.start[0] + self.velocity[0] * times
            y = self.start[1] + self.velocity[1] * times
        x = fold(x, self.size, w - self.size)
        y = fold(y, self.size, h - self.size)
        return np.stack([x, y], axis=-1)

    def caption(self) -> str:
        if self.trajectory == "circular":
            return f"{self.color} {self.kind} circling"
        vx, vy = self.velocity
        if abs(vx) >= abs(vy):
            direction = "right" if vx >= 0 else "left"
        else:
            direction = "down" if vy >= 0 else "up"
        return f"{self.color} {self.kind} moving {direction}"

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["start"] = list(self.start)
        rec["velocity"] = list(self.velocity)
        rec["canvas"] = list(self.canvas)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticSpec":
        return cls(**rec)


def _inside(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upright isosceles triangle, apex at top, base width 2r, height 2r
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)


def render_frames(spec: SyntheticSpec, times: Sequence[float], resolution: int = REFERENCE_CANVAS,
                  supersample: int = 4) -> np.ndarray:
    """Anti-aliased frames in [-1, 1], shape ``(3, N, res, res)``; black background."""
    centers = spec.position(np.asarray(times))
    h, w = spec.canvas
    n = resolution * supersample
    ys = (np.arange(n) + 0.5) / n * h
    xs = (np.arange(n) + 0.5) / n * w
    dx = xs[None, None, :] - centers[:, 0, None, None]
    dy = ys[None, :, None] - centers[:, 1, None, None]
    cover = _inside(spec.kind, dx, dy, spec.size).astype(np.float64)
    cover = cover.reshape(len(centers), resolution, supersample, resolution, supersample).mean(axis=(2, 4))
    color = np.asarray(COLORS[spec.color])[:, None, None, None]
    return (cover[None] * color * 2.0 - 1.0).astype(np.float32)


def clip_start_time(seed: int) -> float:
    return float(np.random.default_rng(seed).uniform(0.0, 10.0))


def render_clip(spec: SyntheticSpec, fps: int, frames: int = 16, seed: int = 0,
                resolution: int = REFERENCE_CANVAS) -> tuple[torch.Tensor, str]:
    """``frames`` frames sampled at ``fps`` from the continuous trajectory.

    Returns a ``(1, 3, F, res, res)`` tensor in [-1, 1] and the caption.
    """
    if not FPS_MIN <= fps <= FPS_MAX or int(fps) != fps:
        raise InvalidArgumentError(f"fps must be an integer in [{FPS_MIN}, {FPS_MAX}], got {fps}")
    times = clip_start_time(seed) + np.arange(frames) / fps
    video = render_frames(spec, times, resolution)
    return torch.from_numpy(video).unsqueeze(0), spec.caption()


def random_spec(rng: np.random.Generator, seed: int = 0) -> SyntheticSpec:
    kind = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    size = float(rng.uniform(2.5, 3.5))
    lim = REFERENCE_CANVAS - size
    if rng.random() < 0.75:
        speed = rng.uniform(6.0, 20.0)
        ang = rng.uniform(0, 2 * math.pi)
        return SyntheticSpec(
            kind, color, "linear", size,
            start=(rng.uniform(size, lim), rng.uniform(size, lim)),
            velocity=(speed * math.cos(ang), speed * math.sin(ang)),
            seed=seed,
        )
    radius = float(rng.uniform(2.0, 3.5))
    lo, hi = size + radius, REFERENCE_CANVAS - size - radius
    omega = float(rng.uniform(0.8, 2.5)) * (1 if rng.random() < 0.5 else -1)
    return SyntheticSpec(
        kind, color, "circular", size,
        start=(rng.uniform(lo, hi), rng.uniform(lo, hi)),
        radius=radius, omega=omega, phase=float(rng.uniform(0, 2 * math.pi)),
        seed=seed,
    )


def generate_corpus(n: int, seed: int = 0) -> list[SyntheticSpec]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [random_spec(np.random.default_rng(int(s)), seed=int(s)) for s in seeds]


def write_manifest(path: str | Path, specs: Iterable[SyntheticSpec]) -> None:
    """One JSON record per line, keys sorted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for spec in specs:
            fh.write(json.dumps(spec.to_record(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[SyntheticSpec]:
    with open(path) as fh:
        return [SyntheticSpec.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class CurriculumState:
    """Beta parameters interpolated linearly from ``start`` to ``end`` over training."""

    step: int
    total_steps: int
    start: tuple[float, float] = (5.0, 1.0)
    end: tuple[float, float] = (1.0, 3.0)

    @property
    def progress(self) -> float:
        if self.total_steps <= 0:
            return 1.0
        return min(max(self.step / self.total_steps, 0.0), 1.0)

    @property
    def beta_params(self) -> tuple[float, float]:
        p = self.progress
        a = self.start[0] + p * (self.end[0] - self.start[0])
        b = self.start[1] + p * (self.end[1] - self.start[1])
        return a, b

    def expected_fps(self) -> float:
        return float(np.dot(np.arange(FPS_MIN, FPS_MAX + 1), fps_marginal(*self.beta_params)))


def fps_from_unit(u):
    """Map u in [0, 1] to an integer fps in [1, 30] via floor(1 + 29 u)."""
    return np.clip(np.floor(1 + 29 * np.asarray(u)), FPS_MIN, FPS_MAX).astype(int)


def sample_fps(cur: CurriculumState, rng: np.random.Generator, size: int | None = None):
    a, b = cur.beta_params
    out = fps_from_unit(rng.beta(a, b, size=size))
    return int(out) if size is None else out


def fps_marginal(a: float, b: float) -> np.ndarray:
    """Exact probability of each fps in 1..30 under ``sample_fps``."""
    edges = np.arange(0, 30) / 29.0
    cdf = stats.beta(a, b).cdf(np.append(edges, 1.0))
    probs = np.diff(cdf)[:29]
    return np.append(probs, 0.0)


@dataclass
class Batch:
    clips: torch.Tensor
    fps: torch.Tensor
    captions: list[str]
    specs: list[SyntheticSpec]
    targets: torch.Tensor | None = None
    seeds: list[int] = field(default_factory=list)


def make_batch(
    corpus: Sequence[SyntheticSpec],
    batch_size: int,
    cur: CurriculumState,
    rng: np.random.Generator,
    *,
    frames: int = 16,
    resolution: int = REFERENCE_CANVAS,
    embed_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
    fps: int | None = None,
) -> Batch:
    """Draw ``batch_size`` clips; item ``i`` depends only on its own derived seed.

    ``embed_fn`` maps a clip batch to conditioning targets; ``fps`` pins the
    frame rate instead of drawing it from the curriculum.
    """
    if not corpus:
        raise InvalidArgumentError("corpus is empty")
    item_seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=batch_size)]
    clips, rates, captions, specs = [], [], [], []
    for s in item_seeds:
        r = np.random.default_rng(s)
        spec = corpus[int(r.integers(len(corpus)))]
        rate = sample_fps(cur, r) if fps is None else fps
        clip, caption = render_clip(spec, rate, frames, int(r.integers(2**31)), resolution)
        clips.append(clip)
        rates.append(rate)
        captions.append(caption)
        specs.append(spec)
    clips_t = torch.cat(clips)
    targets = embed_fn(clips_t) if embed_fn is not None else None
    return Batch(clips_t, torch.tensor(rates), captions, specs, targets, item_seeds)
