"""End-to-end text-to-video cascade and its two application modes.

    prior -> video decoder -> frame interpolation -> spatiotemporal SR -> per-frame SR

Each stage is a separately trained checkpoint. The frame rate passed by the
caller conditions the decoder; after interpolation with skip ``s`` the video
runs at ``s`` times that rate and the later stages are conditioned on it. Both
rates are reported, nothing is resampled behind the caller's back.
"""
from __future__ import annotations

import copy
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import header_checksum, load_unet
from .core import resize_frames
from .data import FPS_MAX, FPS_MIN
from .diffusion import NoiseSchedule, ddpm_sample, trajectory_seed
from .errors import ConfigurationError, InvalidArgumentError, InvalidShapeError
from .interpolation import animate, interpolate, make_masked_input
from .prior import load_module
from .training import CKPT_FILES, PRESETS

OPTIONAL_STAGES = ("interp", "sr_l_t", "sr_h")
PIPELINE_STAGES = {"prior": "prior", "encoder": "encoder", "decoder": "video-decoder",
                   "interp": "interp", "sr_l_t": "sr-l-t", "sr_h": "sr-h"}


@dataclass
class PipelineConfig:
    checkpoint_dir: Path
    resolutions: tuple[int, int, int] = (16, 32, 64)
    frames: int = 16
    skip: int = 5
    fps: int = 4
    seed: int = 0
    sample_steps: int | None = 50

    def __post_init__(self):
        self.checkpoint_dir = Path(self.checkpoint_dir)
        self.resolutions = tuple(self.resolutions)
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ConfigurationError(f"resolution chain must be strictly increasing: {self.resolutions}")
        if self.skip < 1:
            raise InvalidArgumentError("skip must be >= 1")

    @classmethod
    def for_preset(cls, checkpoint_dir, preset: str = "toy", **kw) -> "PipelineConfig":
        p = PRESETS[preset]
        kw.setdefault("sample_steps", p.sample_steps)
        return cls(checkpoint_dir, resolutions=p.resolutions, frames=p.frames, **kw)

    def path(self, role: str) -> Path:
        return self.checkpoint_dir / CKPT_FILES[PIPELINE_STAGES[role]]


@dataclass
class GenerationResult:
    video: torch.Tensor
    intermediates: dict[str, torch.Tensor]
    manifest: dict = field(default_factory=dict)


def normalized_manifest(manifest: dict) -> dict:
    """Manifest without wall-clock fields, for determinism comparisons."""
    out = copy.deepcopy(manifest)
    out.pop("timing", None)
    return out


def _clamp_fps(value: int) -> int:
    if not FPS_MIN <= value <= FPS_MAX:
        warnings.warn(f"conditioning fps {value} outside [{FPS_MIN}, {FPS_MAX}]; clamping", stacklevel=3)
    return int(min(max(value, FPS_MIN), FPS_MAX))


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        for role in PIPELINE_STAGES:
            if not cfg.path(role).exists():
                raise ConfigurationError(f"pipeline stage {role!r} missing: {cfg.path(role)} not found")
        self.prior, _ = load_module(cfg.path("prior"), "prior")
        self.encoder, _ = load_module(cfg.path("encoder"), "image_encoder")
        self.decoder, _ = load_unet(cfg.path("decoder"))
        self.interp, _ = load_unet(cfg.path("interp"))
        self.sr_l_t, _ = load_unet(cfg.path("sr_l_t"))
        self.sr_h, _ = load_unet(cfg.path("sr_h"))
        self.schedule = NoiseSchedule.linear()
        self.checksums = {role: header_checksum(cfg.path(role)) for role in PIPELINE_STAGES}
        self.check_compatibility()

    def check_compatibility(self) -> None:
        r0, r1, r2 = self.cfg.resolutions

        def need(ok: bool, a: str, b: str, why: str):
            if not ok:
                raise ConfigurationError(f"stages {a!r} and {b!r} are incompatible: {why}")

        dec, itp, srl, srh = (m.config for m in (self.decoder, self.interp, self.sr_l_t, self.sr_h))
        need(dec.mode == "video3d" and dec.role == "decoder", "decoder", "prior", "decoder must be a video3d decoder")
        need(dec.cond_dim == self.prior.embed_dim, "prior", "decoder",
             f"prior emits {self.prior.embed_dim}-d embeddings, decoder expects {dec.cond_dim}")
        need(self.encoder.embed_dim == dec.cond_dim, "encoder", "decoder", "embedding sizes differ")
        need(itp.role == "interp" and itp.mode == "video3d", "interp", "decoder", "interp must be a 7-channel video model")
        need(itp.cond_dim == dec.cond_dim, "decoder", "interp", "conditioning sizes differ")
        need(dec.resolution == r0, "decoder", "config", f"decoder trained at {dec.resolution}, chain starts at {r0}")
        need(itp.resolution == dec.resolution, "decoder", "interp", "resolutions differ")
        need(srl.role == "sr" and srl.mode == "video3d", "sr_l_t", "interp", "sr_l_t must be a video3d SR model")
        need(srl.resolution == r1, "interp", "sr_l_t", f"sr_l_t outputs {srl.resolution}, chain expects {r1}")
        need(srh.role == "sr" and srh.mode == "image2d", "sr_h", "sr_l_t", "sr_h must be a per-frame SR model")
        need(srh.resolution == r2, "sr_l_t", "sr_h", f"sr_h outputs {srh.resolution}, chain expects {r2}")

    # -- stages ---------------------------------------------------------------

    def _decode(self, cond, fps, seed):
        r0 = self.cfg.resolutions[0]
        shape = (1, 3, self.cfg.frames, r0, r0)
        return ddpm_sample(self.decoder, shape, self.schedule, cond=cond, fps=fps,
                           seed=trajectory_seed(seed, 1), steps=self.cfg.sample_steps)

    def _interpolate(self, video, cond, fps, seed):
        clip = make_masked_input(video, self.cfg.skip)
        return interpolate(self.interp, clip, fps, trajectory_seed(seed, 2), cond=cond,
                           schedule=self.schedule, steps=self.cfg.sample_steps)

    def _sr_l_t(self, video, fps, seed):
        size = video.shape[-1] * 2
        low = resize_frames(video, size, "bicubic")
        return ddpm_sample(self.sr_l_t, low.shape, self.schedule, fps=fps, extra=low,
                           seed=trajectory_seed(seed, 3), steps=self.cfg.sample_steps)

    def _sr_h(self, video, seed, shared_frame_noise=True):
        size = video.shape[-1] * 2
        low = resize_frames(video, size, "bicubic")
        return ddpm_sample(self.sr_h, low.shape, self.schedule, extra=low, seed=trajectory_seed(seed, 4),
                           shared_frame_noise=shared_frame_noise, steps=self.cfg.sample_steps)

    def run_chain(self, cond, fps: int, seed: int, skip_stages=(), mode: str = "t2v",
                  extra_meta: dict | None = None) -> GenerationResult:
        unknown = set(skip_stages) - set(OPTIONAL_STAGES)
        if unknown:
            raise InvalidArgumentError(f"cannot skip {sorted(unknown)}; optional stages are {OPTIONAL_STAGES}")
        start = time.time()
        timing, out = {}, {}
        fps = _clamp_fps(fps)

        def record(name, t0, value):
            timing[name] = round(time.time() - t0, 3)
            if not torch.isfinite(value).all():
                raise ConfigurationError(f"stage {name!r} produced non-finite values")
            out[name] = value
            return value

        t0 = time.time()
        video = record("decoder", t0, self._decode(cond, fps, seed))
        out_fps = fps
        if "interp" not in skip_stages:
            out_fps = fps * self.cfg.skip
            t0 = time.time()
            video = record("interp", t0, self._interpolate(video, cond, _clamp_fps(out_fps), seed))
        if "sr_l_t" not in skip_stages:
            t0 = time.time()
            video = record("sr_l_t", t0, self._sr_l_t(video, _clamp_fps(out_fps), seed))
        if "sr_h" not in skip_stages:
            t0 = time.time()
            video = record("sr_h", t0, self._sr_h(video, seed))
        timing["total"] = round(time.time() - start, 3)

        manifest = {
            "mode": mode,
            "fps": fps,
            "output_fps": out_fps,
            "seed": seed,
            "skip": self.cfg.skip if "interp" not in skip_stages else 1,
            "sample_steps": self.cfg.sample_steps,
            "frames": int(video.shape[2]),
            "resolution": int(video.shape[-1]),
            "stages": [s for s in ("decoder", *OPTIONAL_STAGES) if s in out],
            "stage_checksums": dict(self.checksums),
            "shapes": {k: list(v.shape) for k, v in out.items()},
            "timing": timing,
            **(extra_meta or {}),
        }
        return GenerationResult(video, out, manifest)

    # -- public modes ---------------------------------------------------------

    def generate(self, text: str, fps: int | None = None, seed: int | None = None, skip_stages=()) -> GenerationResult:
        fps = self.cfg.fps if fps is None else fps
        seed = self.cfg.seed if seed is None else seed
        cond = self.prior.generate(text, seed)[None]
        res = self.run_chain(cond, fps, seed, skip_stages, "t2v", {"text": text})
        res.intermediates["prior"] = cond
        return res

    @torch.no_grad()
    def animate_image(self, image: torch.Tensor, fps: int | None = None, seed: int | None = None,
                      text: str | None = None) -> GenerationResult:
        """16 frames at decoder resolution whose first frame is ``image``."""
        fps = _clamp_fps(self.cfg.fps if fps is None else fps)
        seed = self.cfg.seed if seed is None else seed
        if image.dim() == 3:
            image = image[None]
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-1] != self.cfg.resolutions[0] \
                or image.shape[-2] != self.cfg.resolutions[0]:
            raise InvalidShapeError(
                f"image must be (3,{self.cfg.resolutions[0]},{self.cfg.resolutions[0]}), got {tuple(image.shape)}")
        t0 = time.time()
        cond = self.encoder(image)
        video = animate(self.interp, image, self.cfg.frames, fps, trajectory_seed(seed, 5), cond=cond,
                        schedule=self.schedule, steps=self.cfg.sample_steps)
        manifest = {
            "mode": "animate", "fps": fps, "output_fps": fps, "seed": seed, "text": text,
            "sample_steps": self.cfg.sample_steps, "frames": int(video.shape[2]),
            "resolution": int(video.shape[-1]), "stages": ["interp"],
            "stage_checksums": dict(self.checksums), "shapes": {"interp": list(video.shape)},
            "timing": {"total": round(time.time() - t0, 3)},
        }
        return GenerationResult(video, {"interp": video}, manifest)

    def variation_condition(self, video: torch.Tensor) -> torch.Tensor:
        return self.encoder.embed_video(video)

    @torch.no_grad()
    def video_variation(self, video: torch.Tensor, seed: int | None = None, fps: int | None = None,
                        skip_stages=()) -> GenerationResult:
        """Regenerate a video from the mean embedding of its frames."""
        r0 = self.cfg.resolutions[0]
        if video.dim() != 5 or video.shape[1] != 3 or video.shape[-2:] != (r0, r0):
            raise InvalidShapeError(f"video must be (1,3,F,{r0},{r0}), got {tuple(video.shape)}")
        seed = self.cfg.seed if seed is None else seed
        cond = self.variation_condition(video)
        res = self.run_chain(cond, self.cfg.fps if fps is None else fps, seed, skip_stages, "variation")
        res.intermediates["condition"] = cond
        return res
