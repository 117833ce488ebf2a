"""Stage-by-stage training.

Stages are trained independently and in order; later stages start from
earlier checkpoints:

    image-decoder  image U-Net + image encoder, frames only
    prior          caption -> image embedding (encoder frozen)
    sr-l, sr-h     image super-resolution, x2 each
    video-decoder  inflated image-decoder, fine-tuned on clips with fps curriculum
    interp         video-decoder widened to 7 input channels, masked frames
    sr-l-t         inflated sr-l, fine-tuned on clips

Every stage writes ``<ckpt_dir>/<stage file>`` and a tab-separated loss log with
one line per step.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import header_checksum, load_unet, save_unet
from .core import resize_frames
from .data import CurriculumState, generate_corpus, make_batch, read_manifest, write_manifest
from .diffusion import NoiseSchedule, training_loss
from .errors import ConfigurationError, InvalidArgumentError
from .interpolation import finetune_interp_from_decoder, masked_channels, random_training_mask
from .prior import ImageEncoder, Prior, load_module, save_module
from .unet import UNetConfig, build_image_unet, inflate_to_video

log = logging.getLogger(__name__)

STAGES = ("image-decoder", "prior", "sr-l", "sr-h", "video-decoder", "interp", "sr-l-t")
CKPT_FILES = {
    "image-decoder": "image_decoder.npz",
    "encoder": "image_encoder.npz",
    "prior": "prior.npz",
    "sr-l": "sr_l.npz",
    "sr-h": "sr_h.npz",
    "video-decoder": "video_decoder.npz",
    "interp": "interp.npz",
    "sr-l-t": "sr_l_t.npz",
}
PREREQUISITES = {
    "prior": ("image-decoder", "the prior regresses embeddings of the image encoder trained with the image decoder"),
    "video-decoder": ("image-decoder", "the video decoder is inflated from the image decoder"),
    "interp": ("video-decoder", "the interpolation network is fine-tuned from the video decoder"),
    "sr-l-t": ("sr-l", "the spatiotemporal SR network is inflated from the image SR network"),
}
UNIFORM_FPS = ((1.0, 1.0), (1.0, 1.0))
# stages that start from another stage's trained weights
FINETUNE_STAGES = ("video-decoder", "interp", "sr-l-t")


@dataclass(frozen=True)
class Preset:
    """Model sizes, resolutions and default step counts for one scale of the stack."""

    name: str
    resolutions: tuple[int, int, int]
    frames: int
    embed_dim: int
    encoder_width: int
    decoder: UNetConfig
    sr: UNetConfig
    steps: dict[str, int]
    batch: dict[str, int]
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    ema_decay: float = 0.99
    corpus_size: int = 512
    sample_steps: int = 50

    def decoder_config(self) -> UNetConfig:
        return replace(self.decoder, resolution=self.resolutions[0], cond_dim=self.embed_dim)

    def sr_config(self, stage: str) -> UNetConfig:
        res = self.resolutions[1] if stage in ("sr-l", "sr-l-t") else self.resolutions[2]
        return replace(self.sr, resolution=res)


PRESETS = {
    "toy": Preset(
        name="toy",
        resolutions=(16, 32, 64),
        frames=16,
        embed_dim=64,
        encoder_width=16,
        decoder=UNetConfig(base_channels=24, channel_mults=(1, 2), attn_levels=(1,), heads=2, groups=8),
        sr=UNetConfig(base_channels=16, channel_mults=(1, 2), attn_levels=(), role="sr", in_channels=6, groups=8),
        steps={"image-decoder": 2000, "prior": 600, "sr-l": 800, "sr-h": 800,
               "video-decoder": 900, "interp": 700, "sr-l-t": 400},
        batch={"image-decoder": 32, "prior": 32, "sr-l": 16, "sr-h": 8,
               "video-decoder": 4, "interp": 4, "sr-l-t": 2},
    ),
    "micro": Preset(
        name="micro",
        resolutions=(8, 16, 32),
        frames=16,
        embed_dim=16,
        encoder_width=4,
        decoder=UNetConfig(base_channels=8, channel_mults=(1, 2), attn_levels=(1,), heads=2, groups=4),
        sr=UNetConfig(base_channels=8, channel_mults=(1,), attn_levels=(), role="sr", in_channels=6, groups=4),
        steps={s: 20 for s in STAGES},
        batch={"image-decoder": 8, "prior": 8, "sr-l": 4, "sr-h": 2,
               "video-decoder": 2, "interp": 2, "sr-l-t": 1},
        ema_decay=0.0,
        corpus_size=32,
        sample_steps=4,
    ),
}


@dataclass
class TrainSettings:
    stage: str
    ckpt_dir: Path
    preset: str = "toy"
    steps: int | None = None
    batch: int | None = None
    lr: float | None = None
    seed: int = 0
    data_dir: Path | None = None
    log_dir: Path | None = None
    cond_drop: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"unknown stage {self.stage!r}; choose from {', '.join(STAGES)}")
        if self.preset not in PRESETS:
            raise InvalidArgumentError(f"unknown preset {self.preset!r}")
        self.ckpt_dir = Path(self.ckpt_dir)

    @property
    def p(self) -> Preset:
        return PRESETS[self.preset]

    @property
    def n_steps(self) -> int:
        return self.steps if self.steps is not None else self.p.steps[self.stage]

    @property
    def batch_size(self) -> int:
        return self.batch if self.batch is not None else self.p.batch[self.stage]

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return self.p.finetune_lr if self.stage in FINETUNE_STAGES else self.p.lr

    def path(self, stage: str) -> Path:
        return self.ckpt_dir / CKPT_FILES[stage]

    def log_path(self) -> Path:
        return Path(self.log_dir or self.ckpt_dir) / f"{self.stage}_loss.tsv"


@dataclass
class TrainResult:
    stage: str
    checkpoint: Path
    losses: list[float] = field(default_factory=list)
    log_path: Path | None = None
    seconds: float = 0.0


def load_corpus(preset: Preset, data_dir: Path | None = None, seed: int = 0):
    """Read ``corpus.jsonl`` from the data directory, creating it on first use."""
    data_dir = data_dir or (Path(os.environ["PSEUDO3D_DATA_DIR"]) if os.environ.get("PSEUDO3D_DATA_DIR") else None)
    if data_dir is None:
        return generate_corpus(preset.corpus_size, seed)
    path = Path(data_dir) / f"corpus_{preset.name}.jsonl"
    if path.exists():
        return read_manifest(path)
    specs = generate_corpus(preset.corpus_size, seed)
    write_manifest(path, specs)
    return specs


def check_prerequisites(settings: TrainSettings) -> None:
    need = PREREQUISITES.get(settings.stage)
    if need is None:
        return
    stage, why = need
    if not settings.path(stage).exists():
        raise ConfigurationError(
            f"stage {settings.stage!r} needs a {stage!r} checkpoint at {settings.path(stage)} ({why}); "
            f"run `pseudo3d train --stage {stage}` first"
        )


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def sr_pair(hi: torch.Tensor) -> torch.Tensor:
    """Bicubic re-upsampling of the area-downsampled ``hi``: the SR condition channels."""
    size = hi.shape[-1]
    return resize_frames(resize_frames(hi, size // 2, "area"), size, "bicubic")


def fit(
    stage: str,
    params,
    step_fn: Callable[[int, np.random.Generator, torch.Generator], tuple[torch.Tensor, dict]],
    settings: TrainSettings,
    on_first_step: Callable[[], None] | None = None,
) -> list[float]:
    """Generic optimisation loop with a per-step TSV log.

    With ``ema_decay > 0`` the parameters are replaced by their exponential
    moving average when the loop ends, so that is what gets saved.
    """
    params = [p for p in params if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=settings.learning_rate, weight_decay=0.0)
    decay = settings.p.ema_decay
    ema = [p.detach().clone() for p in params] if decay > 0 else None
    gen = torch.Generator().manual_seed(settings.seed)
    total = settings.n_steps
    losses = []
    log_path = settings.log_path()
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as fh:
        fh.write("step\tloss\tbeta_a\tbeta_b\tmean_fps\n")
        for step in range(total):
            loss, info = step_fn(step, step_rng(settings.seed, step), gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    for e, p in zip(ema, params):
                        e.lerp_(p, 1 - decay)
            if step == 0 and on_first_step is not None:
                on_first_step()
            value = loss.item()
            losses.append(value)
            a, b = info.get("beta", (float("nan"), float("nan")))
            fh.write(f"{step}\t{value:.8f}\t{a:.4f}\t{b:.4f}\t{info.get('mean_fps', float('nan')):.3f}\n")
            if step % 100 == 0:
                log.info("%s step %d/%d loss %.4f", stage, step, total, value)
    if ema is not None:
        with torch.no_grad():
            for e, p in zip(ema, params):
                p.copy_(e)
    return losses


def _frames_only(batch):
    return batch.clips[:, :, 0]


def train_stage(settings: TrainSettings) -> TrainResult:
    check_prerequisites(settings)
    start = time.time()
    torch.manual_seed(settings.seed)
    p = settings.p
    corpus = load_corpus(p, settings.data_dir)
    sched = NoiseSchedule.linear()
    bsz = settings.batch_size
    stage = settings.stage
    res_lo, res_mid, res_hi = p.resolutions
    final = CurriculumState(1, 1)

    if stage == "image-decoder":
        model = build_image_unet(p.decoder_config(), seed=settings.seed)
        encoder = ImageEncoder(p.embed_dim, p.encoder_width)

        def step_fn(step, rng, gen):
            batch = make_batch(corpus, bsz, final, rng, frames=1, resolution=res_lo)
            images = _frames_only(batch)
            cond = encoder(images)
            return training_loss(model, images, sched, cond=cond, generator=gen, cond_drop=settings.cond_drop,
                                 step=step, stage=stage), {}

        losses = fit(stage, list(model.parameters()) + list(encoder.parameters()), step_fn, settings)
        save_module(settings.path("encoder"), encoder, {"stage": stage, "seed": settings.seed})
        out = settings.path(stage)
        save_unet(out, model, {"stage": stage, "seed": settings.seed})

    elif stage == "prior":
        encoder, _ = load_module(settings.path("encoder"), "image_encoder")
        encoder.requires_grad_(False)
        prior = Prior(embed_dim=p.embed_dim)

        def step_fn(step, rng, gen):
            batch = make_batch(corpus, bsz, final, rng, frames=4, resolution=res_lo)
            with torch.no_grad():
                target = encoder.embed_video(batch.clips)
            noise = torch.randn(bsz, prior.noise_dim, generator=gen)
            pred = prior(prior.text.pooled(batch.captions), noise)
            return (1 - (pred * target).sum(-1)).mean(), {}

        losses = fit(stage, prior.parameters(), step_fn, settings)
        out = settings.path(stage)
        save_module(out, prior, {"stage": stage, "seed": settings.seed,
                                 "encoder_checksum": header_checksum(settings.path("encoder"))})

    elif stage in ("sr-l", "sr-h"):
        model = build_image_unet(p.sr_config(stage), seed=settings.seed)
        res = res_mid if stage == "sr-l" else res_hi

        def step_fn(step, rng, gen):
            batch = make_batch(corpus, bsz, final, rng, frames=1, resolution=res)
            hi = _frames_only(batch)
            return training_loss(model, hi, sched, extra=sr_pair(hi), generator=gen, step=step, stage=stage), {}

        losses = fit(stage, model.parameters(), step_fn, settings)
        out = settings.path(stage)
        save_unet(out, model, {"stage": stage, "seed": settings.seed})

    elif stage == "video-decoder":
        image, _ = load_unet(settings.path("image-decoder"))
        encoder, _ = load_module(settings.path("encoder"), "image_encoder")
        encoder.requires_grad_(False)
        model = inflate_to_video(image, seed=settings.seed)
        model.train()
        total = settings.n_steps

        def step_fn(step, rng, gen):
            cur = CurriculumState(step, total)
            batch = make_batch(corpus, bsz, cur, rng, frames=p.frames, resolution=res_lo)
            with torch.no_grad():
                cond = encoder.embed_video(batch.clips)
            loss = training_loss(model, batch.clips, sched, cond=cond, fps=batch.fps, generator=gen,
                                 cond_drop=settings.cond_drop, step=step, stage=stage)
            return loss, {"beta": cur.beta_params, "mean_fps": float(batch.fps.float().mean())}

        losses = fit(stage, model.parameters(), step_fn, settings, on_first_step=model.mark_trained)
        out = settings.path(stage)
        save_unet(out, model, {"stage": stage, "seed": settings.seed,
                               "source_checksum": header_checksum(settings.path("image-decoder"))})

    elif stage == "interp":
        decoder, _ = load_unet(settings.path("video-decoder"))
        encoder, _ = load_module(settings.path("encoder"), "image_encoder")
        encoder.requires_grad_(False)
        model = finetune_interp_from_decoder(decoder)
        model.train()
        uniform = CurriculumState(0, 0, *UNIFORM_FPS)

        def step_fn(step, rng, gen):
            batch = make_batch(corpus, bsz, uniform, rng, frames=p.frames, resolution=res_lo)
            flags, skip, mode = random_training_mask(p.frames, rng)
            extra = masked_channels(batch.clips, flags)
            with torch.no_grad():
                cond = encoder.embed_video(batch.clips)
            loss = training_loss(model, batch.clips, sched, cond=cond, fps=batch.fps, extra=extra,
                                 generator=gen, step=step, stage=stage)
            return loss, {"beta": uniform.beta_params, "mean_fps": float(batch.fps.float().mean())}

        losses = fit(stage, model.parameters(), step_fn, settings)
        out = settings.path(stage)
        save_unet(out, model, {"stage": stage, "seed": settings.seed,
                               "source_checksum": header_checksum(settings.path("video-decoder"))})

    else:  # sr-l-t
        image, _ = load_unet(settings.path("sr-l"))
        model = inflate_to_video(image, seed=settings.seed)
        model.train()
        uniform = CurriculumState(0, 0, *UNIFORM_FPS)

        def step_fn(step, rng, gen):
            batch = make_batch(corpus, bsz, uniform, rng, frames=p.frames, resolution=res_mid)
            loss = training_loss(model, batch.clips, sched, fps=batch.fps, extra=sr_pair(batch.clips),
                                 generator=gen, step=step, stage=stage)
            return loss, {"beta": uniform.beta_params, "mean_fps": float(batch.fps.float().mean())}

        losses = fit(stage, model.parameters(), step_fn, settings, on_first_step=model.mark_trained)
        out = settings.path(stage)
        save_unet(out, model, {"stage": stage, "seed": settings.seed,
                               "source_checksum": header_checksum(settings.path("sr-l"))})

    return TrainResult(stage, out, losses, settings.log_path(), time.time() - start)


def train_all(ckpt_dir: str | Path, preset: str = "toy", seed: int = 0, data_dir=None,
              steps: dict[str, int] | None = None) -> list[TrainResult]:
    results = []
    for stage in STAGES:
        settings = TrainSettings(stage, Path(ckpt_dir), preset=preset, seed=seed, data_dir=data_dir,
                                 steps=(steps or {}).get(stage))
        results.append(train_stage(settings))
        log.info("trained %s in %.1fs", stage, results[-1].seconds)
    return results
