"""Command-line entry point: ``pseudo3d {train,inflate,generate,check,bench}``.

Exit codes: 0 success, 2 bad arguments, 3 configuration errors (missing or
incompatible checkpoints, bad config files), 4 numerical failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .checkpoint import header_checksum, load_unet, save_unet
from .config import RunConfig, resolve
from .errors import ConfigurationError, InvalidArgumentError, InvalidStateError, Pseudo3DError

log = logging.getLogger("pseudo3d")

EXIT_OK, EXIT_ARGS, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt-dir", dest="ckpt_dir")
    p.add_argument("--preset", choices=("toy", "micro"))


def build_parser() -> argparse.ArgumentParser:
    from .checks import SUITES
    from .training import STAGES

    parser = argparse.ArgumentParser(prog="pseudo3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one stage (or all, in order)")
    _common(p)
    p.add_argument("--stage", choices=(*STAGES, "all"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data-dir", dest="data_dir")

    p = sub.add_parser("inflate", help="turn an image U-Net checkpoint into a video one")
    p.add_argument("image_ckpt")
    p.add_argument("out_ckpt")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="text-to-video, image animation or video variation")
    _common(p)
    p.add_argument("--mode", choices=("t2v", "animate", "variation"))
    p.add_argument("--text")
    p.add_argument("--image", help="input image (animate) or directory of frame PNGs (variation)")
    p.add_argument("--fps", type=int)
    p.add_argument("--skip", type=int)
    p.add_argument("--sample-steps", dest="sample_steps", type=int)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("check", help="run invariant suites on freshly built micro models")
    p.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    p.add_argument("--perturb-identity", dest="perturb_identity", type=float, default=0.0,
                   help="fault injection: offset temporal conv weights before the identity suite")

    p = sub.add_parser("bench", help="P3D vs full-3D parameter and FLOP table")
    _common(p)
    p.add_argument("--out-dir", dest="out_dir")
    return parser


def _resolved(args: argparse.Namespace) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    return resolve(getattr(args, "config", None), overrides)


def cmd_train(cfg: RunConfig) -> int:
    from .training import STAGES, TrainSettings, train_stage

    if cfg.stage is None:
        raise InvalidArgumentError("train needs --stage")
    stages = STAGES if cfg.stage == "all" else (cfg.stage,)
    cfg.save(Path(cfg.ckpt_dir) / f"train_{cfg.stage}.yaml")
    for stage in stages:
        settings = TrainSettings(stage=stage, ckpt_dir=Path(cfg.ckpt_dir), preset=cfg.preset, steps=cfg.steps,
                                 batch=cfg.batch, lr=cfg.lr, seed=cfg.seed,
                                 data_dir=Path(cfg.data_dir) if cfg.data_dir else None)
        res = train_stage(settings)
        first, last = res.losses[0], res.losses[-1]
        print(f"{stage}: {len(res.losses)} steps, loss {first:.4f} -> {last:.4f}, "
              f"{res.seconds:.1f}s, checkpoint {res.checkpoint}, log {res.log_path}")
    return EXIT_OK


def verify_inflation(image, video, seed: int = 0, tol: float = 1e-5) -> float:
    """Max-abs gap between the video model and the image model applied per frame."""
    c = image.config
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, c.in_channels, 4, c.resolution, c.resolution, generator=g)
    cond = torch.randn(1, c.cond_dim, generator=g) if c.cond_dim else None
    t = torch.tensor([500])
    with torch.no_grad():
        ref = torch.stack([image(x[:, :, f], t, cond=cond) for f in range(x.shape[2])], dim=2)
        out = video(x, t, fps=4, cond=cond)
    gap = float((out - ref).abs().max())
    if gap > tol:
        raise InvalidStateError(f"inflated model deviates from the image model per frame by {gap:.3e} > {tol:g}")
    return gap


def cmd_inflate(image_ckpt: str, out_ckpt: str, seed: int = 0) -> int:
    from .unet import inflate_to_video

    src = Path(image_ckpt)
    if not src.exists():
        raise ConfigurationError(f"image checkpoint {src} not found")
    image, header = load_unet(src)
    if image.mode != "image2d":
        raise InvalidStateError(f"{src} is already a video3d checkpoint; refusing to inflate it again")
    video = inflate_to_video(image, seed=seed)
    provenance = {"inflated_from": str(src), "source_checksum": header_checksum(src), "seed": seed}
    save_unet(out_ckpt, video, provenance)
    reloaded, _ = load_unet(out_ckpt)
    gap = verify_inflation(image, reloaded)
    print(f"inflated {src} -> {out_ckpt}; per-frame max abs gap {gap:.3e}; source checksum "
          f"{provenance['source_checksum'][:16]}")
    return EXIT_OK


def _read_video_dir(path: Path, resolution: int) -> torch.Tensor:
    from .media import load_image

    files = sorted(path.glob("*.png"))
    files = [f for f in files if f.name != "video.png"] or files
    if not files:
        raise InvalidArgumentError(f"{path} holds no PNG frames")
    return torch.stack([load_image(f, resolution)[0] for f in files], dim=1)[None]


def cmd_generate(cfg: RunConfig) -> int:
    from .media import load_image, write_video
    from .pipeline import Pipeline, PipelineConfig

    if cfg.mode == "t2v" and not cfg.text:
        raise InvalidArgumentError("t2v mode needs --text")
    if cfg.mode in ("animate", "variation") and not cfg.image:
        raise InvalidArgumentError(f"{cfg.mode} mode needs --image")
    kw = {} if cfg.sample_steps is None else {"sample_steps": cfg.sample_steps}
    pcfg = PipelineConfig.for_preset(cfg.ckpt_dir, cfg.preset, skip=cfg.skip, fps=cfg.fps, seed=cfg.seed, **kw)
    if cfg.resolutions is not None:
        pcfg.resolutions = tuple(cfg.resolutions)
    pipe = Pipeline(pcfg)
    r0 = pcfg.resolutions[0]
    if cfg.mode == "t2v":
        res = pipe.generate(cfg.text, cfg.fps, cfg.seed)
    elif cfg.mode == "animate":
        res = pipe.animate_image(load_image(cfg.image, r0), cfg.fps, cfg.seed, text=cfg.text)
    else:
        src = Path(cfg.image)
        video = _read_video_dir(src, r0) if src.is_dir() else load_image(src, r0).unsqueeze(2)
        res = pipe.video_variation(video, cfg.seed, cfg.fps)
    out = Path(cfg.out_dir)
    cfg.save(out / "config.yaml")
    paths = write_video(out, res.video, res.manifest["output_fps"], res.manifest)
    print(f"{res.manifest['frames']} frames at {res.manifest['resolution']}px, "
          f"{res.manifest['output_fps']} fps playback -> {paths['manifest'].parent}")
    return EXIT_OK


def cmd_check(suite: str, perturb: float = 0.0) -> int:
    from .checks import SUITES, run_checks

    items = run_checks(SUITES if suite == "all" else (suite,), perturb=perturb)
    for item in items:
        print(item.line())
    failed = [i for i in items if not i.passed]
    print(f"{len(items) - len(failed)}/{len(items)} invariants hold")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_bench(cfg: RunConfig) -> int:
    from .bench import count_conv_costs, cost_table, write_cost_report
    from .layers import P3DConv
    from .training import PRESETS
    from .unet import UNet

    preset = PRESETS[cfg.preset]
    model = UNet(replace(preset.decoder, mode="video3d", resolution=preset.resolutions[0]))
    shapes: dict[str, tuple] = {}

    def record(name):
        def hook(mod, inp, out):
            shapes.setdefault(name, tuple(inp[0].shape))
        return hook

    hooks = [m.register_forward_hook(record(n)) for n, m in model.named_modules() if isinstance(m, P3DConv)]
    r = preset.resolutions[0]
    with torch.no_grad():
        model(torch.randn(1, 3, preset.frames, r, r), 10, fps=4)
    for h in hooks:
        h.remove()
    reports = []
    for name, m in model.p3d_convs():
        k = m.spatial.kernel_size[0]
        rep = count_conv_costs(m.spatial.in_channels, m.spatial.out_channels, k, m.temporal.kernel_size[0],
                               shapes[name])
        reports.append(replace(rep, layer=name))
    for c in (8, 64, 256):
        reports.append(count_conv_costs(c, c, 3, 3, (1, c, 16, 16, 16)))
    print(cost_table(reports))
    table, record = write_cost_report(reports, cfg.out_dir)
    print(f"wrote {table} and {record}")
    return EXIT_OK


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "inflate":
        return cmd_inflate(args.image_ckpt, args.out_ckpt, args.seed)
    if args.command == "check":
        return cmd_check(args.suite, args.perturb_identity)
    cfg = _resolved(args)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "generate":
        return cmd_generate(cfg)
    if args.command == "bench":
        return cmd_bench(cfg)
    raise InvalidArgumentError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except Pseudo3DError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
