"""Invariant suites run by ``pseudo3d check``.

Every suite builds its own micro models, so the checks need no checkpoints.
Each invariant yields one :class:`CheckItem` with the observed value and the
tolerance it was held to.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .bench import asymptotic_ratio, count_conv_costs, enumerate_conv_params
from .core import to_spatial_batch, to_temporal_batch
from .interpolation import interpolated_length, make_extrapolation_input, make_masked_input
from .layers import P3DAttention, P3DConv, TemporalAttention
from .unet import UNet, UNetConfig, build_image_unet, inflate_to_video, widen_input

SUITES = ("identity", "gradients", "shapes", "arithmetic", "costs")

IDENTITY_TOL = 1e-5
WIDEN_TOL = 1e-6
GRAD_TOL = 1e-4
FD_STEP = 1e-4


@dataclass(frozen=True)
class CheckItem:
    suite: str
    name: str
    observed: float
    tolerance: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        obs = f"{self.observed:.3e}" if isinstance(self.observed, float) else str(self.observed)
        return f"{status}  {self.suite:<10} {self.name:<44} observed={obs:<12} tol={self.tolerance}"


def _le(suite, name, value, tol) -> CheckItem:
    return CheckItem(suite, name, float(value), f"<= {tol:g}", bool(value <= tol))


def _eq(suite, name, observed, expected) -> CheckItem:
    return CheckItem(suite, name, observed, f"== {expected}", observed == expected)


# -- identity -----------------------------------------------------------------

def micro_config(**kw) -> UNetConfig:
    base = dict(base_channels=8, channel_mults=(1, 2), attn_levels=(1,), heads=2, groups=4,
                cond_dim=8, context_tokens=2, resolution=16)
    base.update(kw)
    return UNetConfig(**base)


def perturb_identity(model: UNet, amount: float = 1e-2) -> None:
    """Fault injection: shift every temporal conv weight away from its identity init."""
    with torch.no_grad():
        for _, conv in model.p3d_convs():
            if conv.temporal is not None:
                conv.temporal.weight.add_(amount)


def identity_suite(seeds=range(10), perturb: float = 0.0) -> list[CheckItem]:
    worst, branch_max, widen_worst = 0.0, 0.0, 0.0
    for seed in seeds:
        image = build_image_unet(micro_config(), seed=seed).eval()
        video = inflate_to_video(image, seed=seed).eval()
        if perturb:
            perturb_identity(video, perturb)
        g = torch.Generator().manual_seed(int(seed))
        x = torch.randn(1, 3, 4, 16, 16, generator=g)
        cond = torch.randn(1, 8, generator=g)
        t = torch.randint(0, 1000, (1,), generator=g)

        branches: list[float] = []

        def hook(mod, inp, out):
            branches.append(float(out.abs().max()))

        # the output projection's result is exactly the residual increment
        handles = [m.attn.to_out.register_forward_hook(hook)
                   for m in video.modules() if isinstance(m, TemporalAttention)]
        with torch.no_grad():
            ref = torch.stack([image(x[:, :, f], t, cond=cond) for f in range(4)], dim=2)
            out = video(x, t, fps=4, cond=cond)
        for h in handles:
            h.remove()
        worst = max(worst, float((out - ref).abs().max()))
        branch_max = max(branch_max, max(branches))

        interp = widen_input(video, "interp").eval()
        with torch.no_grad():
            extra = torch.zeros(1, 4, 4, 16, 16)
            widened = interp(x, t, fps=4, cond=cond, extra=extra)
        widen_worst = max(widen_worst, float((widened - out).abs().max()))
    return [
        _le("identity", "inflated_vs_image_per_frame_max_abs", worst, IDENTITY_TOL),
        CheckItem("identity", "temporal_attention_branch_max_abs", branch_max, "== 0", branch_max == 0.0),
        _le("identity", "widened_interp_vs_decoder_max_abs", widen_worst, WIDEN_TOL),
    ]


# -- gradients ----------------------------------------------------------------

def randomize_(module: nn.Module, seed: int, scale: float = 0.5) -> nn.Module:
    """Overwrite every parameter with noise so zero/identity inits cannot hide errors."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return module


def finite_difference_grads(fn: Callable[[], torch.Tensor], params: list[torch.Tensor],
                            step: float = FD_STEP) -> list[torch.Tensor]:
    """Central differences (f(p+h) - f(p-h)) / 2h, one scalar element at a time."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = fn().item()
                flat[i] = orig - step
                minus = fn().item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * step)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    denom = max(float(a.norm()), float(b.norm()))
    if denom < 1e-12:
        return 0.0
    return float((a - b).norm()) / denom


def gradient_check(module: nn.Module, forward: Callable[[], torch.Tensor], seed: int) -> dict[str, float]:
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        probe = torch.randn(forward().shape, generator=g, dtype=torch.float64)

    def loss():
        return (forward() * probe).sum()

    names, params = zip(*[(n, p) for n, p in module.named_parameters()])
    module.zero_grad()
    loss().backward()
    analytic = [p.grad.detach().clone() for p in params]
    numeric = finite_difference_grads(loss, list(params))
    return {n: relative_error(a, b) for n, a, b in zip(names, analytic, numeric)}


def gradient_targets(seed: int = 0):
    """The three networks checked: a P3D conv, a P3D attention block and a 1-level U-Net."""
    g = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    conv = randomize_(P3DConv(3, 4, 3, temporal_kernel=3).double(), seed)
    xc = rand(1, 3, 3, 5, 5)

    attn = P3DAttention(8, 2, context_dim=6)
    attn.add_temporal(4)
    attn = randomize_(attn.double(), seed)
    xa, ctx = rand(1, 8, 3, 3, 3), rand(1, 2, 6)

    cfg = UNetConfig(base_channels=8, channel_mults=(1,), attn_levels=(0,), heads=2, groups=4, emb_dim=8,
                     cond_dim=4, context_tokens=2, mode="video3d", max_frames=4, resolution=4)
    unet = randomize_(UNet(cfg).double(), seed, scale=0.3)
    xu, cu = rand(1, 3, 2, 4, 4), rand(1, 4)
    t = torch.tensor([37])
    fps = torch.tensor([6.0], dtype=torch.float64)
    return [
        ("p3d_conv", conv, lambda: conv(xc)),
        ("p3d_attention", attn, lambda: attn(xa, ctx)),
        ("unet_1level", unet, lambda: unet(xu, t, fps=fps, cond=cu)),
    ]


def gradients_suite(seed: int = 0) -> list[CheckItem]:
    items = []
    for name, module, fwd in gradient_targets(seed):
        errs = gradient_check(module, fwd, seed)
        worst_name = max(errs, key=errs.get)
        items.append(_le("gradients", f"{name}_max_rel_err ({len(errs)} tensors)", errs[worst_name], GRAD_TOL))
    return items


# -- shapes -------------------------------------------------------------------

def shapes_suite() -> list[CheckItem]:
    items = []
    x = torch.randn(2, 5, 3, 4, 6)
    sv, tv = to_spatial_batch(x), to_temporal_batch(x)
    items.append(_eq("shapes", "spatial_batch_shape", tuple(sv.data.shape), (6, 5, 4, 6)))
    items.append(_eq("shapes", "temporal_batch_shape", tuple(tv.data.shape), (48, 5, 3)))
    rt = max(float((sv.restore() - x).abs().max()), float((tv.restore() - x).abs().max()))
    items.append(CheckItem("shapes", "axis_view_round_trip_max_abs", rt, "== 0", rt == 0.0))
    conv = P3DConv(5, 7, 3, temporal_kernel=3)
    items.append(_eq("shapes", "p3d_conv_output", tuple(conv(x).shape), (2, 7, 3, 4, 6)))
    attn = P3DAttention(8, 2)
    attn.add_temporal(4)
    items.append(_eq("shapes", "p3d_attention_output", tuple(attn(torch.randn(1, 8, 4, 4, 4)).shape), (1, 8, 4, 4, 4)))
    model = build_image_unet(micro_config(), seed=0)
    with torch.no_grad():
        img = model(torch.randn(2, 3, 16, 16), 10)
        vid = inflate_to_video(model)(torch.randn(1, 3, 4, 16, 16), 10, fps=4)
    items.append(_eq("shapes", "unet_image_output", tuple(img.shape), (2, 3, 16, 16)))
    items.append(_eq("shapes", "unet_video_output", tuple(vid.shape), (1, 3, 4, 16, 16)))
    clip = make_masked_input(torch.randn(1, 3, 16, 8, 8), 5)
    items.append(_eq("shapes", "masked_clip_channels", tuple(clip.channels().shape), (1, 4, 76, 8, 8)))
    anim = make_extrapolation_input(torch.randn(1, 3, 1, 8, 8), "post", 15)
    items.append(_eq("shapes", "animation_mask", anim.frame_mask(), [1] + [0] * 15))
    return items


# -- arithmetic ---------------------------------------------------------------

def arithmetic_suite() -> list[CheckItem]:
    bad = 0
    for f in range(2, 17):
        for s in range(1, 9):
            clip = make_masked_input(torch.zeros(1, 3, f, 2, 2), s)
            counted = clip.num_frames
            given = sum(clip.frame_mask())
            between = [clip.frame_mask()[i * s + 1 : (i + 1) * s] for i in range(f - 1)]
            ok = counted == interpolated_length(f, s) == (f - 1) * s + 1
            ok &= given == f and all(len(b) == s - 1 and not any(b) for b in between)
            bad += not ok
    return [
        CheckItem("arithmetic", "interpolated_length_F2..16_s1..8_mismatches", bad, "== 0", bad == 0),
        _eq("arithmetic", "16_frames_skip_5", interpolated_length(16, 5), 76),
    ]


# -- costs --------------------------------------------------------------------

def costs_suite() -> list[CheckItem]:
    mismatches = 0
    for cin, cout, k, kt in [(8, 8, 3, 3), (3, 16, 3, 5), (16, 4, 5, 3), (8, 8, 3, 1), (1, 1, 1, 1)]:
        r = count_conv_costs(cin, cout, k, kt, (1, cin, 4, 8, 8))
        if (r.params_p3d, r.params_full3d) != enumerate_conv_params(cin, cout, k, kt):
            mismatches += 1
    r8 = count_conv_costs(8, 8, 3, 3, (1, 8, 4, 8, 8))
    r256 = count_conv_costs(256, 256, 3, 3, (1, 256, 1, 1, 1))
    target = asymptotic_ratio(3, 3)
    return [
        CheckItem("costs", "formula_vs_enumeration_mismatches", mismatches, "== 0", mismatches == 0),
        _eq("costs", "params_c8_k3 (p3d, full3d)", (r8.params_p3d, r8.params_full3d), (784, 1736)),
        _le("costs", "ratio_c256_rel_dev_from_12/27", abs(r256.ratio - target) / target, 0.02),
    ]


def run_suite(name: str, perturb: float = 0.0) -> list[CheckItem]:
    if name == "identity":
        return identity_suite(perturb=perturb)
    if name == "gradients":
        return gradients_suite()
    if name == "shapes":
        return shapes_suite()
    if name == "arithmetic":
        return arithmetic_suite()
    if name == "costs":
        return costs_suite()
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES} or 'all'")


def run_checks(suites=SUITES, perturb: float = 0.0) -> list[CheckItem]:
    items = []
    for s in suites:
        items.extend(run_suite(s, perturb))
    return items
