import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from pseudo3d.bench import (
    PSNR_CAP,
    asymptotic_ratio,
    classify_shape,
    classify_video,
    count_conv_costs,
    enumerate_conv_params,
    psnr,
    temporal_consistency,
    write_cost_report,
)
from pseudo3d.data import SyntheticSpec, render_clip
from pseudo3d.errors import InvalidArgumentError, InvalidShapeError


def test_worked_example():
    r = count_conv_costs(8, 8, 3, 3, (1, 8, 4, 8, 8))
    assert (r.params_p3d, r.params_full3d) == (784, 1736)
    assert (r.params_p3d, r.params_full3d) == enumerate_conv_params(8, 8, 3, 3)


def test_degenerate_temporal_kernel():
    r = count_conv_costs(8, 16, 3, 1, (1, 8, 2, 4, 4))
    conv2d = nn.Conv2d(8, 16, 3)
    assert r.params_full3d == sum(p.numel() for p in conv2d.parameters())
    assert r.ratio > 1


def test_asymptotic_ratio_at_256():
    r = count_conv_costs(256, 256, 3, 3, (1, 256, 1, 1, 1))
    assert asymptotic_ratio(3, 3) == pytest.approx(12 / 27)
    assert abs(r.ratio - 12 / 27) / (12 / 27) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3, 5]), st.sampled_from([1, 3, 5]))
def test_formula_matches_enumeration(cin, cout, k, kt):
    r = count_conv_costs(cin, cout, k, kt, (1, cin, 3, 5, 5))
    assert (r.params_p3d, r.params_full3d) == enumerate_conv_params(cin, cout, k, kt)


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 512))
def test_p3d_cheaper_for_wide_layers(c):
    r = count_conv_costs(c, c, 3, 3, (1, c, 1, 1, 1))
    assert r.params_p3d < r.params_full3d


def test_flops_formula():
    r = count_conv_costs(2, 3, 3, 3, (2, 2, 4, 5, 5))
    n = 2 * 3 * 4 * 5 * 5
    assert r.flops_full3d == (2 * 27 + 1) * n
    assert r.flops_p3d == (2 * 9 + 1) * n + (3 * 3 + 1) * n


@pytest.mark.parametrize("args", [(0, 4, 3, 3), (4, 4, 2, 3), (4, 4, 3, 4)])
def test_invalid_dims(args):
    with pytest.raises(InvalidArgumentError):
        count_conv_costs(*args, (1, args[0], 2, 2, 2))


def test_invalid_input_shape():
    with pytest.raises(InvalidShapeError):
        count_conv_costs(4, 4, 3, 3, (1, 5, 2, 2, 2))


def test_temporal_consistency_examples():
    assert temporal_consistency(torch.ones(1, 3, 5, 4, 4)) == 0.0
    alt = torch.ones(1, 3, 6, 4, 4)
    alt[:, :, 1::2] = -1
    assert temporal_consistency(alt) == pytest.approx(2.0)
    with pytest.raises(InvalidShapeError):
        temporal_consistency(torch.zeros(1, 3, 1, 4, 4))


def test_psnr_examples():
    a = torch.rand(2, 3, 4, 4) * 2 - 1
    assert psnr(a, a) == PSNR_CAP
    assert psnr(torch.ones(3), -torch.ones(3)) == pytest.approx(0.0)
    with pytest.raises(InvalidShapeError):
        psnr(torch.zeros(2), torch.zeros(3))


def test_psnr_scalar_loop_oracle():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(3, 5, generator=g, dtype=torch.float64) * 2 - 1
    b = torch.rand(3, 5, generator=g, dtype=torch.float64) * 2 - 1
    total = 0.0
    for x, y in zip(a.flatten().tolist(), b.flatten().tolist()):
        total += (x - y) ** 2
    expect = 10 * math.log10(4 / (total / 15))
    assert abs(psnr(a, b) - expect) < 1e-9


@pytest.mark.parametrize("res", [32, 64])
@pytest.mark.parametrize("kind", ["circle", "square", "triangle"])
def test_shape_classifier(kind, res):
    spec = SyntheticSpec(kind, "yellow", size=3.0, start=(8, 8), velocity=(4, 3))
    clip, _ = render_clip(spec, 10, frames=4, resolution=res)
    assert classify_video(clip[0]) == kind


def test_classify_empty_frame():
    assert classify_shape(-torch.ones(3, 8, 8)) == "none"


def test_cost_report_files(tmp_path):
    reports = [count_conv_costs(8, 8, 3, 3, (1, 8, 2, 4, 4))]
    table, record = write_cost_report(reports, tmp_path)
    assert "784" in table.read_text()
    assert json.loads(record.read_text())[0]["params_full3d"] == 1736
