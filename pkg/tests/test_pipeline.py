import shutil
import warnings

import pytest
import torch

from pseudo3d.bench import classify_video
from pseudo3d.data import SyntheticSpec, render_clip
from pseudo3d.errors import ConfigurationError, InvalidArgumentError, InvalidShapeError
from pseudo3d.pipeline import Pipeline, PipelineConfig, normalized_manifest


@pytest.fixture(scope="module")
def pipe(micro_stack):
    return Pipeline(PipelineConfig.for_preset(micro_stack, "micro"))


def test_default_chain_shapes(pipe):
    res = pipe.generate("red circle moving right", seed=1)
    r0, r1, r2 = pipe.cfg.resolutions
    assert res.video.shape == (1, 3, 76, r2, r2)
    assert res.intermediates["decoder"].shape == (1, 3, 16, r0, r0)
    assert res.intermediates["interp"].shape == (1, 3, 76, r0, r0)
    assert res.intermediates["sr_l_t"].shape == (1, 3, 76, r1, r1)
    assert res.manifest["stages"] == ["decoder", "interp", "sr_l_t", "sr_h"]
    for v in res.intermediates.values():
        assert torch.isfinite(v).all()
    assert res.video.min() >= -1 and res.video.max() <= 1


def test_determinism(pipe):
    a = pipe.generate("blue square moving up", fps=6, seed=3)
    b = pipe.generate("blue square moving up", fps=6, seed=3)
    assert torch.equal(a.video, b.video)
    assert normalized_manifest(a.manifest) == normalized_manifest(b.manifest)
    c = pipe.generate("blue square moving up", fps=6, seed=4)
    assert not torch.equal(a.video, c.video)


@pytest.mark.parametrize("fps", [1, 4, 6])
def test_manifest_records_requested_fps(pipe, fps):
    res = pipe.generate("green triangle", fps=fps, seed=0, skip_stages=("sr_l_t", "sr_h"))
    assert res.manifest["fps"] == fps
    assert res.manifest["output_fps"] == fps * pipe.cfg.skip
    # fps is conditioning and metadata only: the frame count does not depend on it
    assert res.video.shape[2] == 76


def test_stage_order_invariance(pipe):
    r0, r1, _ = pipe.cfg.resolutions
    base = pipe.generate("red circle", seed=2, skip_stages=("interp", "sr_l_t", "sr_h"))
    assert base.video.shape == (1, 3, 16, r0, r0)
    assert base.manifest["output_fps"] == base.manifest["fps"]
    no_interp = pipe.generate("red circle", seed=2, skip_stages=("interp", "sr_h"))
    assert no_interp.video.shape == (1, 3, 16, r1, r1)
    only_interp = pipe.generate("red circle", seed=2, skip_stages=("sr_l_t", "sr_h"))
    assert only_interp.video.shape == (1, 3, 76, r0, r0)
    # the decoder output is identical however much of the chain follows it
    assert torch.equal(base.intermediates["decoder"], only_interp.intermediates["decoder"])


def test_unknown_skip_stage(pipe):
    with pytest.raises(InvalidArgumentError):
        pipe.generate("red circle", skip_stages=("decoder",))


def test_out_of_range_fps_clamped_with_warning(pipe):
    with pytest.warns(UserWarning):
        res = pipe.generate("red circle", fps=50, skip_stages=OPTIONAL)
    assert res.manifest["fps"] == 30


OPTIONAL = ("interp", "sr_l_t", "sr_h")


def test_shared_noise_sr_h_identical_frames(pipe):
    r1 = pipe.cfg.resolutions[1]
    frame = torch.rand(1, 3, 1, r1, r1) * 2 - 1
    out = pipe._sr_h(frame.expand(1, 3, 5, r1, r1).contiguous(), seed=7)
    for f in range(1, 5):
        assert torch.equal(out[:, :, f], out[:, :, 0])


def test_animate(pipe):
    r0 = pipe.cfg.resolutions[0]
    img = torch.rand(1, 3, r0, r0) * 2 - 1
    a = pipe.animate_image(img, seed=0)
    b = pipe.animate_image(img, seed=1)
    assert a.video.shape == (1, 3, 16, r0, r0)
    assert torch.equal(a.video[:, :, 0], img)
    assert (a.video[:, :, 1:] - b.video[:, :, 1:]).abs().max() > 1e-3
    assert a.manifest["mode"] == "animate"


def test_animate_wrong_resolution(pipe):
    with pytest.raises(InvalidShapeError):
        pipe.animate_image(torch.zeros(1, 3, 5, 5))


def test_variation_constant_video_condition(pipe):
    r0 = pipe.cfg.resolutions[0]
    frame = torch.rand(1, 3, r0, r0) * 2 - 1
    video = frame.unsqueeze(2).expand(1, 3, 6, r0, r0)
    torch.testing.assert_close(pipe.variation_condition(video), pipe.encoder(frame), atol=1e-6, rtol=0)


def test_variation_shape_matches_generate(pipe):
    r0 = pipe.cfg.resolutions[0]
    clip, _ = render_clip(SyntheticSpec("circle", "red", start=(4, 4), velocity=(3, 2)), 10, resolution=r0)
    var = pipe.video_variation(clip, seed=0)
    gen = pipe.generate("red circle", seed=0)
    assert var.video.shape == gen.video.shape
    assert var.manifest["mode"] == "variation"


def test_variation_wrong_shape(pipe):
    with pytest.raises(InvalidShapeError):
        pipe.video_variation(torch.zeros(1, 3, 4, 5, 5))


def test_invalid_resolution_chain(micro_stack):
    with pytest.raises(ConfigurationError):
        PipelineConfig(micro_stack, resolutions=(8, 8, 16))


def test_missing_stage(micro_stack, tmp_path):
    shutil.copytree(micro_stack, tmp_path / "s")
    (tmp_path / "s" / "interp.npz").unlink()
    with pytest.raises(ConfigurationError, match="interp"):
        Pipeline(PipelineConfig.for_preset(tmp_path / "s", "micro"))


def test_incompatible_stages_named(micro_stack, tmp_path):
    shutil.copytree(micro_stack, tmp_path / "s")
    # an SR network trained for the middle resolution in the last slot
    shutil.copy(tmp_path / "s" / "sr_l.npz", tmp_path / "s" / "sr_h.npz")
    with pytest.raises(ConfigurationError) as err:
        Pipeline(PipelineConfig.for_preset(tmp_path / "s", "micro"))
    assert "'sr_l_t'" in str(err.value) and "'sr_h'" in str(err.value)


def test_variation_of_moving_circle_stays_circle(toy_stack):
    """Regenerating from a circle video's mean embedding keeps the shape class.

    The shape is decided by the decoder, so the later stages are skipped.
    """
    pipe = Pipeline(PipelineConfig.for_preset(toy_stack, "toy"))
    spec = SyntheticSpec("circle", "yellow", size=3.0, start=(5.0, 6.0), velocity=(12.0, 7.0))
    clip, _ = render_clip(spec, 8, resolution=pipe.cfg.resolutions[0])
    hits = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(20):
            res = pipe.video_variation(clip, seed=seed, skip_stages=("interp", "sr_l_t", "sr_h"))
            hits += classify_video(res.video[0]) == "circle"
    assert hits >= 16, hits
