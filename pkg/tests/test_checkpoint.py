import json

import numpy as np
import pytest
import torch

from pseudo3d.checkpoint import (
    HEADER_KEY,
    content_checksum,
    load_checkpoint,
    load_unet,
    save_checkpoint,
    save_unet,
)
from pseudo3d.checks import micro_config
from pseudo3d.errors import ConfigurationError
from pseudo3d.unet import build_image_unet, inflate_to_video


def test_unet_round_trip(tmp_path):
    video = inflate_to_video(build_image_unet(micro_config(), seed=0)).eval()
    video.mark_trained()
    save_unet(tmp_path / "v.npz", video, {"note": "x"})
    back, header = load_unet(tmp_path / "v.npz")
    assert header["provenance"] == {"note": "x"}
    assert back.temporal_flags() == video.temporal_flags()
    x = torch.randn(1, 3, 4, 16, 16)
    with torch.no_grad():
        assert torch.equal(back(x, 3, fps=4), video(x, 3, fps=4))


def test_canonical_names(tmp_path):
    video = inflate_to_video(build_image_unet(micro_config(), seed=0))
    header = save_unet(tmp_path / "v.npz", video)
    assert "down.0.res.0.conv1.temporal.weight" in header["shapes"]
    assert header["shapes"]["down.0.res.0.conv1.temporal.weight"] == [8, 8, 3]


def test_checksum_independent_of_insertion_order():
    a = {"x": torch.ones(2), "y": torch.zeros(3)}
    b = {"y": torch.zeros(3), "x": torch.ones(2)}
    assert content_checksum(a) == content_checksum(b)
    assert content_checksum(a) != content_checksum({"x": torch.ones(2), "y": torch.ones(3)})


def test_tampered_file_rejected(tmp_path):
    p = tmp_path / "c.npz"
    save_checkpoint(p, {"w": torch.ones(3)}, {"kind": "test"})
    with np.load(p) as data:
        arrays = {k: data[k] for k in data.files}
    arrays["w"] = arrays["w"] * 2
    np.savez(p, **arrays)
    with pytest.raises(ConfigurationError, match="checksum"):
        load_checkpoint(p)


def test_shape_tag_mismatch_rejected(tmp_path):
    p = tmp_path / "c.npz"
    save_checkpoint(p, {"w": torch.ones(3)}, {"kind": "test"})
    with np.load(p) as data:
        header = json.loads(str(data[HEADER_KEY]))
    header["shapes"]["w"] = [4]
    np.savez(p, w=np.ones(3, dtype=np.float32), **{HEADER_KEY: np.array(json.dumps(header))})
    with pytest.raises(ConfigurationError):
        load_checkpoint(p)


def test_image_checkpoint_cannot_load_as_video(tmp_path):
    image = build_image_unet(micro_config(), seed=0)
    save_unet(tmp_path / "i.npz", image)
    header, tensors = load_checkpoint(tmp_path / "i.npz")
    from pseudo3d.checkpoint import load_into

    video = inflate_to_video(image)
    with pytest.raises(ConfigurationError, match="names differ"):
        load_into(video, tensors)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_unet(tmp_path / "nope.npz")
