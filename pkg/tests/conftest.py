"""Shared fixtures: trained checkpoint stacks.

The toy stack takes several CPU-minutes to train, so it is cached under
``PSEUDO3D_CACHE_DIR`` (default ``<repo>/.cache``). The cache is keyed by a
hash of every source file that influences training; editing any of them
retrains on the next run.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import pytest

from pseudo3d.training import CKPT_FILES, train_all

ROOT = Path(__file__).resolve().parents[1]
TRAINING_SOURCES = ("core", "layers", "unet", "diffusion", "data", "interpolation", "prior", "training",
                    "checkpoint")


def cache_root() -> Path:
    return Path(os.environ.get("PSEUDO3D_CACHE_DIR", ROOT / ".cache"))


def source_stamp(preset: str, seed: int) -> str:
    import pseudo3d

    pkg = Path(pseudo3d.__file__).parent
    h = hashlib.sha256(f"{preset}:{seed}".encode())
    for name in TRAINING_SOURCES:
        h.update((pkg / f"{name}.py").read_bytes())
    return h.hexdigest()


def ensure_stack(preset: str, seed: int = 0, root: Path | None = None) -> Path:
    """Train (or reuse) the full checkpoint stack for ``preset``."""
    stamp = source_stamp(preset, seed)
    d = (root or cache_root()) / f"{preset}-{stamp[:12]}"
    marker = d / "stamp.json"
    if marker.exists() and all((d / f).exists() for f in CKPT_FILES.values()):
        return d
    d.mkdir(parents=True, exist_ok=True)
    results = train_all(d, preset, seed=seed, data_dir=d)
    marker.write_text(json.dumps({"stamp": stamp, "seconds": {r.stage: r.seconds for r in results}}, indent=2))
    return d


@pytest.fixture(scope="session")
def micro_stack(tmp_path_factory) -> Path:
    return ensure_stack("micro", root=tmp_path_factory.mktemp("micro"))


@pytest.fixture(scope="session")
def toy_stack() -> Path:
    return ensure_stack("toy")


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance lines whether or not output capture is on."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n}: FAIL  did not complete"))
