"""Run configuration: defaults < YAML file < command-line flags."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass(frozen=True)
class RunConfig:
    command: str = ""
    preset: str = "toy"
    stage: str | None = None
    steps: int | None = None
    batch: int | None = None
    lr: float | None = None
    seed: int = 0
    resolutions: tuple[int, ...] | None = None
    fps: int = 4
    skip: int = 5
    sample_steps: int | None = None
    text: str | None = None
    image: str | None = None
    mode: str = "t2v"
    suite: str = "all"
    ckpt_dir: str = "checkpoints"
    data_dir: str | None = None
    out_dir: str = "out"

    def __post_init__(self):
        if self.resolutions is not None:
            object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["resolutions"] is not None:
            d["resolutions"] = list(d["resolutions"])
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ConfigurationError("config file must hold a mapping")
        return cls.from_dict(d)

    def save(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_yaml())
        return p


def resolve(file: str | Path | None, overrides: dict) -> RunConfig:
    """Defaults, then the YAML file, then any override whose value is not None."""
    cfg = RunConfig()
    if file is not None:
        path = Path(file)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        try:
            cfg = RunConfig.from_yaml(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{path}: {e}") from e
    known = {f.name for f in fields(RunConfig)}
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None and k in known})
