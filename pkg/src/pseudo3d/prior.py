"""Toy stand-ins for the text encoder, the image-embedding encoder and the prior.

Image embeddings live on the unit sphere in ``EMBED_DIM`` dimensions. The image
encoder is trained together with the image decoder, so its embedding space is
whatever the decoder finds useful to condition on. The prior maps a caption's
pooled token embedding into that space.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import COLORS, DIRECTIONS, SHAPES
from .errors import ConfigurationError, InvalidArgumentError

EMBED_DIM = 64
VOCAB = ("<unk>", "a", *COLORS, *SHAPES, "moving", *DIRECTIONS, "circling")


@dataclass(frozen=True)
class TextEmbedding:
    tokens: tuple[int, ...]
    pooled: torch.Tensor


class ToyTextEncoder(nn.Module):
    def __init__(self, dim: int = 32, vocab: tuple[str, ...] = VOCAB):
        super().__init__()
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.embedding = nn.Embedding(len(self.vocab), dim)

    def tokenize(self, text: str) -> tuple[int, ...]:
        words = text.lower().split()
        if not words:
            raise InvalidArgumentError("text must contain at least one word")
        return tuple(self.index.get(w, 0) for w in words)

    def encode(self, text: str) -> TextEmbedding:
        tokens = self.tokenize(text)
        pooled = self.embedding(torch.tensor(tokens)).mean(dim=0)
        return TextEmbedding(tokens, pooled)

    def pooled(self, texts: list[str]) -> torch.Tensor:
        return torch.stack([self.encode(t).pooled for t in texts])


class ImageEncoder(nn.Module):
    """Small conv net from a ``(B,3,H,W)`` frame to a unit vector."""

    def __init__(self, embed_dim: int = EMBED_DIM, width: int = 16):
        super().__init__()
        self.embed_dim = embed_dim
        self.width = width
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
            # global pooling keeps the embedding about what is shown, not where
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, embed_dim),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(images), dim=-1)

    def embed_video(self, video: torch.Tensor) -> torch.Tensor:
        """Mean of per-frame embeddings of a ``(B,3,F,H,W)`` video, renormalised."""
        b, _, f = video.shape[:3]
        frames = video.permute(0, 2, 1, 3, 4).reshape(b * f, *video.shape[1:2], *video.shape[3:])
        per_frame = self(frames).view(b, f, -1)
        return F.normalize(per_frame.mean(dim=1), dim=-1)

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "width": self.width}


class Prior(nn.Module):
    """Caption -> image embedding: a 2-layer map with an optional noise input."""

    def __init__(self, text_dim: int = 32, embed_dim: int = EMBED_DIM, hidden: int = 128,
                 noise_dim: int = 8, noise_scale: float = 0.0):
        super().__init__()
        self.text = ToyTextEncoder(text_dim)
        self.text_dim, self.embed_dim, self.hidden = text_dim, embed_dim, hidden
        self.noise_dim, self.noise_scale = noise_dim, noise_scale
        self.net = nn.Sequential(nn.Linear(text_dim + noise_dim, hidden), nn.SiLU(), nn.Linear(hidden, embed_dim))

    def forward(self, pooled: torch.Tensor, noise: torch.Tensor | None = None) -> torch.Tensor:
        if noise is None:
            noise = torch.zeros(pooled.shape[0], self.noise_dim, dtype=pooled.dtype)
        return F.normalize(self.net(torch.cat([pooled, self.noise_scale * noise], dim=-1)), dim=-1)

    @torch.no_grad()
    def generate(self, text: str | TextEmbedding, seed: int = 0) -> torch.Tensor:
        emb = self.text.encode(text) if isinstance(text, str) else text
        gen = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(1, self.noise_dim, generator=gen)
        return self(emb.pooled[None], noise)[0]

    def config(self) -> dict:
        return {"text_dim": self.text_dim, "embed_dim": self.embed_dim, "hidden": self.hidden,
                "noise_dim": self.noise_dim, "noise_scale": self.noise_scale}


def prior_generate(prior: Prior, x_e: TextEmbedding | str, seed: int = 0) -> torch.Tensor:
    return prior.generate(x_e, seed)


_KINDS = {"image_encoder": ImageEncoder, "prior": Prior}


def save_module(path, module, provenance: dict | None = None) -> dict:
    kind = {ImageEncoder: "image_encoder", Prior: "prior"}[type(module)]
    header = {"kind": kind, "config": module.config(), "provenance": provenance or {}}
    if isinstance(module, Prior):
        header["vocab"] = list(module.text.vocab)
    return save_checkpoint(path, module.state_dict(), header)


def load_module(path, kind: str):
    header, tensors = load_checkpoint(path)
    if header.get("kind") != kind:
        raise ConfigurationError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")
    module = _KINDS[kind](**header["config"])
    if kind == "prior" and tuple(header.get("vocab", ())) != module.text.vocab:
        raise ConfigurationError(f"{path}: vocabulary differs from this build")
    load_into(module, tensors, str(path))
    module.eval()
    return module, header


