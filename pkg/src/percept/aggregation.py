"""Spatial / token aggregation into a single joint-space vector."""
from __future__ import annotations

from dataclasses import dataclass

import torch

IMAGE_POOL_KINDS = ("max", "avg", "cls", "tsp", "wmp")
TEXT_POOL_KINDS = ("avg", "max")


class DegenerateInputError(ValueError):
    """Input has nothing to aggregate (empty grid, all-pad text, zero vector)."""


@dataclass(frozen=True)
class ImagePool:
    kind: str = "max"
    temp: float = 1.0

    def __post_init__(self):
        if self.kind not in IMAGE_POOL_KINDS:
            raise ValueError(f"unknown image pool mode {self.kind!r}; expected one of {IMAGE_POOL_KINDS}")
        if self.kind in ("tsp", "wmp") and not self.temp > 0:
            raise ValueError(f"{self.kind} temperature must be > 0, got {self.temp}")

    @classmethod
    def parse(cls, text: str) -> "ImagePool":
        """``"max"``, ``"avg"``, ``"cls"``, ``"tsp"``, ``"wmp:0.1"`` ..."""
        kind, _, temp = text.strip().lower().partition(":")
        return cls(kind, float(temp) if temp else 1.0)

    def __str__(self):
        return f"{self.kind}:{self.temp:g}" if self.kind in ("tsp", "wmp") else self.kind

    @property
    def needs_text(self) -> bool:
        return self.kind == "tsp"


def pool_image(tokens: torch.Tensor, mode: ImagePool, text_ctx=None, cls=None) -> torch.Tensor:
    """Collapse ``... x L x D`` location features to ``... x D`` (unnormalized).

    ``text_ctx`` (``... x D``) is the text embedding TSP weighs locations by;
    ``cls`` is the CLS token output for CLS mode.
    """
    if mode.kind == "cls":
        if cls is None:
            raise ValueError("CLS pooling requested but the encoder has no CLS token")
        return cls
    if tokens.shape[-2] == 0:
        raise DegenerateInputError("cannot pool an empty grid")
    if mode.kind == "max":
        # gather at the first maximal location: lowest raster index wins ties
        idx = tokens.argmax(dim=-2, keepdim=True)
        return torch.gather(tokens, -2, idx).squeeze(-2)
    if mode.kind == "avg":
        return tokens.mean(dim=-2)
    if mode.kind == "wmp":
        w = torch.softmax(tokens / mode.temp, dim=-2)
        return (w * tokens).sum(dim=-2)
    # tsp
    if text_ctx is None:
        raise ValueError("TSP pooling needs a text embedding")
    sim = (normalize(tokens) * normalize(text_ctx).unsqueeze(-2)).sum(dim=-1)
    w = torch.softmax(sim / mode.temp, dim=-1)
    return (w.unsqueeze(-1) * tokens).sum(dim=-2)


def pool_text(tokens: torch.Tensor, pad_mask: torch.Tensor, mode: str = "avg") -> torch.Tensor:
    """Average or max over non-pad tokens; ``pad_mask`` is True on real tokens."""
    if mode not in TEXT_POOL_KINDS:
        raise ValueError(f"unknown text pool mode {mode!r}")
    counts = pad_mask.sum(dim=-1)
    if (counts == 0).any():
        raise DegenerateInputError("text has no non-pad tokens")
    m = pad_mask.unsqueeze(-1)
    if mode == "avg":
        return (tokens * m).sum(dim=-2) / counts.unsqueeze(-1).to(tokens.dtype)
    masked = tokens.masked_fill(~m, float("-inf"))
    idx = masked.argmax(dim=-2, keepdim=True)
    return torch.gather(tokens, -2, idx).squeeze(-2)


def normalize(v: torch.Tensor) -> torch.Tensor:
    """Unit L2 norm along the last axis; zero vectors are rejected."""
    norm = v.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm
