"""Tiny ViT image encoder and transformer text encoder.

Both encoders end in a per-token linear projection into the joint space, so
every patch location (not only the pooled vector) can be compared with text.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, UNK = "<pad>", "<unk>"
_WORD = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Word-level vocabulary with reserved PAD and UNK ids."""

    def __init__(self, word_to_id: dict[str, int], pad_id: int = 0, unk_id: int = 1):
        self.word_to_id = dict(word_to_id)
        self.pad_id = pad_id
        self.unk_id = unk_id
        ids = set(self.word_to_id.values())
        if pad_id in ids or unk_id in ids or pad_id == unk_id:
            raise ValueError("PAD and UNK ids must be distinct and unused by words")
        self.size = max(ids | {pad_id, unk_id}) + 1

    @classmethod
    def build(cls, corpus, min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for text in corpus for w in split_words(text))
        words = sorted(w for w, c in counts.items() if c >= min_count)
        return cls({w: i + 2 for i, w in enumerate(words)}, pad_id=0, unk_id=1)

    def __len__(self):
        return self.size

    def words(self) -> list[str]:
        out = [""] * self.size
        out[self.pad_id], out[self.unk_id] = PAD, UNK
        for w, i in self.word_to_id.items():
            out[i] = w
        return out

    def to_text(self) -> str:
        return "\n".join(self.words()) + "\n"

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        words = list(words)
        return cls({w: i for i, w in enumerate(words) if w not in (PAD, UNK)},
                   pad_id=words.index(PAD), unk_id=words.index(UNK))


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int):
    """Map ``text`` to ``(ids, mask)`` of length ``max_len``; mask is True on real tokens."""
    words = split_words(text)[:max_len]
    ids = [vocab.word_to_id.get(w, vocab.unk_id) for w in words]
    mask = [True] * len(ids) + [False] * (max_len - len(ids))
    ids += [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool)


def tokenize_batch(texts, vocab: Vocabulary, max_len: int):
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    ids = torch.from_numpy(np.stack([p[0] for p in pairs]))
    mask = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return ids, mask


# ---------------------------------------------------------------- patches


def patchify(image, patch: int):
    """Split ``... x H x W x C`` into ``... x (H/P * W/P) x (P*P*C)`` patches in raster order.

    Works on numpy arrays and torch tensors alike.
    """
    *lead, h, w, c = image.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(*lead, gh, patch, gw, patch, c)
    x = x.swapaxes(-4, -3)  # ..., gh, gw, P, P, C
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(patches, patch: int, grid: tuple[int, int], channels: int = 3):
    *lead, n, _ = patches.shape
    gh, gw = grid
    if n != gh * gw:
        raise ValueError(f"{n} patches do not fill a {gh}x{gw} grid")
    x = patches.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.swapaxes(-4, -3)
    return x.reshape(*lead, gh * patch, gw * patch, channels)


def interpolate_positions(pos: torch.Tensor, new_grid: tuple[int, int]) -> torch.Tensor:
    """Bilinear, corners-aligned resampling of an ``Hp x Wp x C`` position table."""
    hp, wp, _ = pos.shape
    if (hp, wp) == tuple(new_grid):
        return pos
    x = pos.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=tuple(new_grid), mode="bilinear", align_corners=True)
    return x.squeeze(0).permute(1, 2, 0)


# ---------------------------------------------------------------- transformer


def attention_probs(q, k, key_mask=None):
    """Softmax attention weights; ``key_mask`` is True where a key may be attended to."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
    return torch.softmax(scores, dim=-1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        # no key bias: softmax is invariant to it, so it would only ever get zero gradient
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(width))
        self.v_bias = nn.Parameter(torch.zeros(width))
        self.out = nn.Linear(width, width)

    def forward(self, x, key_mask=None, return_probs=False):
        b, n, c = x.shape
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        qkv = F.linear(x, self.qkv.weight, bias)
        qkv = qkv.reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        probs = attention_probs(q, k, key_mask)
        y = (probs @ v).transpose(1, 2).reshape(b, n, c)
        y = self.out(y)
        return (y, probs) if return_probs else y


class Block(nn.Module):
    """Pre-layer-norm transformer block: MSA then a 2-layer MLP, both residual."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


@dataclass
class ImageEncoderConfig:
    patch_size: int = 6
    width: int = 64
    depth: int = 2
    heads: int = 4
    joint_dim: int = 64
    base_grid: tuple = (8, 8)
    use_cls: bool = False
    mlp_ratio: int = 2

    def __post_init__(self):
        self.base_grid = tuple(int(g) for g in self.base_grid)
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.joint_dim < 2:
            raise ValueError("joint_dim must be >= 2")


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    max_len: int = 16
    width: int = 64
    depth: int = 2
    heads: int = 4
    joint_dim: int = 64
    mlp_ratio: int = 2


@dataclass
class EmbeddingGrid:
    """Per-location joint-space features before aggregation.

    ``tokens`` is ``B x L x D``. With sub-sampling, ``indices`` (``B x L``)
    holds the raster index of each kept location in the ``grid`` of shape
    ``(Hp, Wp)``; otherwise ``indices`` is None and ``L == Hp * Wp``.
    """

    tokens: torch.Tensor
    grid: tuple
    indices: torch.Tensor | None = None
    cls: torch.Tensor | None = None

    def as_grid(self) -> torch.Tensor:
        if self.indices is not None:
            raise ValueError("sub-sampled tokens do not form a full grid")
        return self.tokens.reshape(self.tokens.shape[0], *self.grid, -1)


@dataclass
class TokenFeatures:
    tokens: torch.Tensor  # B x L x D
    pad_mask: torch.Tensor  # B x L, True on real tokens


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, cfg.width)
        self.pos = nn.Parameter(torch.randn(*cfg.base_grid, cfg.width) * 0.02)
        self.cls = nn.Parameter(torch.randn(cfg.width) * 0.02) if cfg.use_cls else None
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.joint_dim, bias=False)

    def backbone(self, images, keep_indices=None):
        """Transformer trunk; returns (tokens B x L x width, cls or None, grid, indices)."""
        b, h, w, _ = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
        grid = (h // p, w // p)
        x = self.patch_embed(patchify(images, p))
        x = x + interpolate_positions(self.pos, grid).reshape(1, grid[0] * grid[1], -1)
        indices = None
        if keep_indices is not None:
            indices = _check_keep(keep_indices, grid, b, images.device)
            x = torch.gather(x, 1, indices[..., None].expand(-1, -1, x.shape[-1]))
        if self.cls is not None:
            x = torch.cat([self.cls.expand(b, 1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        cls = None
        if self.cls is not None:
            cls, x = x[:, 0], x[:, 1:]
        return x, cls, grid, indices

    def forward(self, images, keep_indices=None) -> EmbeddingGrid:
        """``images`` is ``B x H x W x 3`` in [0, 1]."""
        x, cls, grid, indices = self.backbone(images, keep_indices)
        tokens = self.proj(x)
        return EmbeddingGrid(tokens, grid, indices, None if cls is None else self.proj(cls))


def _check_keep(keep, grid, batch, device):
    keep = torch.as_tensor(keep, dtype=torch.long, device=device)
    if keep.ndim == 1:
        keep = keep.expand(batch, -1)
    n = grid[0] * grid[1]
    if keep.numel() and (keep.min() < 0 or keep.max() >= n):
        raise ValueError(f"keep index out of range for a {grid[0]}x{grid[1]} grid")
    srt = keep.sort(dim=1).values
    if (srt[:, 1:] == srt[:, :-1]).any():
        raise ValueError("duplicate keep index")
    return keep


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.width)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.joint_dim, bias=False)

    def forward(self, ids, pad_mask) -> TokenFeatures:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of vocabulary range [0, {self.cfg.vocab_size})")
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            x = blk(x, pad_mask)
        return TokenFeatures(self.proj(self.ln(x)), pad_mask)
