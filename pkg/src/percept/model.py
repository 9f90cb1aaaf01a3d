"""Joint image-text model: two encoders, pooling on each side, a temperature."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .aggregation import ImagePool, normalize, pool_image, pool_text
from .encoders import (EmbeddingGrid, ImageEncoder, ImageEncoderConfig, TextEncoder,
                       TextEncoderConfig, TokenFeatures)
from .objective import LossConfig, contrastive_loss, similarity_logits


class JointModel(nn.Module):
    def __init__(self, image_cfg: ImageEncoderConfig, text_cfg: TextEncoderConfig,
                 image_pool: ImagePool = ImagePool("max"), text_pool: str = "avg",
                 loss_cfg: LossConfig | None = None):
        super().__init__()
        if image_cfg.joint_dim != text_cfg.joint_dim:
            raise ValueError("image and text joint dims differ")
        if image_pool.kind == "cls" and not image_cfg.use_cls:
            raise ValueError("CLS pooling needs an image encoder built with use_cls=True")
        self.image = ImageEncoder(image_cfg)
        self.text = TextEncoder(text_cfg)
        self.image_pool = image_pool
        self.text_pool = text_pool
        self.loss_cfg = loss_cfg or LossConfig()
        log_tau = torch.tensor(math.log(self.loss_cfg.tau))
        if self.loss_cfg.learnable_tau:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(self.loss_cfg.tau_min, self.loss_cfg.tau_max)

    def encode_image(self, images, keep_indices=None) -> EmbeddingGrid:
        return self.image(images, keep_indices)

    def encode_text(self, ids, pad_mask) -> TokenFeatures:
        return self.text(ids, pad_mask)

    def embed_text(self, ids, pad_mask) -> torch.Tensor:
        feats = self.text(ids, pad_mask)
        return normalize(pool_text(feats.tokens, feats.pad_mask, self.text_pool))

    def embed_image(self, images, keep_indices=None, text_ctx=None) -> torch.Tensor:
        """Pooled, normalized image embeddings (``B x D``).

        TSP needs a text vector per image; without one the mean of
        ``text_ctx`` rows is not meaningful, so it must be given explicitly.
        """
        g = self.image(images, keep_indices)
        return normalize(pool_image(g.tokens, self.image_pool, text_ctx, g.cls))

    def logits(self, images, ids, pad_mask, keep_indices=None) -> torch.Tensor:
        g = self.image(images, keep_indices)
        t = normalize(pool_text(*_tf(self.text(ids, pad_mask)), self.text_pool))
        if self.image_pool.needs_text:
            # every image is pooled once per candidate caption: x_ij = pool(grid_i | t_j)
            pooled = pool_image(g.tokens.unsqueeze(1), self.image_pool, t.unsqueeze(0))
            x = normalize(pooled)
            return (x * t.unsqueeze(0)).sum(-1) / self.tau
        x = normalize(pool_image(g.tokens, self.image_pool, None, g.cls))
        return similarity_logits(x, t, self.tau)

    def loss(self, images, ids, pad_mask, keep_indices=None) -> torch.Tensor:
        return contrastive_loss(self.logits(images, ids, pad_mask, keep_indices))


def _tf(feats: TokenFeatures):
    return feats.tokens, feats.pad_mask


class _LossOf(nn.Module):
    def __init__(self, model: JointModel):
        super().__init__()
        self.m = model

    def forward(self, images, ids, pad_mask):
        return self.m.loss(images, ids, pad_mask)


def micro_model(image_pool: ImagePool, seed: int = 0, dim: int = 16, depth: int = 2):
    """A float64 micro-model plus one random batch of 4, for gradient checks."""
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        ic = ImageEncoderConfig(patch_size=4, width=dim, depth=depth, heads=2, joint_dim=dim,
                                base_grid=(2, 2), use_cls=image_pool.kind == "cls")
        tc = TextEncoderConfig(vocab_size=12, max_len=6, width=dim, depth=depth, heads=2, joint_dim=dim)
        model = JointModel(ic, tc, image_pool).double()
    images = torch.rand(4, 8, 8, 3, generator=g, dtype=torch.float64)
    ids = torch.randint(2, 12, (4, 6), generator=g)
    mask = torch.ones(4, 6, dtype=torch.bool)
    mask[:, 4:] = False
    return model, (images, ids, mask)


def check_model_gradients(model: JointModel, batch, epsilon: float = 1e-5, n_coords: int = 200,
                          seed: int = 0) -> float:
    """Run :func:`gradient_check` on the full pipeline loss of ``model``."""
    from torch.func import functional_call

    from .objective import gradient_check

    wrapper = _LossOf(model)
    params = {f"m.{k}": v for k, v in model.named_parameters()}
    return gradient_check(lambda p: functional_call(wrapper, p, batch), params, epsilon, n_coords, seed)
