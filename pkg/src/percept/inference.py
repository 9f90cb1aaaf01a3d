"""Zero-shot classification, dense (top-down) labelling, PCA (bottom-up) grouping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .aggregation import normalize, pool_image, pool_text
from .encoders import Vocabulary, tokenize_batch
from .evaluation import resize_nearest


@dataclass
class LabelPromptSet:
    prompts: dict  # label -> list of prompt strings, in label order
    categories: dict | None = None  # category -> list of labels

    def __post_init__(self):
        for label, ps in self.prompts.items():
            if not ps:
                raise ValueError(f"label {label!r} has no prompts")
        if self.categories:
            for cat, labels in self.categories.items():
                missing = [l for l in labels if l not in self.prompts]
                if missing:
                    raise ValueError(f"category {cat!r} names unknown labels {missing}")

    @property
    def labels(self) -> list[str]:
        return list(self.prompts)


@dataclass
class LabelMap:
    labels: np.ndarray  # Hp x Wp label indices
    scores: np.ndarray  # Hp x Wp best similarity


# ---------------------------------------------------------------- text side


@torch.no_grad()
def embed_prompts(model, vocab: Vocabulary, prompts: list[str]) -> torch.Tensor:
    ids, mask = tokenize_batch(prompts, vocab, model.text.cfg.max_len)
    feats = model.text(ids, mask)
    return normalize(pool_text(feats.tokens, feats.pad_mask, model.text_pool))


def mean_embedding(unit_vectors: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean of unit vectors, re-normalized."""
    if unit_vectors.shape[0] == 0:
        raise ValueError("empty prompt list")
    return normalize(unit_vectors.mean(dim=0))


@torch.no_grad()
def embed_label_set(model, vocab: Vocabulary, prompt_set: LabelPromptSet, categories: bool = False) -> torch.Tensor:
    """One unit vector per label (or per category, pooling all member prompts)."""
    if categories:
        if not prompt_set.categories:
            raise ValueError("prompt set has no category map")
        groups = [[p for l in labels for p in prompt_set.prompts[l]] for labels in prompt_set.categories.values()]
    else:
        groups = list(prompt_set.prompts.values())
    return torch.stack([mean_embedding(embed_prompts(model, vocab, g)) for g in groups])


# ---------------------------------------------------------------- classification


def classify_embedding(image_embedding: torch.Tensor, label_embeds: torch.Tensor):
    """Cosine scores of one embedding against every label; argmax with lowest-index ties."""
    if image_embedding.shape[-1] != label_embeds.shape[-1]:
        raise ValueError(f"dim mismatch: image {image_embedding.shape[-1]} vs labels {label_embeds.shape[-1]}")
    x = normalize(image_embedding)
    scores = normalize(label_embeds.to(x.dtype)) @ x
    return int(torch.argmax(scores)), scores


@torch.no_grad()
def classify(model, images: torch.Tensor, label_embeds: torch.Tensor):
    """Batch zero-shot classification; returns ``(labels, scores)``."""
    g = model.image(images)
    if model.image_pool.needs_text:
        # TSP pools differently per candidate label: score each label with its own pooling
        pooled = pool_image(g.tokens.unsqueeze(1), model.image_pool, label_embeds.unsqueeze(0))
        scores = (normalize(pooled) * normalize(label_embeds).unsqueeze(0)).sum(-1)
    else:
        x = normalize(pool_image(g.tokens, model.image_pool, None, g.cls))
        scores = x @ normalize(label_embeds).T
    return scores.argmax(dim=-1).numpy(), scores.numpy()


# ---------------------------------------------------------------- dense labelling


def label_features(features: torch.Tensor, label_embeds: torch.Tensor, restrict_to=None) -> LabelMap:
    """Per-location argmax of cosine similarity over labels.

    ``features`` is ``Hp x Wp x D``. ``restrict_to`` (label indices) masks
    every other label out before the argmax, which is how grounding is done.
    """
    if features.shape[-1] != label_embeds.shape[-1]:
        raise ValueError("feature and label dims differ")
    sims = torch.einsum("hwd,kd->hwk", normalize(features), normalize(label_embeds.to(features.dtype)))
    if restrict_to is not None:
        restrict = sorted(set(int(i) for i in restrict_to))
        if not restrict:
            raise ValueError("restrict_to is empty")
        if restrict[0] < 0 or restrict[-1] >= label_embeds.shape[0]:
            raise ValueError("restrict_to names a label outside the label set")
        allowed = torch.zeros(label_embeds.shape[0], dtype=torch.bool)
        allowed[restrict] = True
        sims = sims.masked_fill(~allowed, float("-inf"))
    best, idx = sims.max(dim=-1)
    # max() does not promise the lowest index on ties; argmax on the equality mask does
    idx = (sims == best.unsqueeze(-1)).to(torch.int8).argmax(dim=-1)
    return LabelMap(idx.numpy().astype(np.int64), best.numpy())


@torch.no_grad()
def dense_features(model, images: torch.Tensor) -> torch.Tensor:
    """``B x Hp x Wp x D`` joint-space features."""
    return model.image(images).as_grid()


@torch.no_grad()
def segment_dense(model, images: torch.Tensor, label_embeds: torch.Tensor, restrict_to=None,
                  output_size=None) -> list[np.ndarray]:
    """Top-down segmentation of a batch; maps are upsampled to ``output_size`` (default: image size).

    ``restrict_to`` is either one label-index collection shared by the batch
    or a list with one collection per image (grounding).
    """
    feats = dense_features(model, images)
    size = output_size or tuple(images.shape[1:3])
    per_image = restrict_to is not None and len(restrict_to) > 0 and not np.isscalar(next(iter(restrict_to)))
    out = []
    for i in range(feats.shape[0]):
        r = restrict_to[i] if per_image else restrict_to
        lm = label_features(feats[i], label_embeds, r)
        out.append(resize_nearest(lm.labels, size))
    return out


# ---------------------------------------------------------------- bottom-up grouping


def principal_components(flat: np.ndarray, n: int):
    """Top-``n`` eigenpairs of the feature covariance, eigenvalues descending."""
    centered = flat - flat.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(len(flat), 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n]
    return vals[order], vecs[:, order], centered


def group_features(features, n: int = 8, signed: bool = True) -> np.ndarray:
    """Cluster ``Hp x Wp x D`` features around their top-``n`` principal directions.

    Each direction's sign is fixed so the location with the largest
    ``|projection|`` (first in raster order on ties) projects positively.
    Locations go to the direction with the highest cosine similarity to
    their centered feature (``signed=False`` uses ``|cosine|``). Cluster ids
    are renumbered by first occurrence in raster order.
    """
    feats = np.asarray(features, dtype=np.float64)
    hp, wp, d = feats.shape
    flat = feats.reshape(-1, d)
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(flat) < n:
        raise ValueError(f"grid has {len(flat)} locations, fewer than n={n}")
    vals, vecs, centered = principal_components(flat, n)
    scale = max(np.abs(flat).max(), 1.0)
    if vals[0] <= (1e-12 * scale) ** 2:
        return np.zeros((hp, wp), dtype=np.int64)
    proj = centered @ vecs
    for k in range(vecs.shape[1]):
        j = int(np.argmax(np.abs(proj[:, k])))
        if proj[j, k] < 0:
            vecs[:, k] *= -1
            proj[:, k] *= -1
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    cos = np.divide(proj, norms, out=np.zeros_like(proj), where=norms > 0)
    assign = np.argmax(np.abs(cos) if not signed else cos, axis=1)
    _, first = np.unique(assign, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(vecs.shape[1], dtype=np.int64)
    relabel[np.unique(assign)[order]] = np.arange(len(order))
    return relabel[assign].reshape(hp, wp)


@torch.no_grad()
def group_unsupervised(model, images: torch.Tensor, n: int = 8, output_size=None, signed=True) -> list[np.ndarray]:
    feats = dense_features(model, images).numpy()
    size = output_size or tuple(images.shape[1:3])
    return [resize_nearest(group_features(f, n, signed), size) for f in feats]


# ---------------------------------------------------------------- counterfactual protocol


@dataclass
class CounterfactualResult:
    category: int  # index into (fg_a, fg_b)
    fallback: bool
    scores: tuple


def counterfactual_from_features(features: torch.Tensor, category_embeds: torch.Tensor,
                                 pooled: torch.Tensor | None = None, aggregate: str = "mean",
                                 fallback_scores=None) -> CounterfactualResult:
    """Three-way dense protocol over ``(fg_a, fg_b, background)`` embeddings.

    Locations are assigned to their most similar category; background
    locations are dropped; each foreground category scores the mean (or max)
    similarity of its own locations to its embedding, ``-inf`` when it owns
    none. If every location is background, the pooled image embedding is
    classified against the two foreground embeddings instead (or, for
    text-conditioned pooling, ``fallback_scores`` already computed per
    candidate are used).
    """
    if category_embeds.shape[0] != 3:
        raise ValueError("need exactly (fg_a, fg_b, background) category embeddings")
    lm = label_features(features, category_embeds)
    labels = lm.labels.reshape(-1)
    sims = torch.einsum("hwd,kd->hwk", normalize(features), normalize(category_embeds.to(features.dtype)))
    sims = sims.reshape(-1, 3).numpy()
    scores = []
    for k in (0, 1):
        own = labels == k
        if not own.any():
            scores.append(float("-inf"))
        elif aggregate == "mean":
            scores.append(float(sims[own, k].mean()))
        elif aggregate == "max":
            scores.append(float(sims[own, k].max()))
        else:
            raise ValueError(f"unknown aggregate {aggregate!r}")
    if np.isinf(scores[0]) and np.isinf(scores[1]):
        if fallback_scores is not None:
            s = [float(v) for v in fallback_scores]
            return CounterfactualResult(int(s[1] > s[0]), True, tuple(s))
        if pooled is None:
            raise ValueError("all locations are background and no pooled embedding was given")
        label, s = classify_embedding(pooled, category_embeds[:2])
        return CounterfactualResult(label, True, tuple(s.tolist()))
    return CounterfactualResult(int(scores[1] > scores[0]), False, tuple(scores))


@torch.no_grad()
def classify_counterfactual(model, images: torch.Tensor, category_embeds: torch.Tensor, aggregate: str = "mean"):
    feats = dense_features(model, images)
    _, fallback = classify(model, images, category_embeds[:2])
    return [counterfactual_from_features(feats[i], category_embeds, aggregate=aggregate, fallback_scores=fallback[i])
            for i in range(feats.shape[0])]
