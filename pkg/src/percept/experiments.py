"""Trend experiments on the synthetic datasets: aggregation x init grid, sub-sampling, robustness.

Trained runs are cached on disk keyed by their config digest, so several
tables can share one set of models.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoders import Vocabulary
from .evaluation import accuracy_table, jaccard_similarity, mean_iou, top1_accuracy
from .inference import (LabelPromptSet, classify, classify_counterfactual, embed_label_set, group_unsupervised,
                        segment_dense)
from .synthdata import (CounterfactualConfig, ShapesConfig, counterfactual_prompt_map, default_prompts,
                        make_counterfactual_split, make_shapes_samples)
from .training import PretrainConfig, TrainConfig, TrainData, pretrain_image, restore_state, train_run

log = logging.getLogger(__name__)

POOLS = ("max", "avg", "cls")
INITS = ("random", "self_distill", "supervised")
SEEDS = (0, 1, 2)

# Desk-scale trend setup: one shape colour, five solid backgrounds, untextured shapes.
# With the full palette and textures a 2,000-image run does not learn the shape words at all.
TREND_SHAPES = ShapesConfig(colors=("white",), textures=("solid",), background_textures=("solid",))
TREND_TRAIN = dict(epochs=60, batch_size=64, learning_rate=1e-3, warmup_steps=50, image_size=48, patch_size=6,
                   width=64, depth=2, heads=4, joint_dim=64, text_width=64, text_depth=2, text_heads=4)


@dataclass
class ShapesSetup:
    shapes: ShapesConfig = field(default_factory=ShapesConfig)
    n_train: int = 2000
    n_test: int = 200
    n_single: int = 400
    data_seed: int = 0
    pretrain_steps: int = 600


def trend_setup(**kw) -> ShapesSetup:
    return ShapesSetup(TREND_SHAPES, **kw)


def trend_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TREND_TRAIN, **kw})


@dataclass
class Prepared:
    setup: ShapesSetup
    train: list
    test: list
    single: list
    vocab: Vocabulary
    prompts: LabelPromptSet
    data: TrainData | None = None

    def train_data(self, max_len: int) -> TrainData:
        if self.data is None or self.data.ids.shape[1] != max_len:
            self.data = TrainData.from_arrays(np.stack([s.image for s in self.train]),
                                              [s.caption for s in self.train], self.vocab, max_len)
        return self.data


def prepare_shapes(setup: ShapesSetup) -> Prepared:
    """Train, segmentation-test and single-shape classification splits from disjoint seeds."""
    s = setup.data_seed
    train = make_shapes_samples(setup.shapes, setup.n_train, seed=s)
    test = make_shapes_samples(setup.shapes, setup.n_test, seed=s + 1_000_003)
    single_cfg = dataclasses.replace(setup.shapes, min_shapes=1, max_shapes=1)
    single = make_shapes_samples(single_cfg, setup.n_single, seed=s + 2_000_003)
    vocab = Vocabulary.build([x.caption for x in train])
    prompts = LabelPromptSet(default_prompts(setup.shapes.kinds, setup.shapes.backgrounds, setup.shapes.colors))
    return Prepared(setup, train, test, single, vocab, prompts)


def evaluate_shapes(model, prep: Prepared, n_groups: int = 8) -> dict:
    """Dense mIoU, single-shape zero-shot accuracy and PCA-grouping JS (fractions in [0, 1])."""
    model.eval()
    embeds = embed_label_set(model, prep.vocab, prep.prompts)
    n_labels = len(prep.prompts.labels)
    imgs = torch.as_tensor(np.stack([s.image for s in prep.test]))
    miou, _ = mean_iou(segment_dense(model, imgs, embeds), [s.class_mask for s in prep.test], n_labels)
    single = torch.as_tensor(np.stack([s.image for s in prep.single]))
    truth = [int(s.class_mask.max()) - 1 for s in prep.single]
    pred, _ = classify(model, single, embeds[1:])
    js = jaccard_similarity(group_unsupervised(model, imgs, n_groups), [s.instance_masks for s in prep.test])
    return {"accuracy": top1_accuracy(pred, truth), "miou": float(miou), "js": float(js), "tau": float(model.tau.detach())}


def _pretrain_labels(samples) -> np.ndarray:
    # image-level label for toy supervised pretraining: the largest shape in the scene
    out = []
    for s in samples:
        ids, counts = np.unique(s.class_mask[s.class_mask > 0], return_counts=True)
        out.append(int(ids[np.argmax(counts)]) - 1 if len(ids) else 0)
    return np.array(out)


def pretrained_init(mode: str, cfg: TrainConfig, prep: Prepared, cache_dir, seed: int = 0) -> str:
    """Path of a pretrained image-encoder checkpoint, trained once per (mode, encoder shape, seed)."""
    pcfg = PretrainConfig(steps=prep.setup.pretrain_steps, seed=seed)
    icfg = cfg.image_config()
    tag = hashlib.sha256(repr((icfg, pcfg, prep.setup)).encode()).hexdigest()[:12]
    key = f"{mode}_seed{seed}_{tag}"
    path = os.path.join(cache_dir, "pretrain", key + ".pclp")
    if os.path.exists(path):
        try:
            load_checkpoint(path)
            return path
        except CheckpointError:
            log.warning("discarding unreadable cached pretrain checkpoint %s", path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    images = np.stack([s.image for s in prep.train])
    labels = _pretrain_labels(prep.train) if mode == "supervised" else None
    tensors = pretrain_image(icfg, images, mode, labels=labels, cfg=pcfg)
    save_checkpoint(path, tensors)
    return path


def cell_config(base: TrainConfig, pool: str, init: str, seed: int, init_path: str | None = None) -> TrainConfig:
    return dataclasses.replace(base, image_pool=pool, seed=seed,
                               init_image=init_path if init != "random" else "random")


def train_cached(cfg: TrainConfig, prep: Prepared, run_dir):
    """Train ``cfg`` on the prepared data unless ``run_dir`` already holds that exact run."""
    ckpt = os.path.join(run_dir, "checkpoint.pclp")
    if os.path.exists(ckpt):
        try:
            state = restore_state(run_dir)
            if state.cfg == cfg and state.step == state.total_steps:
                return state.model
        except (CheckpointError, OSError, ValueError) as e:
            log.warning("retraining %s: %s", run_dir, e)
    state = train_run(cfg, prep.train_data(cfg.max_len), prep.vocab, run_dir)
    return state.model


def run_cell(base: TrainConfig, prep: Prepared, pool: str, init: str, seed: int, cache_dir) -> dict:
    init_path = pretrained_init(init, base, prep, cache_dir, seed) if init != "random" else None
    cfg = cell_config(base, pool, init, seed, init_path)
    run_dir = os.path.join(cache_dir, "runs", f"{pool}_{init}_seed{seed}_{cfg.digest().hex()[:12]}")
    model = train_cached(cfg, prep, run_dir)
    metrics = evaluate_shapes(model, prep)
    log.info("%s/%s seed %d: %s", pool, init, seed, metrics)
    return {"pool": pool, "init": init, "seed": seed, **metrics}


def ablation_grid(base: TrainConfig, prep: Prepared, cache_dir, pools=POOLS, inits=INITS, seeds=(0,)) -> list[dict]:
    """Every (pool, init, seed) cell; rows carry accuracy, mIoU and JS."""
    return [run_cell(base, prep, p, i, s, cache_dir) for p in pools for i in inits for s in seeds]


def summarize(rows: list[dict], keys=("pool", "init")) -> list[dict]:
    """Seed means per (pool, init) in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        row = dict(zip(keys, key))
        for m in ("accuracy", "miou", "js"):
            row[m] = float(np.mean([r[m] for r in rs]))
        row["seeds"] = len(rs)
        out.append(row)
    return out


def ablation_csv(summary: list[dict]) -> str:
    lines = ["pool,init,accuracy,miou,js,seeds"]
    for r in summary:
        lines.append(f"{r['pool']},{r['init']},{100 * r['accuracy']:.2f},{100 * r['miou']:.2f},"
                     f"{100 * r['js']:.2f},{r['seeds']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- robustness


def counterfactual_prompts(cfg: CounterfactualConfig) -> LabelPromptSet:
    prompts = counterfactual_prompt_map(cfg)
    cats = {c: list(f) for c, f in cfg.categories.items()}
    cats["background"] = ["background"]
    return LabelPromptSet(prompts, cats)


def robustness_run(base: TrainConfig, pool: str, seed: int, cache_dir, rho: float = 0.95, n_train: int = 2000,
                   n_test: int = 400, cf: CounterfactualConfig | None = None, aggregate: str = "mean"):
    """Train on a rho-correlated split and tabulate accuracy per (category, background)."""
    cf = cf or CounterfactualConfig()
    train = make_counterfactual_split(cf, rho, n_train, seed=seed)
    test = make_counterfactual_split(cf, rho, n_test, seed=seed + 7919, balanced=True)
    vocab = Vocabulary.build([s.caption for s in train])
    prep = Prepared(ShapesSetup(n_train=n_train), train, test, [], vocab, counterfactual_prompts(cf))
    cfg = dataclasses.replace(base, image_pool=pool, seed=seed)
    run_dir = os.path.join(cache_dir, "robust", f"{pool}_rho{rho}_seed{seed}_{cfg.digest().hex()[:12]}")
    model = train_cached(cfg, prep, run_dir).eval()
    cat_names = list(cf.categories)
    embeds = embed_label_set(model, vocab, prep.prompts, categories=True)  # fg_a, fg_b, background
    imgs = torch.as_tensor(np.stack([s.image for s in test]))
    results = classify_counterfactual(model, imgs, embeds, aggregate=aggregate)
    records = []
    for s, r in zip(test, results):
        cat, bg = s.group.split(":")
        records.append((cat, bg, cat_names[r.category]))
    return accuracy_table(records, cf.match)

