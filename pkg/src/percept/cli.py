"""``percept`` command line: data generation, training, evaluation and ablations.

Every command reads an optional flat ``key = value`` config (``--config``)
and writes ``resolved.cfg`` next to its outputs; feeding that file back with
``--config`` repeats the run. Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np
import torch

from .checkpoint import CheckpointError, save_checkpoint
from .config import ConfigError, as_bool, dump_config, load_config
from .netpbm import NetpbmError, read_netpbm

log = logging.getLogger("percept")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
GRAD_TOLERANCE = 1e-4
POOL_MODES = ("max", "avg", "cls", "tsp", "wmp")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- option plumbing


class Options:
    """Config values for one command; every key must be consumed or the run is rejected."""

    def __init__(self, values: dict[str, str], source: str):
        self.values = dict(values)
        self.source = source
        self.resolved: dict[str, object] = {}

    def get(self, key, default, conv=str):
        raw = self.values.pop(key, None)
        if raw is None:
            value = default
        else:
            try:
                value = conv(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{self.source}: {key}: {e}", key=key) from e
        if value is not None:
            self.resolved[key] = value
        return value

    def path(self, key, required=True, must_exist=True):
        value = self.get(key, None)
        if value is None:
            if required:
                raise ConfigError(f"{self.source}: missing required key {key!r}", key=key)
            return None
        value = os.path.abspath(value)
        if must_exist and not os.path.exists(value):
            raise ConfigError(f"{key}: path not found: {value}", key=key, path=value)
        self.resolved[key] = value
        return value

    def train_config(self, **overrides):
        from .training import TrainConfig

        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        flat = {k: self.values.pop(k) for k in list(self.values) if k in fields}
        cfg = dataclasses.replace(TrainConfig.from_flat(flat), **overrides)
        self.resolved.update(cfg.to_flat())
        return cfg

    def finish(self):
        if self.values:
            key = sorted(self.values)[0]
            raise ConfigError(f"{self.source}: unknown config key {key!r}", key=key)


def _csv_list(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in _csv_list(text))


def _write(path, text: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _snapshot(out_dir, opts: Options, command: str):
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "resolved.cfg"), f"# percept {command}\n" + dump_config(opts.resolved))


def _seeded(opts: Options, flag_seed, default=0) -> int:
    seed = opts.get("seed", default, int)
    if flag_seed is not None:
        seed = flag_seed
    opts.resolved["seed"] = seed
    torch.manual_seed(seed)
    return seed


def _require_out(args):
    if not args.out:
        raise UsageError(f"{args.command}: --out DIR is required")
    return os.path.abspath(args.out)


# ---------------------------------------------------------------- dataset helpers


def _load_dataset(path, image_size=None):
    from .synthdata import Dataset
    from .training import resize_images

    ds = Dataset(path)
    ds.validate()
    images, captions, masks, groups, samples = ds.load_arrays()
    images = torch.as_tensor(images)
    if image_size and images.shape[1] != image_size:
        images = resize_images(images, image_size)
    return ds, images, captions, masks, samples


def _label_prompts(args, ds):
    from .inference import LabelPromptSet
    from .synthdata import read_label_file

    if args.prompts:
        if not os.path.exists(args.prompts):
            raise ConfigError(f"--prompts: path not found: {args.prompts}", path=args.prompts)
        prompts = read_label_file(args.prompts)
    else:
        prompts = ds.prompts()
    if ds.labels and list(prompts) != ds.labels:
        raise ConfigError(f"prompt labels {list(prompts)} do not match the dataset labels {ds.labels}")
    return LabelPromptSet(prompts)


def _dominant_label(mask) -> int:
    """Most frequent foreground id of a class mask (0 if there is none)."""
    fg = mask[(mask > 0) & (mask != 255)]
    if fg.size == 0:
        return 0
    ids, counts = np.unique(fg, return_counts=True)
    return int(ids[np.argmax(counts)])


def _load_run(args, opts):
    from .training import restore_state

    if not args.checkpoint:
        raise UsageError(f"{args.command}: --checkpoint RUN_DIR is required")
    path = os.path.abspath(args.checkpoint)
    if os.path.isfile(path):
        path = os.path.dirname(path)
    if not os.path.exists(os.path.join(path, "checkpoint.pclp")):
        raise ConfigError(f"--checkpoint: no checkpoint.pclp in {path}", path=path)
    opts.resolved["checkpoint"] = path
    state = restore_state(path, force=opts.get("force", False, as_bool))
    return state.model.eval(), state.vocab, state.cfg


def _batched(fn, images, batch: int):
    out = []
    for i in range(0, len(images), batch):
        out.extend(fn(images[i : i + batch]))
    return out


def _metrics(out_dir, rows, model, cfg):
    from .evaluation import metrics_csv

    # the learned temperature is reported with every metric set
    rows = list(rows) + [("tau", "model", float(model.tau.detach()))]
    text = metrics_csv(rows, cfg.digest().hex())
    _write(os.path.join(out_dir, "metrics.csv"), text)
    sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, opts: Options) -> int:
    from .synthdata import CounterfactualConfig, ShapesConfig, generate_counterfactual, generate_shapes

    out = _require_out(args)
    seed = _seeded(opts, args.seed)
    kind = opts.get("kind", "shapes")
    count = opts.get("count", 1000, int)
    if count < 1:
        raise ConfigError("count must be >= 1", key="count")
    canvas = opts.get("canvas", 48, int)
    size = (opts.get("size_min", None, float), opts.get("size_max", None, float))
    if kind == "shapes":
        base = ShapesConfig()
        cfg = ShapesConfig(
            canvas=canvas,
            min_shapes=opts.get("min_shapes", base.min_shapes, int),
            max_shapes=opts.get("max_shapes", base.max_shapes, int),
            colors=opts.get("colors", base.colors, _csv_list),
            textures=opts.get("textures", base.textures, _csv_list),
            backgrounds=opts.get("backgrounds", base.backgrounds, _csv_list),
            background_textures=opts.get("background_textures", base.background_textures, _csv_list),
            size_range=(size[0] or base.size_range[0], size[1] or base.size_range[1]),
        )
        opts.finish()
        generate_shapes(out, cfg, count, seed)
    elif kind == "counterfactual":
        base = CounterfactualConfig()
        rho = opts.get("rho", 0.95, float)
        test_count = opts.get("test_count", count, int)
        cfg = CounterfactualConfig(canvas=canvas, size_range=(size[0] or base.size_range[0],
                                                              size[1] or base.size_range[1]))
        opts.finish()
        generate_counterfactual(out, cfg, rho, count, seed, test_count)
    else:
        raise ConfigError(f"kind: expected shapes or counterfactual, got {kind!r}", key="kind")
    _snapshot(out, opts, "gen-data")
    print(f"wrote {kind} dataset to {out}")
    return EXIT_OK


def cmd_pretrain(args, opts: Options) -> int:
    from .training import PretrainConfig, pretrain_image

    out = _require_out(args)
    seed = _seeded(opts, args.seed)
    data = opts.path("data")
    mode = opts.get("mode", "self_distill")
    base = PretrainConfig()
    pcfg = PretrainConfig(steps=opts.get("steps", base.steps, int),
                          batch_size=opts.get("pretrain_batch_size", base.batch_size, int),
                          learning_rate=opts.get("pretrain_learning_rate", base.learning_rate, float),
                          warmup_steps=opts.get("pretrain_warmup_steps", base.warmup_steps, int),
                          seed=seed)
    cfg = opts.train_config(seed=seed)
    opts.finish()
    _, images, _, masks, _ = _load_dataset(data, cfg.image_size)
    labels = None
    if mode == "supervised":
        labels = np.array([max(_dominant_label(m) - 1, 0) for m in masks])
    history: list = []
    tensors = pretrain_image(cfg.image_config(), images.numpy(), mode, labels=labels, cfg=pcfg, history=history)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "image_init.pclp")
    save_checkpoint(path, tensors)
    _snapshot(out, opts, "pretrain")
    losses = [h for h in history if not isinstance(h, tuple)]
    print(f"{mode} pretraining: {len(losses)} steps, final loss {losses[-1]:.4f}; wrote {path}")
    return EXIT_OK


def cmd_train(args, opts: Options) -> int:
    from .encoders import Vocabulary
    from .training import TrainData, restore_state, train_run

    out = _require_out(args)
    seed = _seeded(opts, args.seed)
    data = opts.path("data")
    cfg = opts.train_config(seed=seed)
    opts.finish()
    _, images, captions, _, _ = _load_dataset(data, cfg.image_size)
    state = None
    if args.checkpoint:
        state = restore_state(os.path.abspath(args.checkpoint))
        if state.cfg != cfg:
            raise ConfigError("--checkpoint was written with a different config; refusing to resume")
        vocab = state.vocab
        opts.resolved["checkpoint"] = os.path.abspath(args.checkpoint)
    else:
        vocab = Vocabulary.build(captions)
    td = TrainData.from_arrays(images.numpy(), captions, vocab, cfg.max_len)

    def progress(epoch, st):
        recent = st.losses[-max(1, len(td) // cfg.batch_size):]
        log.info("epoch %d step %d loss %.4f", epoch + 1, st.step, float(np.mean(recent)))

    state = train_run(cfg, td, vocab, out, state=state, progress=progress)
    _write(os.path.join(out, "losses.csv"),
           "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(state.losses)))
    _snapshot(out, opts, "train")
    tail = state.losses[-10:] or [float("nan")]
    print(f"trained {state.step} steps, final loss {np.mean(tail):.4f}; run directory {out}")
    return EXIT_OK


def _eval_setup(args, opts):
    out = _require_out(args)
    _seeded(opts, args.seed)
    model, vocab, cfg = _load_run(args, opts)
    data = opts.path("data")
    batch = opts.get("eval_batch_size", 64, int)
    return out, model, vocab, cfg, data, batch


def cmd_eval_classify(args, opts: Options) -> int:
    from .evaluation import top1_accuracy
    from .inference import classify, embed_label_set

    out, model, vocab, cfg, data, batch = _eval_setup(args, opts)
    opts.finish()
    ds, images, _, masks, _ = _load_dataset(data, cfg.image_size)
    ps = _label_prompts(args, ds)
    embeds = embed_label_set(model, vocab, ps)
    # classify among object labels; the background label is not a class here
    offset = 1 if ps.labels[0] == "background" else 0
    truth = [_dominant_label(m) - offset for m in masks]
    pred = np.concatenate([classify(model, images[i : i + batch], embeds[offset:])[0]
                           for i in range(0, len(images), batch)])
    keep = [i for i, t in enumerate(truth) if t >= 0]
    acc = top1_accuracy(pred[keep], np.array(truth)[keep])
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "predictions.csv"), "index,truth,predicted\n" + "".join(
        f"{i},{ps.labels[truth[i] + offset]},{ps.labels[pred[i] + offset]}\n" for i in keep))
    _metrics(out, [("top1_accuracy", "eval", acc)], model, cfg)
    _snapshot(out, opts, "eval-classify")
    return EXIT_OK


def _eval_dense(args, opts, command, grounded):
    from .evaluation import mean_iou
    from .inference import embed_label_set, segment_dense

    out, model, vocab, cfg, data, batch = _eval_setup(args, opts)
    opts.finish()
    ds, images, _, masks, _ = _load_dataset(data, cfg.image_size)
    ps = _label_prompts(args, ds)
    embeds = embed_label_set(model, vocab, ps)
    size = masks[0].shape
    preds = []
    for i in range(0, len(images), batch):
        restrict = None
        if grounded:
            # oracle label set: exactly the classes present in each ground-truth mask
            restrict = [sorted(int(v) for v in np.unique(m) if v != 255) or [0] for m in masks[i : i + batch]]
        preds.extend(segment_dense(model, images[i : i + batch], embeds, restrict, output_size=size))
    miou, per_class = mean_iou(preds, masks, len(ps.labels))
    rows = [("miou", "eval", miou)] + [(f"iou_{name}", "eval", v) for name, v in zip(ps.labels, per_class)]
    os.makedirs(out, exist_ok=True)
    _metrics(out, rows, model, cfg)
    _snapshot(out, opts, command)
    return EXIT_OK


def cmd_eval_segment(args, opts):
    return _eval_dense(args, opts, "eval-segment", grounded=False)


def cmd_eval_ground(args, opts):
    return _eval_dense(args, opts, "eval-ground", grounded=True)


def cmd_eval_group(args, opts: Options) -> int:
    from .evaluation import jaccard_similarity
    from .inference import group_unsupervised

    out, model, vocab, cfg, data, batch = _eval_setup(args, opts)
    n = opts.get("groups", 8, int)
    signed = opts.get("signed", True, as_bool)
    matching = opts.get("matching", "best")
    opts.finish()
    _, images, _, masks, samples = _load_dataset(data, cfg.image_size)
    size = masks[0].shape
    maps = _batched(lambda x: group_unsupervised(model, x, n, output_size=size, signed=signed), images, batch)
    js = jaccard_similarity(maps, [s.instance_masks for s in samples], matching=matching)
    os.makedirs(out, exist_ok=True)
    _metrics(out, [("jaccard_similarity", "eval", js)], model, cfg)
    _snapshot(out, opts, "eval-group")
    return EXIT_OK


def cmd_eval_robust(args, opts: Options) -> int:
    from .evaluation import accuracy_table
    from .inference import LabelPromptSet, classify_counterfactual, embed_label_set
    from .synthdata import COUNTERFACTUAL_MATCH

    out, model, vocab, cfg, data, batch = _eval_setup(args, opts)
    aggregate = opts.get("aggregate", "mean")
    if aggregate not in ("mean", "max"):
        raise ConfigError(f"aggregate: expected mean or max, got {aggregate!r}", key="aggregate")
    match_text = opts.get("match", ",".join(f"{k}:{v}" for k, v in COUNTERFACTUAL_MATCH.items()))
    match = dict(pair.split(":", 1) for pair in _csv_list(match_text))
    opts.finish()
    ds, images, _, _, samples = _load_dataset(data, cfg.image_size)
    ps = _label_prompts(args, ds)
    cats = ds.categories()
    fg = [c for c in cats if c != "background"]
    if len(fg) != 2 or "background" not in cats:
        raise ConfigError(f"{data}: robustness needs two foreground categories plus background, got {list(cats)}")
    ordered = {c: cats[c] for c in (*fg, "background")}
    embeds = embed_label_set(model, vocab, LabelPromptSet(ps.prompts, ordered), categories=True)
    results = _batched(lambda x: classify_counterfactual(model, x, embeds, aggregate), images, batch)
    records = []
    for s, r in zip(samples, results):
        if not s.group or ":" not in s.group:
            raise ConfigError(f"{data}: sample without a category:background group tag")
        cat, bg = s.group.split(":", 1)
        records.append((cat, bg, fg[r.category]))
    table = accuracy_table(records, match)
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "accuracy_table.csv"), table.to_csv())
    sys.stdout.write(table.to_csv())
    fallbacks = sum(r.fallback for r in results) / len(results)
    _metrics(out, [("mean_abs_delta", "eval", table.mean_abs_delta()), ("fallback_rate", "eval", fallbacks)],
             model, cfg)
    _snapshot(out, opts, "eval-robust")
    return EXIT_OK


def cmd_ablate(args, opts: Options) -> int:
    from .experiments import INITS, POOLS, ShapesSetup, ablation_csv, ablation_grid, prepare_shapes, summarize
    from .synthdata import ShapesConfig

    out = _require_out(args)
    seed = _seeded(opts, args.seed)
    base_shapes = ShapesConfig()
    shapes = ShapesConfig(
        canvas=opts.get("canvas", base_shapes.canvas, int),
        max_shapes=opts.get("max_shapes", base_shapes.max_shapes, int),
        colors=opts.get("colors", base_shapes.colors, _csv_list),
        textures=opts.get("textures", base_shapes.textures, _csv_list),
        backgrounds=opts.get("backgrounds", base_shapes.backgrounds, _csv_list),
        background_textures=opts.get("background_textures", base_shapes.background_textures, _csv_list),
    )
    setup = ShapesSetup(shapes, n_train=opts.get("n_train", 2000, int), n_test=opts.get("n_test", 200, int),
                        n_single=opts.get("n_single", 400, int), data_seed=seed,
                        pretrain_steps=opts.get("pretrain_steps", 600, int))
    seeds = opts.get("seeds", (seed,), _int_list)
    pools = opts.get("pools", POOLS, _csv_list)
    inits = opts.get("inits", INITS, _csv_list)
    cache = opts.get("cache", os.path.join(out, "cache"), os.path.abspath)
    cfg = opts.train_config()
    opts.finish()
    if cfg.image_size != shapes.canvas:
        raise ConfigError("image_size must equal canvas for the ablation", key="image_size")
    prep = prepare_shapes(setup)
    rows = ablation_grid(cfg, prep, cache, pools, inits, seeds)
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "runs.csv"), "pool,init,seed,accuracy,miou,js,tau\n" + "".join(
        f"{r['pool']},{r['init']},{r['seed']},{r['accuracy']!r},{r['miou']!r},{r['js']!r},{r['tau']!r}\n"
        for r in rows))
    table = ablation_csv(summarize(rows))
    _write(os.path.join(out, "ablation.csv"), table)
    sys.stdout.write(table)
    _snapshot(out, opts, "ablate")
    return EXIT_OK


def cmd_check_grad(args, opts: Options) -> int:
    import time

    from .aggregation import ImagePool
    from .model import check_model_gradients, micro_model

    seed = _seeded(opts, args.seed, default=7)
    modes = opts.get("modes", POOL_MODES, _csv_list)
    eps = opts.get("epsilon", 1e-5, float)
    coords = opts.get("coords", 200, int)
    opts.finish()
    worst, lines = 0.0, []
    for mode in modes:
        t = time.time()
        model, batch = micro_model(ImagePool.parse(mode), seed=seed)
        err = check_model_gradients(model, batch, epsilon=eps, n_coords=coords, seed=seed)
        worst = max(worst, err)
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        lines.append(f"{mode},{err:.3e},{time.time() - t:.1f},{status}")
        print(f"{mode:4s} max relative error {err:.3e} ({time.time() - t:.1f}s) {status}", flush=True)
    print(f"max relative error over all modes: {worst:.3e}")
    if args.out:
        out = os.path.abspath(args.out)
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "check_grad.csv"), "mode,max_rel_error,seconds,status\n" + "\n".join(lines) + "\n")
        _snapshot(out, opts, "check-grad")
    return EXIT_OK if worst < GRAD_TOLERANCE else EXIT_FAILED


def cmd_render(args, opts: Options) -> int:
    from .inference import embed_label_set, group_unsupervised, segment_dense
    from .render import save_overlay
    from .training import resize_images

    out = _require_out(args)
    _seeded(opts, args.seed)
    model, vocab, cfg = _load_run(args, opts)
    image_path = opts.path("image")
    mode = opts.get("mode", "labels")
    n = opts.get("groups", 8, int)
    opts.finish()
    raw = read_netpbm(image_path)
    if raw.ndim != 3:
        raise ConfigError(f"image: {image_path} is not an RGB image", path=image_path)
    image = raw.astype(np.float32) / 255.0
    x = resize_images(torch.as_tensor(image)[None], cfg.image_size)
    if mode == "labels":
        from .inference import LabelPromptSet
        from .synthdata import read_label_file

        if not args.prompts:
            raise UsageError("render: --prompts is required in labels mode")
        ps = LabelPromptSet(read_label_file(args.prompts))
        names = ps.labels
        label_map = segment_dense(model, x, embed_label_set(model, vocab, ps), output_size=raw.shape[:2])[0]
    elif mode == "groups":
        label_map = group_unsupervised(model, x, n, output_size=raw.shape[:2])[0]
        names = [f"group {i}" for i in range(int(label_map.max()) + 1)]
    else:
        raise ConfigError(f"mode: expected labels or groups, got {mode!r}", key="mode")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "overlay.ppm")
    save_overlay(path, image, label_map, names)
    _snapshot(out, opts, "render")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset"),
    "pretrain": (cmd_pretrain, "toy image-encoder pretraining (self_distill or supervised)"),
    "train": (cmd_train, "contrastive image-text training"),
    "eval-classify": (cmd_eval_classify, "zero-shot classification accuracy"),
    "eval-segment": (cmd_eval_segment, "dense top-down segmentation mIoU"),
    "eval-ground": (cmd_eval_ground, "segmentation restricted to the labels present in each image"),
    "eval-group": (cmd_eval_group, "bottom-up PCA grouping, Jaccard similarity"),
    "eval-robust": (cmd_eval_robust, "counterfactual-background accuracy table and domain gap"),
    "ablate": (cmd_ablate, "pooling x initialization grid"),
    "check-grad": (cmd_check_grad, "finite-difference gradient check on a micro model"),
    "render": (cmd_render, "colour overlay of a label or group map"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="percept", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
        p.add_argument("--checkpoint", help="run directory (or its checkpoint.pclp)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--prompts", help="label prompt file (label: prompt, prompt, ...)")
    return parser


def _threads():
    raw = os.environ.get("PERCEPT_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"PERCEPT_THREADS: expected an integer, got {raw!r}", key="PERCEPT_THREADS")
        if n < 1:
            raise ConfigError("PERCEPT_THREADS must be >= 1", key="PERCEPT_THREADS")
        torch.set_num_threads(n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        _threads()
        values, source = {}, "<defaults>"
        if args.config:
            values, source = load_config(args.config), os.path.abspath(args.config)
        # path flags may also come from the config (as in a resolved.cfg snapshot); flags win
        for key in ("checkpoint", "prompts"):
            from_file = values.pop(key, None)
            if getattr(args, key) is None and from_file is not None:
                setattr(args, key, from_file)
        opts = Options(values, source)
        if args.prompts:
            opts.resolved["prompts"] = os.path.abspath(args.prompts)
        handler = COMMANDS[args.command][0]
        return handler(args, opts)
    except (UsageError, ConfigError, CheckpointError, NetpbmError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        # dataset and prompt-file problems surface as ValueError subclasses
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, RuntimeError, OSError) as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
