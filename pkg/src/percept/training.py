"""Contrastive training loop, token sub-sampling and toy image pretraining."""
from __future__ import annotations

import copy
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import ImagePool
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import ConfigError, as_bool, config_digest, dump_config
from .encoders import ImageEncoder, ImageEncoderConfig, TextEncoderConfig, Vocabulary, tokenize_batch
from .model import JointModel
from .objective import LossConfig, contrastive_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    weight_decay: float = 1e-2
    image_pool: str = "max"
    text_pool: str = "avg"
    freeze_image: bool = False
    freeze_text: bool = False
    init_image: str = "random"
    init_text: str = "random"
    subsample: bool = False
    subsample_scale: int = 2
    subsample_keep: str = "base"  # "base", "fraction:0.2" or an explicit count
    tau: float = 0.07
    learnable_tau: bool = True
    tau_min: float = 0.01
    tau_max: float = 1.0
    image_size: int = 48
    patch_size: int = 6
    width: int = 64
    depth: int = 2
    heads: int = 4
    joint_dim: int = 64
    mlp_ratio: int = 2
    text_width: int = 64
    text_depth: int = 2
    text_heads: int = 4
    max_len: int = 16
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives", key="batch_size")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size", key="image_size")
        ImagePool.parse(self.image_pool)
        if self.subsample and self.keep_count() > self.scaled_grid()[0] * self.scaled_grid()[1]:
            raise ConfigError("subsample keep count exceeds the scaled grid", key="subsample_keep")

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}", key=key)
            t = types[key]
            try:
                if t == "bool":
                    kwargs[key] = as_bool(raw, key)
                elif t == "int":
                    kwargs[key] = int(raw)
                elif t == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError as e:
                raise ConfigError(f"{key}: {e}", key=key) from e
        return cls(**kwargs)

    def to_flat(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        return config_digest(self.to_flat())

    @property
    def base_grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    def scaled_grid(self) -> tuple[int, int]:
        g = self.image_size * self.subsample_scale // self.patch_size
        return (g, g)

    def keep_count(self) -> int:
        """Tokens kept per image when sub-sampling."""
        spec = self.subsample_keep.strip().lower()
        if spec == "base":
            return self.base_grid[0] * self.base_grid[1]
        if spec.startswith("fraction"):
            frac = float(spec.partition(":")[2] or 0.2)
            n = self.scaled_grid()[0] * self.scaled_grid()[1]
            return max(1, int(round(frac * n)))
        return int(spec)

    def image_config(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(self.patch_size, self.width, self.depth, self.heads, self.joint_dim,
                                  self.base_grid, use_cls=ImagePool.parse(self.image_pool).kind == "cls",
                                  mlp_ratio=self.mlp_ratio)

    def text_config(self, vocab_size: int) -> TextEncoderConfig:
        return TextEncoderConfig(vocab_size, self.max_len, self.text_width, self.text_depth,
                                 self.text_heads, self.joint_dim, self.mlp_ratio)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.learnable_tau, self.tau_min, self.tau_max)


# ---------------------------------------------------------------- schedule / sampling


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then cosine to 0 at ``total``."""
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    t = min(1.0, (step - warmup) / (total - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


def subsample_tokens(grid: tuple[int, int], keep_count: int, rng: np.random.Generator) -> np.ndarray:
    """``keep_count`` distinct raster indices drawn uniformly without replacement, sorted."""
    n = grid[0] * grid[1]
    if not 1 <= keep_count <= n:
        raise ValueError(f"keep_count {keep_count} outside [1, {n}]")
    return np.sort(rng.choice(n, size=keep_count, replace=False))


def resize_images(images: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of ``B x H x W x 3`` images to ``size x size``."""
    if images.shape[1] == size and images.shape[2] == size:
        return images
    x = images.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1).clamp(0.0, 1.0)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    cfg: TrainConfig
    vocab: Vocabulary
    model: JointModel
    optimizer: torch.optim.Optimizer | None
    total_steps: int = 0
    step: int = 0
    losses: list = field(default_factory=list)

    def tensors(self) -> dict[str, np.ndarray]:
        """Every named tensor of the state, ready for :func:`save_checkpoint`."""
        out = {name: p.detach().cpu().numpy() for name, p in self.model.state_dict().items()}
        names = {id(p): n for n, p in self.model.named_parameters()}
        if self.optimizer is not None:
            for group in self.optimizer.param_groups:
                for p in group["params"]:
                    st = self.optimizer.state.get(p)
                    if st:
                        out[f"optim.exp_avg.{names[id(p)]}"] = st["exp_avg"].numpy()
                        out[f"optim.exp_avg_sq.{names[id(p)]}"] = st["exp_avg_sq"].numpy()
        out["train.step"] = np.array([self.step], dtype=np.float32)
        out["train.total_steps"] = np.array([self.total_steps], dtype=np.float32)
        return out

    def save(self, directory) -> str:
        """Write ``checkpoint.pclp``, ``config.cfg`` and ``vocab.txt`` under ``directory``."""
        directory = os.fspath(directory)
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "checkpoint.pclp")
        save_checkpoint(path, self.tensors(), self.cfg.digest())
        _write_text(os.path.join(directory, "config.cfg"), dump_config(self.cfg.to_flat()))
        _write_text(os.path.join(directory, "vocab.txt"), self.vocab.to_text())
        return path


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def _no_decay(name: str, p: torch.Tensor) -> bool:
    # tau, biases, layer-norm gains (all 1-D) and the CLS token stay undecayed
    return p.ndim <= 1 or name == "log_tau"


def build_model(cfg: TrainConfig, vocab: Vocabulary) -> JointModel:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = JointModel(cfg.image_config(), cfg.text_config(len(vocab)), ImagePool.parse(cfg.image_pool),
                           cfg.text_pool, cfg.loss_config())
    for side, init in (("image", cfg.init_image), ("text", cfg.init_text)):
        if init and init != "random":
            tensors, _ = load_checkpoint(init, force=True)
            module = getattr(model, side)
            loaded, missing, _ = load_into(module, tensors, prefix=f"{side}.")
            if not loaded:
                raise ValueError(f"{init}: no {side}-encoder tensors found")
            log.info("%s init from %s: %d tensors loaded, %d left at random init (%s)",
                     side, init, len(loaded), len(missing), ", ".join(missing))
    return model


def init_state(cfg: TrainConfig, vocab: Vocabulary, total_steps: int = 0) -> TrainState:
    model = build_model(cfg, vocab)
    if cfg.freeze_image:
        model.image.requires_grad_(False)
    if cfg.freeze_text:
        model.text.requires_grad_(False)
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if _no_decay(name, p) else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate, betas=(0.9, 0.98), eps=1e-6,
    )
    return TrainState(cfg, vocab, model, opt, total_steps=total_steps)


def restore_state(directory, dataset_vocab: Vocabulary | None = None, force: bool = False) -> TrainState:
    """Rebuild a :class:`TrainState` from a directory written by :meth:`TrainState.save`."""
    from .config import load_config

    directory = os.fspath(directory)
    cfg = TrainConfig.from_flat(load_config(os.path.join(directory, "config.cfg")))
    vocab_path = os.path.join(directory, "vocab.txt")
    if os.path.exists(vocab_path):
        with open(vocab_path, encoding="utf-8") as f:
            vocab = Vocabulary.from_words(f.read().splitlines())
    elif dataset_vocab is not None:
        vocab = dataset_vocab
    else:
        raise FileNotFoundError(vocab_path)
    tensors, _ = load_checkpoint(os.path.join(directory, "checkpoint.pclp"), cfg.digest(), force=force)
    state = init_state(dataclasses.replace(cfg, init_image="random", init_text="random"), vocab)
    state.cfg = cfg
    load_into(state.model, {k: v for k, v in tensors.items() if not k.startswith(("optim.", "train."))})
    state.step = int(tensors["train.step"][0])
    state.total_steps = int(tensors["train.total_steps"][0])
    names = dict(state.model.named_parameters())
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            name = next(n for n, q in names.items() if q is p)
            key = f"optim.exp_avg.{name}"
            if key in tensors:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(state.step)),
                    "exp_avg": torch.from_numpy(tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim.exp_avg_sq.{name}"].copy()),
                }
    return state


# ---------------------------------------------------------------- training


def _check_finite(model: nn.Module, loss: torch.Tensor):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in parameter {name}")
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss (tensor: logits)")


def train_step(state: TrainState, images: torch.Tensor, ids: torch.Tensor, pad_mask: torch.Tensor) -> TrainState:
    """One optimizer update on a batch; returns ``state`` with ``step`` advanced."""
    cfg = state.cfg
    model = state.model
    model.train()
    keep = None
    if cfg.subsample:
        images = resize_images(images, cfg.image_size * cfg.subsample_scale)
        rng = np.random.default_rng([cfg.seed, state.step, 0x5B])
        grid = cfg.scaled_grid()
        keep = torch.from_numpy(np.stack([subsample_tokens(grid, cfg.keep_count(), rng) for _ in range(len(images))]))
    elif images.shape[1] != cfg.image_size:
        images = resize_images(images, cfg.image_size)
    logits = model.logits(images, ids, pad_mask, keep)
    if not torch.isfinite(logits).all():
        _check_finite(model, torch.tensor(float("nan")))
    loss = contrastive_loss(logits)
    _check_finite(model, loss)
    lr = lr_at(state.step, cfg.learning_rate, cfg.warmup_steps, max(state.total_steps, 1))
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.optimizer.step()
    state.step += 1
    state.losses.append(float(loss.detach()))
    return state


@dataclass
class TrainData:
    images: torch.Tensor  # N x H x W x 3
    ids: torch.Tensor
    pad_mask: torch.Tensor
    captions: list

    @classmethod
    def from_arrays(cls, images, captions, vocab: Vocabulary, max_len: int) -> "TrainData":
        ids, mask = tokenize_batch(captions, vocab, max_len)
        return cls(torch.as_tensor(np.asarray(images, dtype=np.float32)), ids, mask, list(captions))

    def __len__(self):
        return len(self.captions)


def train_run(cfg: TrainConfig, data: TrainData, vocab: Vocabulary, out_dir=None, state: TrainState | None = None,
              progress=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of contrastive training.

    Batches are drawn from a per-epoch permutation seeded by ``(seed, epoch)``;
    the trailing partial batch is dropped. Checkpoints go to ``out_dir`` every
    ``checkpoint_every`` steps (0 = only the final one).
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    steps_per_epoch = len(data) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"dataset of {len(data)} samples is smaller than one batch ({cfg.batch_size})")
    total = steps_per_epoch * cfg.epochs
    if state is None:
        state = init_state(cfg, vocab, total)
    start_epoch = state.step // steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        perm = np.random.default_rng([cfg.seed, epoch, 0xE9]).permutation(len(data))
        first = state.step - epoch * steps_per_epoch
        for b in range(first, steps_per_epoch):
            idx = torch.from_numpy(perm[b * cfg.batch_size : (b + 1) * cfg.batch_size])
            train_step(state, data.images[idx], data.ids[idx], data.pad_mask[idx])
            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                state.save(os.path.join(out_dir, f"step{state.step:06d}"))
        if progress is not None:
            progress(epoch, state)
    if out_dir is not None:
        state.save(out_dir)
    state.model.eval()
    return state


# ---------------------------------------------------------------- pretraining


def augment_views(images: torch.Tensor, rng: np.random.Generator, out_size: int) -> torch.Tensor:
    """Random resized crop (area 0.5-1), horizontal flip (p=0.5), brightness/contrast jitter (+-0.2)."""
    b, h, w, _ = images.shape
    out = []
    for i in range(b):
        area = rng.uniform(0.5, 1.0)
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        ch = min(h, max(1, int(round(math.sqrt(area / aspect) * h))))
        cw = min(w, max(1, int(round(math.sqrt(area * aspect) * w))))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        crop = images[i, y0 : y0 + ch, x0 : x0 + cw].permute(2, 0, 1).unsqueeze(0)
        crop = F.interpolate(crop, size=(out_size, out_size), mode="bilinear", align_corners=False)[0]
        if rng.random() < 0.5:
            crop = crop.flip(-1)
        brightness = 1.0 + rng.uniform(-0.2, 0.2)
        contrast = 1.0 + rng.uniform(-0.2, 0.2)
        mean = crop.mean()
        crop = ((crop - mean) * contrast + mean) * brightness
        out.append(crop.clamp(0, 1).permute(1, 2, 0))
    return torch.stack(out)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    for t, s in zip(teacher.parameters(), student.parameters()):
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


class DinoHead(nn.Module):
    def __init__(self, width: int, hidden: int = 128, out_dim: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.last = nn.Linear(hidden, out_dim, bias=False)

    def forward(self, x):
        return self.last(F.normalize(self.mlp(x), dim=-1))


class _Backbone(nn.Module):
    """Image encoder trunk plus a head on the average-pooled trunk tokens."""

    def __init__(self, encoder: ImageEncoder, head: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, images):
        tokens, _, _, _ = self.encoder.backbone(images)
        return self.head(tokens.mean(dim=1))


@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    weight_decay: float = 0.04
    seed: int = 0
    momentum: float = 0.996
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    out_dim: int = 64


class SelfDistiller:
    """Student/teacher self-distillation on two augmented views.

    The teacher is an exponential moving average of the student and never
    receives gradients; its outputs are centered and sharpened.
    """

    def __init__(self, encoder: ImageEncoder, cfg: PretrainConfig):
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed + 1)
            head = DinoHead(encoder.cfg.width, out_dim=cfg.out_dim)
        self.student = _Backbone(encoder, head)
        self.teacher = copy.deepcopy(self.student).requires_grad_(False)
        self.center = torch.zeros(cfg.out_dim)
        params = [p for p in self.student.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        self.step_count = 0

    def loss(self, views_a, views_b):
        cfg = self.cfg
        s_a = self.student(views_a) / cfg.student_temp
        s_b = self.student(views_b) / cfg.student_temp
        with torch.no_grad():
            t_a_raw, t_b_raw = self.teacher(views_a), self.teacher(views_b)
            t_a = torch.softmax((t_a_raw - self.center) / cfg.teacher_temp, dim=-1)
            t_b = torch.softmax((t_b_raw - self.center) / cfg.teacher_temp, dim=-1)
        loss = 0.5 * (-(t_a * F.log_softmax(s_b, dim=-1)).sum(-1).mean()
                      - (t_b * F.log_softmax(s_a, dim=-1)).sum(-1).mean())
        batch_center = torch.cat([t_a_raw, t_b_raw]).mean(dim=0)
        return loss, batch_center

    def step(self, images: torch.Tensor, rng: np.random.Generator, lr: float | None = None) -> float:
        size = images.shape[1]
        a = augment_views(images, rng, size)
        b = augment_views(images, rng, size)
        loss, batch_center = self.loss(a, b)
        if lr is not None:
            for g in self.optimizer.param_groups:
                g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        ema_update(self.teacher, self.student, self.cfg.momentum)
        m = self.cfg.center_momentum
        self.center = self.center * m + batch_center * (1 - m)
        self.step_count += 1
        return float(loss.detach())


def encoder_tensors(encoder: ImageEncoder) -> dict[str, np.ndarray]:
    """Trunk tensors under the ``image.`` prefix; the joint projection is left out."""
    return {f"image.{k}": v.detach().cpu().numpy() for k, v in encoder.state_dict().items() if not k.startswith("proj.")}


def pretrain_image(image_cfg: ImageEncoderConfig, images, mode: str, labels=None,
                   cfg: PretrainConfig | None = None, history=None) -> dict[str, np.ndarray]:
    """Toy image pretraining; returns encoder tensors loadable into a :class:`JointModel`.

    ``mode`` is ``"self_distill"`` or ``"supervised"`` (needs integer ``labels``).
    """
    cfg = cfg or PretrainConfig()
    if mode not in ("self_distill", "supervised"):
        raise ValueError(f"unknown pretraining mode {mode!r}")
    if mode == "supervised" and labels is None:
        raise ValueError("supervised pretraining needs image-level class labels")
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        encoder = ImageEncoder(image_cfg)
    n = len(images)
    bs = min(cfg.batch_size, n)
    if mode == "self_distill":
        trainer = SelfDistiller(encoder, cfg)
        for step in range(cfg.steps):
            rng = np.random.default_rng([cfg.seed, step, 0xD1])
            idx = torch.from_numpy(rng.choice(n, size=bs, replace=False))
            lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps, cfg.steps)
            loss = trainer.step(images[idx], rng, lr)
            if history is not None:
                history.append(loss)
        return encoder_tensors(encoder)

    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 1)
        head = nn.Linear(image_cfg.width, int(labels.max()) + 1)
    net = _Backbone(encoder, head)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step, 0x5C])
        idx = torch.from_numpy(rng.choice(n, size=bs, replace=False))
        for g in opt.param_groups:
            g["lr"] = lr_at(step, cfg.learning_rate, cfg.warmup_steps, cfg.steps)
        loss = F.cross_entropy(net(images[idx]), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(float(loss.detach()))
    if history is not None:
        with torch.no_grad():
            acc = (net(images).argmax(-1) == labels).float().mean().item()
        history.append(("train_accuracy", acc))
    return encoder_tensors(encoder)
