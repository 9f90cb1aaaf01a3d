"""Procedural shapes-with-captions datasets and the on-disk manifest format.

Scenes are described by a :class:`SceneSpec` in normalized canvas
coordinates and rasterized analytically at pixel centers, so the class mask,
the instance masks and the RGB image all come from the same description and
agree pixel for pixel.

On-disk layout (one directory per split)::

    manifest.tsv        header lines starting with '#', then one record per
                        sample: path<TAB>caption<TAB>maskpath<TAB>inst1;inst2<TAB>group
    prompts.txt         label: prompt1, prompt2, ...
    categories.txt      category: label1, label2, ...   (optional)
    images/*.ppm        binary P6
    masks/*.pgm         binary P5 class ids (255 = ignore)
    instances/*.pgm     binary P5, nonzero = inside the instance

Any external dataset converted to this layout loads with :class:`Dataset`.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .netpbm import read_netpbm, write_pgm, write_ppm

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IGNORE_ID = 255

SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "diamond", "star", "bar")
TEXTURES = ("solid", "striped", "dotted")

SHAPE_COLORS = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.20, 0.90, 0.90),
    "orange": (1.00, 0.55, 0.10),
    "white": (0.97, 0.97, 0.97),
}

BACKGROUND_COLORS = {
    "gray": (0.45, 0.45, 0.45),
    "brown": (0.45, 0.30, 0.18),
    "navy": (0.10, 0.12, 0.35),
    "olive": (0.40, 0.42, 0.15),
    "black": (0.06, 0.06, 0.06),
}

# counterfactual split: two foreground families, two backgrounds
COUNTERFACTUAL_CATEGORIES = {
    "round": ("circle", "ring", "star", "cross"),
    "angular": ("square", "triangle", "diamond", "bar"),
}
COUNTERFACTUAL_BACKGROUNDS = {
    "water": ((0.10, 0.35, 0.75), "striped"),
    "land": ((0.35, 0.55, 0.15), "dotted"),
}
COUNTERFACTUAL_MATCH = {"round": "water", "angular": "land"}


@dataclass
class Shape:
    kind: str
    color: str
    texture: str
    cx: float
    cy: float
    size: float  # bounding radius, fraction of the canvas side


@dataclass
class SceneSpec:
    size: int
    shapes: list[Shape]
    background: str
    background_texture: str = "solid"
    seed: int = 0
    background_rgb: tuple | None = None  # overrides the palette lookup


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    caption: str
    class_mask: np.ndarray | None = None  # H x W uint8
    instance_masks: list[np.ndarray] = field(default_factory=list)
    group: str = ""


@dataclass
class ShapesConfig:
    canvas: int = 48
    min_shapes: int = 1
    max_shapes: int = 3
    kinds: tuple = SHAPE_KINDS
    colors: tuple = tuple(SHAPE_COLORS)
    textures: tuple = TEXTURES
    backgrounds: tuple = tuple(BACKGROUND_COLORS)
    background_textures: tuple = ("solid", "striped", "dotted")
    size_range: tuple = (0.15, 0.25)
    max_overlap: float = 0.0
    max_tries: int = 100


def labels_for(kinds=SHAPE_KINDS) -> list[str]:
    return ["background", *kinds]


# ---------------------------------------------------------------- rasterizer


def _pixel_grid(height: int, width: int):
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.meshgrid(xs, ys)


def _inside_polygon(x, y, verts) -> np.ndarray:
    """Even-odd rule over pixel-center coordinates."""
    inside = np.zeros(x.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xint)
    return inside


def _star_vertices(r_out: float, r_in: float, points: int = 5):
    verts = []
    for k in range(2 * points):
        r = r_out if k % 2 == 0 else r_in
        a = -np.pi / 2 + k * np.pi / points
        verts.append((r * np.cos(a), r * np.sin(a)))
    return verts


def shape_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    """Boolean coverage of ``shape`` at pixel centers.

    Every kind fits inside a disc of radius ``shape.size`` around its center,
    which is what the non-overlap placement test relies on.
    """
    X, Y = _pixel_grid(height, width)
    x = X - shape.cx
    y = Y - shape.cy
    s = shape.size
    ax, ay = np.abs(x), np.abs(y)
    kind = shape.kind
    if kind == "circle":
        return x * x + y * y <= s * s
    if kind == "ring":
        r2 = x * x + y * y
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if kind == "square":
        return np.maximum(ax, ay) <= 0.7 * s
    if kind == "diamond":
        return ax + ay <= s
    if kind == "cross":
        arm, half = 0.95 * s, 0.32 * s
        return ((ax <= arm) & (ay <= half)) | ((ay <= arm) & (ax <= half))
    if kind == "bar":
        return (ax <= 0.95 * s) & (ay <= 0.3 * s)
    if kind == "triangle":
        verts = [(0.0, -s), (0.866 * s, 0.5 * s), (-0.866 * s, 0.5 * s)]
        return _inside_polygon(x, y, verts)
    if kind == "star":
        return _inside_polygon(x, y, _star_vertices(s, 0.45 * s))
    raise ValueError(f"unknown shape kind {kind!r}")


def _texture_factor(texture: str, height: int, width: int, phase: float = 0.0) -> np.ndarray:
    X, Y = _pixel_grid(height, width)
    if texture == "solid":
        return np.ones_like(X)
    if texture == "striped":
        band = np.floor((X + Y + phase) / 0.08).astype(int) % 2
        return np.where(band == 0, 1.0, 0.55)
    if texture == "dotted":
        p = 0.1
        dx = np.mod(X + phase, p) - p / 2
        dy = np.mod(Y + phase, p) - p / 2
        return np.where(dx * dx + dy * dy <= (0.3 * p) ** 2, 0.5, 1.0)
    raise ValueError(f"unknown texture {texture!r}")


def render_scene(spec: SceneSpec, size: int | None = None, kinds=SHAPE_KINDS):
    """Rasterize ``spec`` at ``size`` (defaults to ``spec.size``).

    Returns ``(image, class_mask, instance_masks)``; class ids are 0 for
    background and ``1 + kinds.index(kind)`` for shapes.
    """
    n = spec.size if size is None else size
    rgb = spec.background_rgb or BACKGROUND_COLORS[spec.background]
    factor = _texture_factor(spec.background_texture, n, n, phase=0.03)
    image = factor[..., None] * np.asarray(rgb)[None, None, :]
    class_mask = np.zeros((n, n), dtype=np.uint8)
    instances = []
    for sh in spec.shapes:
        m = shape_mask(sh, n, n)
        tex = _texture_factor(sh.texture, n, n)
        color = np.asarray(SHAPE_COLORS[sh.color])
        image[m] = tex[m][:, None] * color[None, :]
        class_mask[m] = 1 + kinds.index(sh.kind)
        instances.append(m)
    # later shapes paint over earlier ones; keep instance masks consistent with that
    for i in range(len(instances)):
        for later in instances[i + 1 :]:
            instances[i] = instances[i] & ~later
    return image.astype(np.float32), class_mask, instances


def caption_for(spec: SceneSpec, rng: np.random.Generator, background_word: str | None = None) -> str:
    """Caption from the fixed grammar; shape order is shuffled per sample."""
    bg = background_word or spec.background
    if not spec.shapes:
        return f"a {bg} background"
    order = rng.permutation(len(spec.shapes))
    parts = [f"a {spec.shapes[i].color} {spec.shapes[i].kind}" for i in order]
    return " and ".join(parts) + f" on a {bg} background"


def _place_shapes(rng, cfg: ShapesConfig, kinds: list[str]):
    shapes: list[Shape] = []
    lo, hi = cfg.size_range
    for kind in kinds:
        for _ in range(cfg.max_tries):
            s = rng.uniform(lo, hi)
            cx, cy = rng.uniform(s, 1 - s, size=2)
            ok = True
            for other in shapes:
                d = np.hypot(cx - other.cx, cy - other.cy)
                # overlap measured on the bounding discs
                if d < (s + other.size) * (1.0 - cfg.max_overlap):
                    ok = False
                    break
            if ok:
                shapes.append(
                    Shape(kind, rng.choice(cfg.colors), rng.choice(cfg.textures), float(cx), float(cy), float(s))
                )
                break
        else:
            return None
    return shapes


def sample_scene(cfg: ShapesConfig, seed: int, index: int, max_attempts: int = 1000) -> SceneSpec:
    """Draw one scene; infeasible placements are retried with a fresh sub-seed."""
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, index, attempt])
        n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        kinds = [str(k) for k in rng.choice(cfg.kinds, size=n)]
        shapes = _place_shapes(rng, cfg, kinds)
        if shapes is not None:
            bg = str(rng.choice(cfg.backgrounds))
            tex = str(rng.choice(cfg.background_textures))
            return SceneSpec(cfg.canvas, shapes, bg, tex, seed=seed)
        log.info("sample %d: placement infeasible on attempt %d, regenerating", index, attempt)
    raise ValueError(f"sample {index}: no feasible placement in {max_attempts} attempts; shapes too large for the canvas")


# ---------------------------------------------------------------- prompt files


def write_label_file(path, mapping: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, items in mapping.items():
            f.write(f"{key}: {', '.join(items)}\n")


def read_label_file(path) -> dict[str, list[str]]:
    """Parse ``key: item1, item2, ...`` lines (prompt and category files)."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'label: prompt, ...'")
            key, rest = line.split(":", 1)
            key = key.strip()
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate label {key!r}")
            items = [p.strip() for p in rest.split(",") if p.strip()]
            if not items:
                raise ValueError(f"{path}:{lineno}: label {key!r} has no entries")
            out[key] = items
    return out


def default_prompts(kinds=SHAPE_KINDS, backgrounds=tuple(BACKGROUND_COLORS), colors=tuple(SHAPE_COLORS)) -> dict:
    """Prompt ensembles phrased like the captions: one prompt per colour (or background colour)."""
    prompts = {"background": [f"a {b} background" for b in backgrounds]}
    for k in kinds:
        prompts[k] = [f"a {c} {k}" for c in colors]
    return prompts


# ---------------------------------------------------------------- dataset i/o


class DatasetError(ValueError):
    pass


@dataclass
class Record:
    image_path: str
    caption: str
    mask_path: str
    instance_paths: list[str]
    group: str


class Dataset:
    """Lazy reader for a manifest directory."""

    def __init__(self, root):
        self.root = os.fspath(root)
        path = os.path.join(self.root, "manifest.tsv")
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        self.header: dict[str, str] = {}
        self.records: list[Record] = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].partition(":")
                    self.header[key.strip()] = value.strip()
                    continue
                cols = line.split("\t")
                if len(cols) != 5:
                    raise DatasetError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
                img, cap, mask, inst, group = cols
                self.records.append(
                    Record(img, cap, mask, [p for p in inst.split(";") if p], "" if group == "-" else group)
                )
        version = int(self.header.get("version", MANIFEST_VERSION))
        if version != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {version}")
        self.labels = [s.strip() for s in self.header.get("labels", "").split(",") if s.strip()]
        self.prompts_file = self.header.get("prompts") or None
        self.categories_file = self.header.get("categories") or None

    def __len__(self):
        return len(self.records)

    def _path(self, rel):
        return os.path.join(self.root, rel)

    def _read(self, rel):
        path = self._path(rel)
        if not os.path.exists(path):
            raise DatasetError(f"missing file: {path}")
        return read_netpbm(path)

    def __getitem__(self, i) -> ImageSample:
        r = self.records[i]
        image = self._read(r.image_path).astype(np.float32) / 255.0
        mask = self._read(r.mask_path) if r.mask_path and r.mask_path != "-" else None
        instances = [self._read(p) > 0 for p in r.instance_paths]
        return ImageSample(image, r.caption, mask, instances, r.group)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def prompts(self) -> dict[str, list[str]]:
        if self.prompts_file is None:
            raise DatasetError(f"{self.root}: manifest names no prompt file")
        return read_label_file(self._path(self.prompts_file))

    def categories(self) -> dict[str, list[str]]:
        if self.categories_file is None:
            raise DatasetError(f"{self.root}: manifest names no category file")
        return read_label_file(self._path(self.categories_file))

    def validate(self) -> None:
        """Check every referenced file exists and masks agree with their image."""
        n_labels = len(self.labels)
        for i, r in enumerate(self.records):
            img = self._read(r.image_path)
            if img.ndim != 3:
                raise DatasetError(f"{self._path(r.image_path)}: not an RGB image")
            if r.mask_path and r.mask_path != "-":
                mask = self._read(r.mask_path)
                if mask.shape != img.shape[:2]:
                    raise DatasetError(
                        f"dimension mismatch: {self._path(r.mask_path)} is {mask.shape}, image is {img.shape[:2]}"
                    )
                bad = (mask != IGNORE_ID) & (mask >= n_labels)
                if n_labels and bad.any():
                    raise DatasetError(
                        f"unknown label id {int(mask[bad][0])} in {self._path(r.mask_path)} ({n_labels} labels)"
                    )
            for p in r.instance_paths:
                inst = self._read(p)
                if inst.shape != img.shape[:2]:
                    raise DatasetError(f"dimension mismatch: {self._path(p)} is {inst.shape}, image is {img.shape[:2]}")

    def load_arrays(self):
        """All images as one N x H x W x 3 float32 array plus captions, masks and groups."""
        samples = list(self)
        images = np.stack([s.image for s in samples])
        masks = [s.class_mask for s in samples]
        return images, [s.caption for s in samples], masks, [s.group for s in samples], samples


def write_dataset(root, samples, labels, prompts=None, categories=None) -> str:
    """Write samples and a manifest under ``root``; returns the manifest path."""
    root = os.fspath(root)
    for sub in ("images", "masks", "instances"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    lines = [f"# version: {MANIFEST_VERSION}", f"# labels: {','.join(labels)}"]
    if prompts is not None:
        write_label_file(os.path.join(root, "prompts.txt"), prompts)
        lines.append("# prompts: prompts.txt")
    if categories is not None:
        write_label_file(os.path.join(root, "categories.txt"), categories)
        lines.append("# categories: categories.txt")
    for i, s in enumerate(samples):
        img_rel = f"images/{i:06d}.ppm"
        write_ppm(os.path.join(root, img_rel), s.image)
        mask_rel = "-"
        if s.class_mask is not None:
            mask_rel = f"masks/{i:06d}.pgm"
            write_pgm(os.path.join(root, mask_rel), s.class_mask)
        inst_rels = []
        for j, m in enumerate(s.instance_masks):
            rel = f"instances/{i:06d}_{j}.pgm"
            write_pgm(os.path.join(root, rel), np.where(m, 255, 0).astype(np.uint8))
            inst_rels.append(rel)
        for text in (s.caption, s.group):
            if "\t" in text or "\n" in text:
                raise DatasetError(f"sample {i}: tabs/newlines not allowed in caption or group")
        lines.append("\t".join([img_rel, s.caption, mask_rel, ";".join(inst_rels), s.group or "-"]))
    path = os.path.join(root, "manifest.tsv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- generators


def make_shapes_samples(cfg: ShapesConfig, count: int, seed: int) -> list[ImageSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    for i in range(count):
        spec = sample_scene(cfg, seed, i)
        image, mask, inst = render_scene(spec, kinds=cfg.kinds)
        cap = caption_for(spec, np.random.default_rng([seed, i, 1 << 20]))
        samples.append(ImageSample(image, cap, mask, inst, ""))
    return samples


def generate_shapes(root, cfg: ShapesConfig | None = None, count: int = 1, seed: int = 0) -> str:
    """Generate a shapes dataset under ``root``; deterministic in (cfg, seed)."""
    cfg = cfg or ShapesConfig()
    samples = make_shapes_samples(cfg, count, seed)
    return write_dataset(root, samples, labels_for(cfg.kinds), default_prompts(cfg.kinds, cfg.backgrounds, cfg.colors))


@dataclass
class CounterfactualConfig:
    canvas: int = 48
    size_range: tuple = (0.16, 0.24)
    colors: tuple = tuple(SHAPE_COLORS)
    textures: tuple = TEXTURES
    categories: dict = field(default_factory=lambda: dict(COUNTERFACTUAL_CATEGORIES))
    backgrounds: dict = field(default_factory=lambda: dict(COUNTERFACTUAL_BACKGROUNDS))
    match: dict = field(default_factory=lambda: dict(COUNTERFACTUAL_MATCH))


def counterfactual_labels(cfg: CounterfactualConfig) -> list[str]:
    kinds = [k for fam in cfg.categories.values() for k in fam]
    return ["background", *kinds]


def counterfactual_prompt_map(cfg: CounterfactualConfig) -> dict[str, list[str]]:
    kinds = [k for fam in cfg.categories.values() for k in fam]
    return default_prompts(kinds, tuple(cfg.backgrounds), cfg.colors)


def _counterfactual_sample(cfg, category, background, seed, index, kinds, tag) -> ImageSample:
    rng = np.random.default_rng([seed, index, 7, tag])
    kind = str(rng.choice(cfg.categories[category]))
    s = rng.uniform(*cfg.size_range)
    cx, cy = rng.uniform(s, 1 - s, size=2)
    shape = Shape(kind, str(rng.choice(cfg.colors)), str(rng.choice(cfg.textures)), float(cx), float(cy), float(s))
    rgb, tex = cfg.backgrounds[background]
    spec = SceneSpec(cfg.canvas, [shape], background, tex, seed=seed, background_rgb=rgb)
    image, mask, inst = render_scene(spec, kinds=tuple(kinds))
    cap = caption_for(spec, rng)
    return ImageSample(image, cap, mask, inst, f"{category}:{background}")


def make_counterfactual_split(cfg: CounterfactualConfig, rho, count, seed, balanced=False):
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"correlation rho must lie in [0, 1], got {rho}")
    cats = list(cfg.categories)
    if len(cats) != 2 or len(cfg.backgrounds) != 2:
        raise ValueError("counterfactual split needs exactly two categories and two backgrounds")
    bgs = list(cfg.backgrounds)
    kinds = counterfactual_labels(cfg)[1:]
    tag = 1 if balanced else 0
    rng = np.random.default_rng([seed, 0xCF, tag])
    samples = []
    for i in range(count):
        if balanced:
            # cycle through the four cells so counts differ by at most one
            cell = i % 4
            cat, bg = cats[cell // 2], bgs[cell % 2]
        else:
            cat = cats[int(rng.integers(2))]
            matched = cfg.match[cat]
            other = next(b for b in bgs if b != matched)
            bg = matched if rng.random() < rho else other
        samples.append(_counterfactual_sample(cfg, cat, bg, seed, i, kinds, tag))
    return samples


def generate_counterfactual(root, cfg: CounterfactualConfig | None = None, rho: float = 0.95,
                            count: int = 1, seed: int = 0, test_count: int | None = None) -> dict[str, str]:
    """Write ``train`` (correlated with probability rho) and balanced ``test`` splits."""
    cfg = cfg or CounterfactualConfig()
    labels = counterfactual_labels(cfg)
    prompts = counterfactual_prompt_map(cfg)
    categories = {"background": ["background"], **{c: list(f) for c, f in cfg.categories.items()}}
    train = make_counterfactual_split(cfg, rho, count, seed)
    test = make_counterfactual_split(cfg, rho, test_count or count, seed, balanced=True)
    return {
        "train": write_dataset(os.path.join(root, "train"), train, labels, prompts, categories),
        "test": write_dataset(os.path.join(root, "test"), test, labels, prompts, categories),
    }
