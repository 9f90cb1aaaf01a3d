import dataclasses
import filecmp
import os

import numpy as np
import pytest
from PIL import Image

from percept.netpbm import NetpbmError, read_netpbm, write_pgm, write_ppm
from percept.synthdata import (COUNTERFACTUAL_MATCH, SHAPE_KINDS, CounterfactualConfig, Dataset, DatasetError,
                               SceneSpec, Shape, ShapesConfig, caption_for, generate_counterfactual,
                               generate_shapes, make_counterfactual_split, make_shapes_samples, read_label_file,
                               render_scene, sample_scene, shape_mask, write_dataset)


def test_single_red_circle_area():
    spec = SceneSpec(64, [Shape("circle", "red", "solid", 0.5, 0.5, 0.25)], "gray")
    image, mask, inst = render_scene(spec)
    r = 0.25 * 64
    area = np.pi * r * r
    assert abs(int((mask == 1).sum()) - area) <= 2 * np.pi * r
    assert caption_for(spec, np.random.default_rng(0)) == "a red circle on a gray background"
    assert np.allclose(image[32, 32], [0.86, 0.16, 0.16], atol=0.2)


def test_empty_scene():
    spec = SceneSpec(16, [], "navy")
    image, mask, inst = render_scene(spec)
    assert inst == [] and not mask.any()
    assert caption_for(spec, np.random.default_rng(0)) == "a navy background"


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_every_kind_inside_bounding_disc(kind):
    sh = Shape(kind, "white", "solid", 0.5, 0.5, 0.3)
    m = shape_mask(sh, 96, 96)
    assert m.any()
    ys, xs = np.nonzero(m)
    d = np.hypot((xs + 0.5) / 96 - 0.5, (ys + 0.5) / 96 - 0.5)
    assert d.max() <= 0.3 + 1e-9


def test_unknown_kind():
    with pytest.raises(ValueError):
        shape_mask(Shape("blob", "red", "solid", 0.5, 0.5, 0.2), 8, 8)


def test_generation_deterministic():
    cfg = ShapesConfig()
    a = make_shapes_samples(cfg, 5, seed=3)
    b = make_shapes_samples(cfg, 5, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.caption == y.caption
    c = make_shapes_samples(cfg, 5, seed=4)
    assert any(x.caption != y.caption for x, y in zip(a, c))


def test_captions_match_masks():
    cfg = ShapesConfig()
    for s in make_shapes_samples(cfg, 40, seed=0):
        spec_kinds = [w for w in s.caption.split() if w in SHAPE_KINDS]
        present = sorted({SHAPE_KINDS[c - 1] for c in np.unique(s.class_mask) if c > 0})
        assert sorted(set(spec_kinds)) == present
        assert len(s.instance_masks) == len(spec_kinds) and all(m.any() for m in s.instance_masks)
        # instances are disjoint and agree with the class mask
        stack = np.stack(s.instance_masks)
        assert stack.sum(0).max() <= 1
        assert np.array_equal(stack.any(0), s.class_mask > 0)
        assert 1 <= len(spec_kinds) <= 3


def test_caption_order_is_shuffled():
    shapes = [Shape("circle", "red", "solid", 0.3, 0.3, 0.1), Shape("bar", "blue", "solid", 0.7, 0.7, 0.1)]
    spec = SceneSpec(32, shapes, "gray")
    firsts = {caption_for(spec, np.random.default_rng(i)).split()[2] for i in range(20)}
    assert firsts == {"circle", "bar"}


def test_infeasible_placement_retries(caplog):
    cfg = ShapesConfig(min_shapes=3, max_shapes=3, size_range=(0.2, 0.22), max_tries=1)
    with caplog.at_level("INFO"):
        specs = [sample_scene(cfg, 0, i) for i in range(5)]
    assert all(len(s.shapes) == 3 for s in specs)
    assert any("regenerating" in r.message for r in caplog.records)


def test_impossible_placement_gives_up():
    cfg = ShapesConfig(min_shapes=3, max_shapes=3, size_range=(0.3, 0.32), max_tries=2)
    with pytest.raises(ValueError, match="feasible"):
        sample_scene(cfg, 0, 0, max_attempts=20)


def test_counterfactual_correlation():
    cfg = CounterfactualConfig()
    train = make_counterfactual_split(cfg, 0.95, 2000, seed=0)
    matched = [s.group.split(":")[1] == COUNTERFACTUAL_MATCH[s.group.split(":")[0]] for s in train]
    assert abs(np.mean(matched) - 0.95) < 0.02


def test_counterfactual_rho_half_and_balanced():
    cfg = CounterfactualConfig()
    train = make_counterfactual_split(cfg, 0.5, 2000, seed=1)
    matched = [s.group.split(":")[1] == COUNTERFACTUAL_MATCH[s.group.split(":")[0]] for s in train]
    assert abs(np.mean(matched) - 0.5) < 0.04
    test = make_counterfactual_split(cfg, 0.95, 101, seed=1, balanced=True)
    counts = {}
    for s in test:
        counts[s.group] = counts.get(s.group, 0) + 1
    assert len(counts) == 4 and max(counts.values()) - min(counts.values()) <= 1


def test_counterfactual_rejects_bad_rho():
    with pytest.raises(ValueError):
        make_counterfactual_split(CounterfactualConfig(), 1.5, 10, 0)


def test_dataset_roundtrip_bit_exact(tmp_path):
    generate_shapes(tmp_path / "a", ShapesConfig(canvas=24), count=6, seed=2)
    ds = Dataset(tmp_path / "a")
    ds.validate()
    assert len(ds) == 6 and ds.labels[0] == "background"
    samples = list(ds)
    write_dataset(tmp_path / "b", samples, ds.labels, ds.prompts())
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    for sub in ["images", "masks", "instances"]:
        d = cmp.subdirs[sub]
        assert not d.diff_files and not d.left_only and not d.right_only
    again = list(Dataset(tmp_path / "b"))
    for x, y in zip(samples, again):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.class_mask, y.class_mask)
        assert x.caption == y.caption and all(np.array_equal(p, q) for p, q in zip(x.instance_masks, y.instance_masks))


def test_files_parse_with_independent_reader(tmp_path):
    generate_shapes(tmp_path, ShapesConfig(canvas=20), count=3, seed=0)
    ds = Dataset(tmp_path)
    for r in ds.records:
        ours = read_netpbm(os.path.join(tmp_path, r.image_path))
        theirs = np.asarray(Image.open(os.path.join(tmp_path, r.image_path)))
        assert np.array_equal(ours, theirs)
        m = np.asarray(Image.open(os.path.join(tmp_path, r.mask_path)))
        assert np.array_equal(read_netpbm(os.path.join(tmp_path, r.mask_path)), m)


def test_dataset_validation_errors(tmp_path):
    generate_shapes(tmp_path, ShapesConfig(canvas=16), count=2, seed=0)
    ds = Dataset(tmp_path)
    write_pgm(tmp_path / ds.records[0].mask_path, np.zeros((8, 8), np.uint8))
    with pytest.raises(DatasetError, match="dimension mismatch"):
        ds.validate()
    write_pgm(tmp_path / ds.records[0].mask_path, np.full((16, 16), 40, np.uint8))
    with pytest.raises(DatasetError, match="unknown label id"):
        ds.validate()
    os.remove(tmp_path / ds.records[1].image_path)
    with pytest.raises(DatasetError, match="missing file"):
        ds[1]


def test_counterfactual_dataset_files(tmp_path):
    paths = generate_counterfactual(tmp_path, rho=0.9, count=8, seed=0, test_count=4)
    train = Dataset(os.path.dirname(paths["train"]))
    assert set(train.categories()) == {"background", "round", "angular"}
    assert all(s.group for s in train)
    assert "background" in train.prompts()


def test_label_file_errors(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("a: x, y\n# note\nb: z\n")
    assert read_label_file(p) == {"a": ["x", "y"], "b": ["z"]}
    p.write_text("a: x\na: y\n")
    with pytest.raises(ValueError, match="duplicate"):
        read_label_file(p)
    p.write_text("a:\n")
    with pytest.raises(ValueError):
        read_label_file(p)


def test_netpbm_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_netpbm(tmp_path / "x.ppm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x01\x02")
    assert read_netpbm(tmp_path / "c.pgm").tolist() == [[1, 2]]
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(NetpbmError, match="truncated"):
        read_netpbm(tmp_path / "t.pgm")
    (tmp_path / "m.pgm").write_bytes(b"P2\n1 1\n255\n1")
    with pytest.raises(NetpbmError):
        read_netpbm(tmp_path / "m.pgm")
    with pytest.raises(NetpbmError):
        write_ppm(tmp_path / "bad.ppm", np.zeros((2, 2)))


def test_config_palette_restriction():
    cfg = dataclasses.replace(ShapesConfig(), colors=("red",), backgrounds=("gray",))
    for s in make_shapes_samples(cfg, 10, 0):
        assert "gray background" in s.caption
        assert all(w in ("a", "and", "on", "red", "gray", "background", *SHAPE_KINDS) for w in s.caption.split())
