import csv
import io

import pytest

from percept.experiments import (ShapesSetup, ablation_csv, counterfactual_prompts, prepare_shapes, summarize,
                                 train_cached, trend_config)
from percept.synthdata import CounterfactualConfig, ShapesConfig

ROWS = [
    dict(pool="max", init="random", seed=0, accuracy=0.5, miou=0.2, js=0.1),
    dict(pool="max", init="random", seed=1, accuracy=0.7, miou=0.4, js=0.3),
    dict(pool="cls", init="random", seed=0, accuracy=0.9, miou=0.1, js=0.2),
]


def test_summarize_means_in_first_seen_order():
    out = summarize(ROWS)
    assert [(r["pool"], r["seeds"]) for r in out] == [("max", 2), ("cls", 1)]
    assert out[0]["accuracy"] == pytest.approx(0.6) and out[0]["miou"] == pytest.approx(0.3)


def test_ablation_csv_percent_columns():
    rows = list(csv.DictReader(io.StringIO(ablation_csv(summarize(ROWS)))))
    assert rows[0] == dict(pool="max", init="random", accuracy="60.00", miou="30.00", js="20.00", seeds="2")


def test_counterfactual_prompts_background_last():
    ps = counterfactual_prompts(CounterfactualConfig())
    assert list(ps.categories)[-1] == "background" and len(ps.categories) == 3
    assert "background" in ps.labels


def test_prepare_and_cached_training(tmp_path):
    setup = ShapesSetup(ShapesConfig(canvas=16, colors=("white",)), n_train=8, n_test=4, n_single=4)
    prep = prepare_shapes(setup)
    assert len(prep.train) == 8 and len(prep.test) == 4 and len(prep.single) == 4
    assert all(len(s.instance_masks) == 1 for s in prep.single)
    cfg = trend_config(epochs=1, batch_size=4, image_size=16, patch_size=4, width=16, depth=1, heads=2, joint_dim=8,
                       text_width=16, text_depth=1, text_heads=2)
    a = train_cached(cfg, prep, tmp_path / "run")
    b = train_cached(cfg, prep, tmp_path / "run")  # restored from disk, not retrained
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert (v == w).all(), k
