import numpy as np
import pytest
import torch
from scipy.stats import special_ortho_group

from percept.aggregation import ImagePool, normalize, pool_image
from percept.encoders import Vocabulary
from percept.inference import (LabelPromptSet, classify, classify_counterfactual, classify_embedding,
                               counterfactual_from_features, embed_label_set, embed_prompts, group_features,
                               label_features, mean_embedding, principal_components, segment_dense)
from percept.training import TrainConfig, build_model


def eye(n, d=None):
    return torch.eye(n, d or n, dtype=torch.float64)


@pytest.fixture(scope="module")
def tiny():
    vocab = Vocabulary.build(["a red circle on a gray background", "a blue square"])
    cfg = TrainConfig(image_size=16, patch_size=4, width=16, depth=1, heads=2, joint_dim=8, text_width=16,
                      text_depth=1, text_heads=2, max_len=8, image_pool="avg")
    return build_model(cfg, vocab).eval(), vocab


def test_mean_embedding_closed_form():
    out = mean_embedding(eye(2, 4))
    assert out.tolist() == pytest.approx([0.7071068, 0.7071068, 0, 0], abs=1e-7)
    same = torch.tensor([[0.6, 0.8], [0.6, 0.8]], dtype=torch.float64)
    assert torch.allclose(mean_embedding(same), same[0])
    with pytest.raises(ValueError):
        mean_embedding(torch.zeros(0, 3))


def test_embed_label_set_singleton_equals_prompt(tiny):
    model, vocab = tiny
    ps = LabelPromptSet({"circle": ["a red circle"], "square": ["a blue square"]})
    e = embed_label_set(model, vocab, ps)
    direct = embed_prompts(model, vocab, ["a red circle", "a blue square"])
    assert torch.allclose(e, direct, atol=1e-6)
    assert torch.allclose(e.norm(dim=1), torch.ones(2), atol=1e-6)


def test_embed_label_set_categories(tiny):
    model, vocab = tiny
    ps = LabelPromptSet({"circle": ["a red circle"], "square": ["a blue square"], "background": ["gray"]},
                        categories={"shapes": ["circle", "square"], "rest": ["background"]})
    cats = embed_label_set(model, vocab, ps, categories=True)
    both = mean_embedding(embed_prompts(model, vocab, ["a red circle", "a blue square"]))
    assert cats.shape[0] == 2 and torch.allclose(cats[0], both, atol=1e-6)


def test_prompt_set_validation():
    with pytest.raises(ValueError):
        LabelPromptSet({"a": []})
    with pytest.raises(ValueError):
        LabelPromptSet({"a": ["x"]}, categories={"c": ["b"]})


def test_classify_exact_match():
    labels = eye(4)
    label, scores = classify_embedding(labels[2] * 3.0, labels)
    assert label == 2 and scores[2].item() == pytest.approx(1.0)


def test_classify_matches_bruteforce_and_scaling():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=6)
        labels = rng.normal(size=(5, 6))
        cos = [x @ l / np.linalg.norm(x) / np.linalg.norm(l) for l in labels]
        got, _ = classify_embedding(torch.tensor(x), torch.tensor(labels))
        assert got == int(np.argmax(cos))
        assert classify_embedding(torch.tensor(x), torch.tensor(labels) * 7.5)[0] == got


def test_classify_tie_breaks_low():
    labels = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert classify_embedding(torch.tensor([1.0, 0.0]), labels)[0] == 0


def test_classify_dim_mismatch():
    with pytest.raises(ValueError):
        classify_embedding(torch.ones(3), torch.ones(2, 4))


def test_label_features_constant_field():
    labels = eye(3)
    feats = labels[1].expand(4, 5, 3)
    assert (label_features(feats, labels).labels == 1).all()


def test_label_features_restrict_singleton():
    rng = np.random.default_rng(1)
    feats = torch.tensor(rng.normal(size=(3, 3, 4)))
    lm = label_features(feats, torch.tensor(rng.normal(size=(5, 4))), restrict_to=[3])
    assert (lm.labels == 3).all()


def test_label_features_checkerboard():
    labels = eye(2)
    feats = torch.stack([torch.stack([labels[0], labels[1]]), torch.stack([labels[1], labels[0]])])
    assert label_features(feats, labels).labels.tolist() == [[0, 1], [1, 0]]


def test_label_features_restrict_all_is_unrestricted():
    rng = np.random.default_rng(2)
    feats = torch.tensor(rng.normal(size=(4, 4, 6)))
    labels = torch.tensor(rng.normal(size=(5, 6)))
    a = label_features(feats, labels)
    b = label_features(feats, labels, restrict_to=range(5))
    assert np.array_equal(a.labels, b.labels)


def test_label_features_errors():
    with pytest.raises(ValueError):
        label_features(torch.ones(2, 2, 3), eye(3), restrict_to=[])
    with pytest.raises(ValueError):
        label_features(torch.ones(2, 2, 3), eye(3), restrict_to=[5])


def test_segment_dense_upsamples(tiny):
    model, vocab = tiny
    labels = embed_prompts(model, vocab, ["a red circle", "a blue square", "gray"])
    maps = segment_dense(model, torch.rand(2, 16, 16, 3), labels)
    assert len(maps) == 2 and maps[0].shape == (16, 16) and maps[0].max() < 3
    single = segment_dense(model, torch.rand(1, 16, 16, 3), labels, restrict_to=[2])
    assert (single[0] == 2).all()


def test_classify_batch(tiny):
    model, vocab = tiny
    labels = embed_prompts(model, vocab, ["a red circle", "a blue square"])
    pred, scores = classify(model, torch.rand(3, 16, 16, 3), labels)
    assert pred.shape == (3,) and scores.shape == (3, 2)
    assert np.array_equal(pred, scores.argmax(1))


def test_avg_transitivity_on_model(tiny):
    model, _ = tiny
    with torch.no_grad():
        g = model.image(torch.rand(1, 16, 16, 3))
    t = torch.randn(8)
    pooled = pool_image(g.tokens, ImagePool("avg"))[0]
    assert abs(float(pooled @ t) - float((g.tokens[0] @ t).mean())) < 1e-6


def test_pca_all_identical():
    assert (group_features(np.ones((4, 4, 5)), 3) == 0).all()


def test_pca_two_orthogonal_populations():
    feats = np.zeros((4, 4, 6))
    truth = np.zeros((4, 4), int)
    truth[:, 2:] = 1
    truth[3, 0] = 1
    feats[truth == 0] = [1, 0, 0, 0, 0, 0]
    feats[truth == 1] = [0, 1, 0, 0, 0, 0]
    assert np.array_equal(group_features(feats, 2), truth)


def test_pca_rotation_invariance():
    rng = np.random.default_rng(3)
    centers = rng.normal(size=(4, 10)) * 3
    assign = rng.integers(0, 4, (6, 6))
    feats = centers[assign] + 0.1 * rng.normal(size=(6, 6, 10))
    base = group_features(feats, 4)
    rot = special_ortho_group.rvs(10, random_state=4)
    assert np.array_equal(group_features(feats @ rot.T, 4), base)


def test_pca_ids_contiguous_and_bounded():
    rng = np.random.default_rng(5)
    for n in [1, 3, 8]:
        out = group_features(rng.normal(size=(5, 5, 12)), n)
        ids = np.unique(out)
        assert np.array_equal(ids, np.arange(len(ids))) and len(ids) <= n
        # first occurrence order in raster scan
        firsts = [int(np.flatnonzero(out.ravel() == i)[0]) for i in ids]
        assert firsts == sorted(firsts)


def test_pca_eigenvectors_orthonormal():
    rng = np.random.default_rng(6)
    vals, vecs, _ = principal_components(rng.normal(size=(64, 16)), 8)
    assert np.allclose(vecs.T @ vecs, np.eye(8), atol=1e-6)
    assert np.all(np.diff(vals) <= 0)


def test_pca_errors():
    with pytest.raises(ValueError):
        group_features(np.zeros((2, 2, 3)), 5)
    with pytest.raises(ValueError):
        group_features(np.zeros((2, 2, 3)), 0)


def _cf_field(assign, sims):
    """Build a feature field whose cosine to three orthonormal categories is controlled."""
    feats = []
    for a, s in zip(assign, sims):
        v = np.zeros(4)
        v[a] = s
        v[3] = np.sqrt(max(1 - s * s, 0.0))
        feats.append(v)
    return torch.tensor(np.array(feats)).reshape(1, len(assign), 4)


def test_counterfactual_unanimous():
    cats = eye(3, 4)
    res = counterfactual_from_features(cats[0].expand(2, 2, 4), cats)
    assert res.category == 0 and not res.fallback


def test_counterfactual_mean_comparison():
    cats = eye(3, 4)
    feats = _cf_field([0] * 3 + [1] * 5, [0.6] * 3 + [0.8] * 5)
    res = counterfactual_from_features(feats, cats)
    assert res.category == 1
    assert res.scores[0] == pytest.approx(0.6) and res.scores[1] == pytest.approx(0.8)


def test_counterfactual_max_flag():
    cats = eye(3, 4)
    feats = _cf_field([0, 0, 1], [0.9, 0.1, 0.5])
    assert counterfactual_from_features(feats, cats, aggregate="mean").category == 1
    assert counterfactual_from_features(feats, cats, aggregate="max").category == 0


def test_counterfactual_fallback():
    cats = eye(3, 4)
    res = counterfactual_from_features(cats[2].expand(2, 2, 4), cats, pooled=torch.tensor([0.2, 0.9, 0.0, 0.0]))
    assert res.fallback and res.category == 1
    with pytest.raises(ValueError):
        counterfactual_from_features(cats[2].expand(2, 2, 4), cats)
    with pytest.raises(ValueError):
        counterfactual_from_features(cats[2].expand(2, 2, 4), cats[:2])


def test_counterfactual_precomputed_fallback_scores():
    cats = eye(3, 4)
    res = counterfactual_from_features(cats[2].expand(2, 2, 4), cats, fallback_scores=torch.tensor([0.7, 0.1]))
    assert res.fallback and res.category == 0 and res.scores == pytest.approx((0.7, 0.1))
    # scores are ignored when some location is foreground
    feats = _cf_field([1, 2], [0.9, 0.9])
    res = counterfactual_from_features(feats, cats, fallback_scores=[5.0, -5.0])
    assert not res.fallback and res.category == 1


def test_classify_counterfactual_runs(tiny):
    model, vocab = tiny
    cats = embed_prompts(model, vocab, ["a red circle", "a blue square", "gray background"])
    out = classify_counterfactual(model, torch.rand(3, 16, 16, 3), cats)
    assert len(out) == 3 and all(r.category in (0, 1) for r in out)
