import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from percept.aggregation import DegenerateInputError, ImagePool, normalize, pool_image, pool_text

MAX, AVG, CLS = ImagePool("max"), ImagePool("avg"), ImagePool("cls")


def grid(values):
    """Row-major nested list -> 1 x L x D tensor."""
    t = torch.tensor(values, dtype=torch.float64)
    return t.reshape(1, -1, t.shape[-1])


def test_max_pool():
    g = grid([[(1, 2), (3, 0)], [(0, 5), (2, 1)]])
    assert pool_image(g, MAX)[0].tolist() == [3, 5]


def test_avg_pool():
    g = grid([[(1, 2)], [(3, 4)]])
    assert pool_image(g, AVG)[0].tolist() == [2, 3]


def test_cls_pool_returns_cls():
    cls = torch.tensor([[0.5, -1.0]])
    assert torch.equal(pool_image(grid([[(1, 2)]]), CLS, cls=cls), cls)


def test_cls_pool_requires_token():
    with pytest.raises(ValueError):
        pool_image(grid([[(1, 2)]]), CLS)


def test_tsp_requires_text():
    with pytest.raises(ValueError):
        pool_image(grid([[(1, 2)]]), ImagePool("tsp"))


def test_empty_grid():
    with pytest.raises(DegenerateInputError):
        pool_image(torch.zeros(1, 0, 4), MAX)


@pytest.mark.parametrize("kind", ["tsp", "wmp"])
def test_pool_temperature_must_be_positive(kind):
    with pytest.raises(ValueError):
        ImagePool(kind, 0.0)


def test_pool_mode_names_roundtrip():
    for text in ["max", "avg", "cls", "tsp:0.1", "wmp:10"]:
        assert str(ImagePool.parse(text)) == text
    assert ImagePool.parse("TSP") == ImagePool("tsp", 1.0)
    with pytest.raises(ValueError):
        ImagePool.parse("mean")


def _softmax_oracle(values, temp):
    z = [v / temp for v in values]
    m = max(z)
    e = [np.exp(v - m) for v in z]
    s = sum(e)
    return [x / s for x in e]


def test_wmp_small_temperature_is_max():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(9, 5))
    out = pool_image(torch.tensor(g)[None], ImagePool("wmp", 1e-4))[0].numpy()
    # brute-force evaluation of sum_l softmax_l(g/temp) * g per channel
    oracle = [sum(w * v for w, v in zip(_softmax_oracle(list(g[:, d]), 1e-4), g[:, d])) for d in range(5)]
    assert np.allclose(out, oracle, atol=1e-12)
    assert np.allclose(out, g.max(axis=0), atol=1e-4)


def test_tsp_matches_oracle():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(6, 4))
    t = rng.normal(size=4)
    out = pool_image(torch.tensor(g)[None], ImagePool("tsp", 0.5), torch.tensor(t)[None])[0].numpy()
    cos = [float(row @ t / np.linalg.norm(row) / np.linalg.norm(t)) for row in g]
    w = _softmax_oracle(cos, 0.5)
    assert np.allclose(out, sum(wi * row for wi, row in zip(w, g)), atol=1e-12)


def test_tsp_large_temperature_is_avg():
    rng = np.random.default_rng(2)
    g = torch.tensor(rng.normal(size=(1, 12, 6)))
    t = torch.tensor(rng.normal(size=(1, 6)))
    out = pool_image(g, ImagePool("tsp", 1e6), t)
    assert torch.allclose(out, g.mean(1), atol=1e-4)


def test_wmp_zero_temperature_limit():
    rng = np.random.default_rng(3)
    g = torch.tensor(rng.normal(size=(1, 12, 6)))
    assert torch.allclose(pool_image(g, ImagePool("wmp", 1e-6), None), g.max(1).values, atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 10), st.integers(1, 6)), elements=st.floats(-100, 100)))
def test_max_dominates_avg(g):
    t = torch.tensor(g)[None]
    mx, av = pool_image(t, MAX)[0].numpy(), pool_image(t, AVG)[0].numpy()
    assert np.all(mx >= av - 1e-9)
    # strict where a channel's spread clearly exceeds rounding
    spread = g.max(axis=0) - g.min(axis=0)
    clear = spread > 1e-6
    assert np.all(mx[clear] > av[clear])


def test_single_location_identity():
    v = torch.tensor([[[0.3, -2.0, 5.0]]])
    assert torch.equal(pool_image(v, MAX), v[:, 0])
    assert torch.equal(pool_image(v, AVG), v[:, 0])


def test_avg_transitivity_random():
    rng = np.random.default_rng(4)
    for _ in range(100):
        l, d = rng.integers(1, 50), rng.integers(2, 32)
        g = torch.tensor(rng.normal(size=(l, d)))
        t = torch.tensor(rng.normal(size=d))
        pooled = pool_image(g[None], AVG)[0]
        assert abs(float(pooled @ t) - float((g @ t).mean())) <= 1e-9


def test_max_gradient_is_local():
    rng = np.random.default_rng(5)
    g = rng.normal(size=(7, 4))
    g += np.arange(7)[:, None] * 1e-3  # unique per-channel maxima
    t = torch.tensor(g, requires_grad=True)
    w = torch.tensor(rng.normal(size=4))

    def f(x):
        return torch.tanh(pool_image(x[None], MAX)[0] @ w)

    f(t).backward()
    argmax = g.argmax(axis=0)
    eps = 1e-6
    for l in range(7):
        for d in range(4):
            p = t.detach().clone()
            p[l, d] += eps
            m = t.detach().clone()
            m[l, d] -= eps
            fd = (f(p) - f(m)).item() / (2 * eps)
            assert fd == pytest.approx(t.grad[l, d].item(), abs=1e-8)
            if l != argmax[d]:
                assert t.grad[l, d] == 0 and abs(fd) < 1e-12


def test_max_tie_breaks_to_lowest_index():
    g = torch.tensor([[[1.0], [3.0], [3.0]]], requires_grad=True)
    pool_image(g, MAX).sum().backward()
    assert g.grad[0, :, 0].tolist() == [0.0, 1.0, 0.0]


def test_pool_text_avg_and_max():
    toks = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [99.0, 99.0]]])
    mask = torch.tensor([[True, True, False]])
    assert pool_text(toks, mask, "avg")[0].tolist() == [0.5, 0.5]
    assert pool_text(toks, mask, "max")[0].tolist() == [1.0, 1.0]


def test_pool_text_all_pad():
    with pytest.raises(DegenerateInputError):
        pool_text(torch.ones(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))


def test_normalize_known_norm():
    assert normalize(torch.tensor([3.0, 4.0])).tolist() == pytest.approx([0.6, 0.8])


def test_normalize_unit_vector_fixed_point():
    v = torch.tensor([0.0, 1.0, 0.0])
    assert torch.equal(normalize(v), v)


def test_normalize_idempotent():
    rng = np.random.default_rng(6)
    v = torch.tensor(rng.normal(size=(100, 8)))
    once = normalize(v)
    assert torch.allclose(normalize(once), once, atol=1e-15)
    assert torch.allclose(once.norm(dim=-1), torch.ones(100, dtype=torch.float64), atol=1e-6)


def test_normalize_zero():
    with pytest.raises(DegenerateInputError):
        normalize(torch.zeros(3))
