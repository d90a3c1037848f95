import numpy as np
import pytest

from asq import tensor as T
from asq.adapter import Adapter, adapter_forward, adapter_init, featurize
from asq.quantizers import IntRange
from oracles import central_fd

U4 = IntRange.unsigned(4)


def test_featurize_examples():
    assert featurize(np.zeros((2, 5)), 1.0, U4).tolist() == [[0, 0, 0, 0]] * 2
    c = 0.75
    assert featurize(np.full((1, 3, 2), c), 1.0, U4).tolist() == [[c, 0.0, c, 0.0]]


def test_featurize_clip_fraction_and_permutation():
    x = np.array([[0.5, 20.0, -30.0, 1.0]])
    assert featurize(x, 1.0, U4)[0, 3] == 0.5
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 40))
    perm = y[:, rng.permutation(40)]
    # equal up to summation order
    assert np.allclose(featurize(y, 0.1, U4), featurize(perm, 0.1, U4), rtol=1e-14, atol=0)


def test_featurize_scaling_exact():
    x = np.random.default_rng(1).normal(size=(4, 30))
    f1 = featurize(x, 1e9, U4)
    f4 = featurize(4.0 * x, 1e9, U4)
    assert np.array_equal(f4[:, :3], 4.0 * f1[:, :3])


def test_init_gives_beta_one_and_shapes():
    ad = adapter_init(2, 16, seed=3)
    assert ad.w1.shape == (4, 16) and ad.w2.shape == (16, 1)
    assert np.all(np.abs(ad.w1.data) <= 0.5)
    f = np.random.default_rng(2).normal(size=(7, 4)) * 100
    assert np.array_equal(adapter_forward(f, ad), np.ones(7))
    assert np.array_equal(adapter_forward(f, Adapter(1)), np.ones(7))
    assert np.array_equal(adapter_forward(f, Adapter(2, 8, "affine_plus_one")), np.ones(7))


def test_same_seed_same_init():
    a, b = Adapter(seed=5), Adapter(seed=5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert a.num_params() == 4 * 16 + 16 + 16 + 1


def test_bad_construction():
    with pytest.raises(ValueError):
        Adapter(depth=3)
    with pytest.raises(ValueError):
        Adapter(hidden=0)
    with pytest.raises(ValueError):
        Adapter(output_map="softplus")


def _perturbed(depth, output_map, seed=0):
    ad = Adapter(depth, 6, output_map, seed)
    rng = np.random.default_rng(seed + 10)
    for p in ad.parameters():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    return ad


def test_batch_permutation_equivariance():
    ad = _perturbed(2, "exp")
    f = np.random.default_rng(4).normal(size=(6, 4))
    perm = np.array([3, 0, 5, 1, 4, 2])
    assert np.array_equal(adapter_forward(f[perm], ad), adapter_forward(f, ad)[perm])


@pytest.mark.parametrize("depth,output_map", [(2, "exp"), (1, "exp"), (2, "affine_plus_one")])
def test_beta_gradient_fd(depth, output_map):
    ad = _perturbed(depth, output_map)
    f = np.random.default_rng(5).normal(size=(5, 4))
    wts = np.random.default_rng(6).normal(size=5)

    def loss():
        return T.total(T.mul(ad(f), T.Tensor(wts)))

    ad.zero_grad()
    loss().backward()
    for p in ad.parameters():
        num = central_fd(lambda: float(loss().data), p.data)
        assert np.max(np.abs(p.grad - num)) < 1e-4


def test_beta_positive_under_large_params():
    ad = _perturbed(2, "exp")
    for p in ad.parameters():
        p.data = p.data * 5
    f = np.random.default_rng(7).normal(size=(50, 4)) * 3
    assert np.all(adapter_forward(f, ad) > 0)
    aff = _perturbed(2, "affine_plus_one")
    for p in aff.parameters():
        p.data = p.data - 10
    assert np.all(adapter_forward(f, aff) >= 1e-3)
