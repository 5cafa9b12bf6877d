import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tractosurv.errors import DataError, SchemaError
from tractosurv.segnum import (decode_labels, ensemble_average, group_norm_forward,
                               hard_negative_select, one_hot)


def _gn_oracle(x, groups, eps=1e-5):
    out = np.empty_like(x)
    n, c = x.shape[:2]
    per = c // groups
    for i in range(n):
        for g in range(groups):
            block = x[i, g * per:(g + 1) * per]
            vals = block.ravel()
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            out[i, g * per:(g + 1) * per] = (block - mu) / np.sqrt(var + eps)
    return out


def test_group_norm_stats_and_oracle(rng):
    x = rng.normal(3, 2, size=(2, 8, 4, 4, 4))
    y = group_norm_forward(x, groups=4)
    g = y.reshape(2, 4, -1)
    assert np.all(np.abs(g.mean(-1)) < 1e-5)
    assert np.all(np.abs(g.var(-1) - 1) < 1e-4)
    assert np.max(np.abs(y - _gn_oracle(x, 4))) <= 1e-5


def test_group_norm_instance_reduction(rng):
    x = rng.normal(size=(2, 8, 3, 3, 3))
    y = group_norm_forward(x, groups=8)
    mu = x.mean(axis=(2, 3, 4), keepdims=True)
    var = x.var(axis=(2, 3, 4), keepdims=True)
    assert np.max(np.abs(y - (x - mu) / np.sqrt(var + 1e-5))) <= 1e-6


def test_group_norm_constant_gives_beta():
    beta = np.arange(4.0)
    y = group_norm_forward(np.full((1, 4, 2, 2, 2), 7.0), groups=2, gamma=np.full(4, 3.0), beta=beta)
    assert np.allclose(y, beta.reshape(1, 4, 1, 1, 1))


def test_group_norm_affine(rng):
    x = rng.normal(size=(1, 4, 5))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    y = group_norm_forward(x, 2, gamma, beta)
    assert np.allclose(y, group_norm_forward(x, 2) * gamma[None, :, None] + beta[None, :, None])


def test_group_norm_shape_error():
    with pytest.raises(SchemaError):
        group_norm_forward(np.zeros((1, 6, 2)), groups=4)


def test_hard_mining_example():
    loss = np.array([0, 0, .9, .1, .8, .2, .7, .3, .6, .4, .5, .05])
    pos = np.zeros(12, bool)
    pos[[0, 1]] = True
    keep = hard_negative_select(loss, pos)
    assert np.nonzero(keep & ~pos)[0].tolist() == [2, 4, 6, 8, 9, 10]
    assert keep[pos].all()


def test_hard_mining_no_positives():
    keep = hard_negative_select(np.random.default_rng(0).random(1000), np.zeros(1000, bool))
    assert keep.sum() == 128
    assert hard_negative_select(np.ones(50), np.zeros(50, bool)).all()


def test_hard_mining_ties_lowest_index():
    pos = np.zeros(20, bool)
    pos[19] = True
    keep = hard_negative_select(np.ones(20), pos)
    assert np.nonzero(keep)[0].tolist() == [0, 1, 2, 19]


def test_hard_mining_rejects_bad_losses():
    with pytest.raises(DataError):
        hard_negative_select(np.array([-1.0, 1]), np.zeros(2, bool))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 400), p=st.floats(0, 0.5))
def test_hard_mining_properties(seed, n, p):
    rng = np.random.default_rng(seed)
    loss = np.round(rng.random(n), 2)
    pos = rng.random(n) < p
    keep = hard_negative_select(loss, pos)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    sel = keep & ~pos
    want = min(int(np.floor(3 * n_pos)), n_neg) if n_pos else min(128, n_neg)
    assert sel.sum() == want and keep[pos].all()
    if sel.any() and (~keep).any():
        assert loss[sel].min() >= loss[~keep].max()


def test_ensemble_examples(rng):
    a = one_hot(np.array([0, 1, 2]))
    assert np.array_equal(ensemble_average([a], axis=0), a)
    b = one_hot(np.array([0, 1, 4]))
    m = ensemble_average([a, b], axis=0)
    assert m[:, 2].tolist() == [0, 0, 0.5, 0.5]
    with pytest.raises(SchemaError):
        ensemble_average([a, one_hot(np.array([0, 1]))], axis=0)
    with pytest.raises(DataError):
        ensemble_average([])


def test_ensemble_mean_oracle(rng):
    maps = [rng.dirichlet(np.ones(4), size=(2, 3, 3, 3)).transpose(0, 4, 1, 2, 3) for _ in range(5)]
    m = ensemble_average(maps)
    oracle = sum(maps) / 5
    assert np.max(np.abs(m - oracle)) <= 1e-12
    assert np.allclose(m.sum(axis=1), 1)


def test_decode_examples(rng):
    lab = rng.choice([0, 1, 2, 4], size=(5, 5, 5))
    assert np.array_equal(decode_labels(one_hot(lab)), lab)
    assert not decode_labels(np.full((4, 3, 3, 3), 0.25)).any()
    with pytest.raises(SchemaError):
        decode_labels(np.zeros((3, 2, 2)))


def test_decode_oracle(rng):
    p = rng.dirichlet(np.ones(4), size=(4, 4, 4)).transpose(3, 0, 1, 2)
    out = decode_labels(p)
    for idx in np.ndindex(4, 4, 4):
        col = [p[(c,) + idx] for c in range(4)]
        assert out[idx] == (0, 1, 2, 4)[col.index(max(col))]
