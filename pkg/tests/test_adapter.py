import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudadapt import tensor as T
from cloudadapt.adapter import (AdaptingModule, ContextProjection, adapter_param_shapes, cross_attention,
                                flatten_context, low_rank_map)
from cloudadapt.errors import DimensionError


def arr(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def tt(a, grad=False):
    return T.Tensor(a, requires_grad=grad)


def test_zero_context_gives_zero_keys_values():
    proj = ContextProjection(np.random.default_rng(0), 4, 8)
    k, v = proj(tt(np.zeros((1, 4, 4, 4), np.float32)))
    assert k.shape == v.shape == (1, 16, 8)
    assert np.all(k.data == 0) and np.all(v.data == 0)


def test_qkv_shapes():
    mod = AdaptingModule(8, 4, rank=2)
    q, k, v = mod.project_qkv(tt(arr(1, 16, 8)), tt(arr(1, 4, 4, 4)))
    assert q.shape == (1, 16, 8) and k.shape == v.shape == (1, 16, 8)


def test_projection_and_low_rank_counts():
    shapes = adapter_param_shapes(1024, 64, 16, 1)
    proj = sum(int(np.prod(shapes[k])) for k in ("units.0.query", "context.key", "context.value"))
    assert proj == 1024 ** 2 + 2 * 64 * 1024 == 1179648
    low = int(np.prod(shapes["units.0.w1"])) + int(np.prod(shapes["units.0.w2"]))
    assert low == 2 * 1024 * 16 == 32768


@pytest.mark.parametrize("d,ck,r,n,share,qr", [(8, 4, 2, 1, True, None), (16, 8, 4, 3, False, None),
                                               (12, 6, 3, 2, False, 5), (8, 8, 8, 4, True, 2)])
def test_closed_form_matches_instantiated(d, ck, r, n, share, qr):
    mod = AdaptingModule(d, ck, r, n, share, qr)
    expected = adapter_param_shapes(d, ck, r, n, share, qr)
    assert mod.param_shapes() == {k: tuple(v) for k, v in expected.items()}


def test_single_context_token_broadcasts_value():
    q = tt(arr(1, 5, 4))
    k = tt(arr(1, 1, 4, seed=1))
    v = tt(arr(1, 1, 4, seed=2))
    o, s = cross_attention(q, k, v, return_scores=True)
    assert np.all(s.data == 1.0)
    assert np.allclose(o.data, np.broadcast_to(v.data, (1, 5, 4)))


def test_equal_keys_give_uniform_scores():
    k = tt(np.tile(arr(1, 1, 4), (1, 6, 1)))
    _, s = cross_attention(tt(arr(1, 3, 4, seed=4)), k, tt(arr(1, 6, 4, seed=5)), return_scores=True)
    assert np.allclose(s.data, 1 / 6, atol=1e-7)


def test_two_token_hand_case():
    d, c = 4, 3.0
    q = np.zeros((1, 1, d), np.float32)
    q[0, 0, 0] = 1.0
    k = np.zeros((1, 2, d), np.float32)
    k[0, 0, 0] = c
    k[0, 1, 1] = c
    _, s = cross_attention(tt(q), tt(k), tt(arr(1, 2, d)), return_scores=True)
    a = np.exp(c / np.sqrt(d))
    assert np.allclose(s.data[0, 0], [a / (a + 1), 1 / (a + 1)], atol=1e-6)


def test_low_rank_map_zero_and_rank():
    z = tt(arr(2, 3, 6))
    assert np.all(low_rank_map(z, tt(np.zeros((6, 2), np.float32)), tt(arr(2, 6))).data == 0)
    assert np.all(low_rank_map(z, tt(arr(6, 2)), tt(np.zeros((2, 6), np.float32))).data == 0)
    w1, w2 = arr(6, 2, seed=1), arr(2, 6, seed=2)
    assert np.linalg.matrix_rank((w1 @ w2).astype(np.float64), tol=1e-5) <= 2
    with pytest.raises(DimensionError):
        low_rank_map(z, tt(arr(5, 2)), tt(arr(2, 6)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_identity_at_init(seed):
    mod = AdaptingModule(8, 4, rank=2, seed=seed % 1000)
    f = arr(2, 9, 8, seed=seed)
    out = mod.adapt(tt(f), tt(arr(2, 4, 3, 3, seed=seed + 1)))
    assert out.shape == f.shape
    assert np.array_equal(out.data, f)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_residual_guarantee_and_row_sums(seed):
    mod = AdaptingModule(8, 4, rank=3, seed=1)
    unit = mod.units[0]
    unit.w2.data = arr(3, 8, seed=seed)
    f, ctx = tt(arr(1, 5, 8, seed=seed + 1)), tt(arr(1, 4, 2, 2, seed=seed + 2))
    out = mod.adapt(f, ctx)
    k, v = mod.context(ctx)
    o, s = cross_attention(unit.project_query(f), k, v, return_scores=True)
    m = low_rank_map(o, unit.w1, unit.w2).data
    assert np.allclose(s.data.sum(-1), 1.0, atol=1e-5)
    assert np.linalg.norm(out.data - f.data) <= np.linalg.norm(m) * (1 + 1e-5) + 1e-6


def test_context_permutation_invariance():
    q = tt(arr(1, 4, 8))
    k, v = arr(1, 6, 8, seed=1), arr(1, 6, 8, seed=2)
    perm = np.random.default_rng(0).permutation(6)
    a = cross_attention(q, tt(k), tt(v)).data
    b = cross_attention(q, tt(k[:, perm]), tt(v[:, perm])).data
    assert np.allclose(a, b, atol=1e-6)


def test_adapt_gradient_toy():
    # d=8, r=2, T=4 tokens, M=4 context tokens
    mod = AdaptingModule(8, 3, rank=2, seed=0)
    mod.units[0].w2.data = arr(2, 8, seed=9) * 0.5
    f = tt(arr(1, 4, 8, seed=1), grad=True)
    ctx = tt(arr(1, 3, 2, 2, seed=2))
    mod64 = copy.deepcopy(mod).to_dtype(np.float64)
    with T.default_dtype(np.float64):
        f64 = T.Tensor(f.data.astype(np.float64), requires_grad=True)
        ctx64 = T.Tensor(ctx.data.astype(np.float64))
    leaves = [(n, p) for n, p in mod.named_parameters()] + [("tokens", f)]
    leaves64 = dict(list(mod64.named_parameters()) + [("tokens", f64)])
    for name, p in leaves:
        probe = T.centered_probe(lambda v: mod.adapt(f, ctx), p, 11)
        with T.default_dtype(np.float64):
            ref = T.centered_probe(lambda v: mod64.adapt(f64, ctx64), leaves64[name], 11)
            err = T.grad_check(probe, p, reference=(ref, leaves64[name]))
        assert err < 1e-3, name


def test_flatten_context_layout():
    f = np.arange(2 * 3 * 4, dtype=np.float32).reshape(1, 2, 3, 4)
    out = flatten_context(tt(f)).data
    assert out.shape == (1, 12, 2)
    assert np.array_equal(out[0, 5], f[0, :, 1, 1])


def test_unit_lookup():
    shared = AdaptingModule(8, 4, 2, n_points=3, share_weights=True)
    assert shared.unit(0) is shared.unit(2)
    separate = AdaptingModule(8, 4, 2, n_points=3, share_weights=False)
    assert separate.unit(0) is not separate.unit(2)
    with pytest.raises(IndexError):
        separate.unit(3)
