import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddgnet import base_model as bm
from ddgnet.numerics import ContractError, ShapeError, Tape, finite_diff_check


def consts(tape, params):
    return {k: tape.const(v) for k, v in params.items()}


def make_params(D=5, C=3, seed=0, **kw):
    shape = bm.ModelShape(D, C, **kw)
    return shape, bm.init_params(shape, np.random.default_rng(seed))


def test_init_is_seeded_and_shaped():
    shape, p1 = make_params(seed=4)
    _, p2 = make_params(seed=4)
    assert p1.keys() == bm.expected_shapes(shape).keys()
    for k, v in p1.items():
        assert v.shape == bm.expected_shapes(shape)[k]
        assert np.array_equal(v, p2[k])
        if not k.split(".")[-1].startswith("b"):
            assert np.all(np.abs(v) <= 1 / math.sqrt(v.shape[1]))


def test_attention_of_zero_features_is_one_half():
    shape, params = make_params()
    t = Tape()
    a = bm.attention_forward(t.const(np.zeros((5, 9))), consts(t, params), "rgb")
    assert a.shape == (1, 9)
    np.testing.assert_array_equal(a.value, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_attention_strictly_inside_unit_interval(T, seed):
    shape, params = make_params(seed=seed)
    rng = np.random.default_rng(seed)
    params["att.flow.w2"] *= 50.0
    t = Tape()
    a = bm.attention_forward(t.const(rng.normal(0, 20, (5, T))), consts(t, params), "flow").value
    assert a.shape == (1, T)
    assert np.all((a > 0) & (a < 1))


def test_attention_dimension_mismatch():
    shape, params = make_params()
    t = Tape()
    with pytest.raises(ShapeError):
        bm.attention_forward(t.const(np.zeros((4, 6))), consts(t, params), "rgb")


def test_attention_equivariant_with_unit_span():
    shape, params = make_params(attention_kernel=1, fusion_kernel=1)
    rng = np.random.default_rng(1)
    f = rng.standard_normal((5, 8))
    perm = rng.permutation(8)
    t = Tape()
    pv = consts(t, params)
    a = bm.attention_forward(t.const(f), pv, "rgb", 1).value
    b = bm.attention_forward(t.const(f[:, perm]), pv, "rgb", 1).value
    np.testing.assert_allclose(b, a[:, perm], atol=1e-14)


def test_fuse_attention_mean():
    t = Tape()
    out = bm.fuse_attention(t.const([[0.6, 0.2]]), t.const([[0.8, 0.2]])).value
    np.testing.assert_allclose(out, [[0.7, 0.2]])
    with pytest.raises(ShapeError):
        bm.fuse_attention(t.const([[0.6]]), t.const([[0.8, 0.2]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=10), st.integers(0, 1000))
def test_fused_attention_between_inputs(xs, seed):
    ar = np.array([xs])
    af = np.random.default_rng(seed).uniform(0.001, 0.999, ar.shape)
    t = Tape()
    out = bm.fuse_attention(t.const(ar), t.const(af)).value
    assert np.all(out >= np.minimum(ar, af) - 1e-15) and np.all(out <= np.maximum(ar, af) + 1e-15)


def test_cas_shape_and_affine_degenerate_case():
    shape, params = make_params()
    zeroed = {k: np.zeros_like(v) for k, v in params.items()}
    zeroed["cls.b"] = np.array([[1.0], [-2.0], [0.5], [3.0]])
    t = Tape()
    z = t.const(np.zeros((5, 6)))
    p = bm.cas_forward(z, z, consts(t, zeroed)).value
    assert p.shape == (4, 6)
    np.testing.assert_array_equal(p, np.repeat(zeroed["cls.b"], 6, axis=1))


def test_cas_change_is_local_with_unit_span():
    shape, params = make_params(fusion_kernel=1)
    rng = np.random.default_rng(2)
    fr, ff = rng.standard_normal((2, 5, 7))
    t = Tape()
    pv = consts(t, params)
    base = bm.cas_forward(t.const(fr), t.const(ff), pv, 1).value
    fr2 = fr.copy()
    fr2[:, 3] += 1.0
    moved = bm.cas_forward(t.const(fr2), t.const(ff), pv, 1).value
    changed = np.flatnonzero(np.any(moved != base, axis=0))
    assert list(changed) == [3]


def test_cas_shape_mismatch():
    shape, params = make_params()
    t = Tape()
    with pytest.raises(ShapeError):
        bm.cas_forward(t.const(np.zeros((5, 6))), t.const(np.zeros((5, 7))), consts(t, params))


def test_suppress_cas_cases():
    t = Tape()
    p = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(bm.suppress_cas(t.const(p), t.const(np.ones((1, 4)))).value, p)
    np.testing.assert_array_equal(bm.suppress_cas(t.const(p), t.const(np.zeros((1, 4)))).value, 0)
    a = np.ones((1, 4))
    a[0, 2] = 0.5
    out = bm.suppress_cas(t.const(p), t.const(a)).value
    expect = p.copy()
    expect[:, 2] *= 0.5
    np.testing.assert_array_equal(out, expect)
    with pytest.raises(ShapeError):
        bm.suppress_cas(t.const(p), t.const(np.ones((1, 3))))


def test_suppress_cas_linear_in_cas():
    rng = np.random.default_rng(3)
    p, q = rng.standard_normal((2, 3, 5))
    a = rng.uniform(0, 1, (1, 5))
    t = Tape()
    lhs = bm.suppress_cas(t.const(2 * p + q), t.const(a)).value
    rhs = 2 * bm.suppress_cas(t.const(p), t.const(a)).value + bm.suppress_cas(t.const(q), t.const(a)).value
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


def test_video_scores_top1_selection():
    t = Tape()
    pbar = np.zeros((2, 4))
    pbar[0] = [9, 0, 0, 0]
    logits = bm.video_logits(t.const(pbar), 0.25).value[:, 0]
    assert logits[0] == 9.0 and logits[1] == 0.0


def test_video_scores_full_ratio_is_mean_then_softmax():
    rng = np.random.default_rng(4)
    pbar = rng.standard_normal((3, 6))
    t = Tape()
    got = bm.video_scores(t.const(pbar), 1.0)
    z = pbar.mean(axis=1)
    expect = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(got, expect, atol=1e-14)


def test_video_scores_constant_cas():
    t = Tape()
    got = bm.video_scores(t.const(np.full((3, 8), 2.0)), 0.25)
    np.testing.assert_allclose(got, 1 / 3)


def test_topk_count_bounds():
    assert bm.topk_count(80, 0.125) == 10
    assert bm.topk_count(3, 0.125) == 1
    with pytest.raises(ContractError):
        bm.topk_count(5, 0.0)


def _loss(p, pbar, label, k=0.5):
    t = Tape()
    return float(bm.base_loss(t.const(p), t.const(pbar), label, k).value.reshape(()))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_base_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(0, 3, (4, 6))
    a = rng.uniform(0, 1, (1, 6))
    label = (rng.uniform(size=3) < 0.5).astype(float)
    label[rng.integers(3)] = 1.0
    assert _loss(p, p * a, label) >= -1e-12


def test_base_loss_near_zero_on_separable_instance():
    # category 0 fires on the attended snippets, background on the rest
    p = np.array([[40.0, 40.0, -40.0, -40.0],
                  [-40.0, -40.0, -40.0, -40.0],
                  [-40.0, -40.0, 40.0, 40.0]])
    a = np.array([[1.0, 1.0, 0.0, 0.0]])
    assert _loss(p, p * a, np.array([1.0, 0.0])) < 1e-10


def test_base_loss_rejects_empty_label():
    p = np.zeros((3, 4))
    with pytest.raises(ContractError):
        _loss(p, p, np.zeros(2))
    with pytest.raises(ShapeError):
        _loss(p, p, np.ones(3))


def test_base_loss_gradient():
    shape, params = make_params(D=4, C=2, hidden_dim=3)
    rng = np.random.default_rng(5)
    fr, ff = rng.standard_normal((2, 4, 7))
    label = np.array([1.0, 0.0])

    def loss(tape, pv):
        ar = bm.attention_forward(tape.const(fr), pv, "rgb")
        af = bm.attention_forward(tape.const(ff), pv, "flow")
        p = bm.cas_forward(tape.const(fr), tape.const(ff), pv)
        pbar = bm.suppress_cas(p, bm.fuse_attention(ar, af))
        return list(bm.base_loss_terms(p, pbar, label, 0.25))

    base = {k: v for k, v in params.items() if not k.startswith("gcn.")}
    assert finite_diff_check(loss, base, eps=1e-5) <= 1e-4


def test_base_loss_permutation_invariant_with_unit_spans():
    shape, params = make_params(D=4, C=2, attention_kernel=1, fusion_kernel=1)
    rng = np.random.default_rng(6)
    fr, ff = rng.standard_normal((2, 4, 9))
    perm = rng.permutation(9)
    label = np.array([0.0, 1.0])

    def run(r, f):
        t = Tape()
        pv = consts(t, params)
        a = bm.fuse_attention(bm.attention_forward(t.const(r), pv, "rgb", 1),
                              bm.attention_forward(t.const(f), pv, "flow", 1))
        p = bm.cas_forward(t.const(r), t.const(f), pv, 1)
        return float(bm.base_loss(p, bm.suppress_cas(p, a), label, 0.25).value.reshape(()))

    assert run(fr, ff) == pytest.approx(run(fr[:, perm], ff[:, perm]), abs=1e-12)
