import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp

from vmq import model as mdl, quant

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)
bits_st = st.integers(2, 8)


def test_affine_hand_examples():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
    qp = quant.minmax_affine_params(x, 2)
    assert qp.delta == pytest.approx(1.0) and qp.eps == 1
    np.testing.assert_array_equal(quant.affine_codes(x, qp), [0, 1, 3])
    np.testing.assert_array_equal(quant.fake_quant_affine(x, qp), x)
    assert quant.fake_quant_affine(np.float32(0.4), qp) == 0.0

    qp = quant.minmax_affine_params(x, 2, gamma=2 / 3)
    assert qp.delta == pytest.approx(2 / 3, rel=1e-6) and qp.eps == 1


@pytest.mark.parametrize("c", [0.0, 3.25, -0.7])
def test_constant_tensor_reconstructs(c):
    x = np.full(10, c, dtype=np.float32)
    qp = quant.minmax_affine_params(x, 4)
    assert 0 <= qp.eps <= qp.qmax
    np.testing.assert_allclose(quant.fake_quant_affine(x, qp), x, atol=1e-7 + 1e-6 * abs(c))
    if c == 0.0:
        assert qp.delta == np.float32(quant.DELTA_FLOOR)


@given(hnp.arrays(np.float32, st.integers(1, 64), elements=finite), bits_st, st.floats(0.5, 1.0))
def test_affine_error_bound_and_idempotence(x, bits, gamma):
    qp = quant.minmax_affine_params(x, bits, gamma)
    xh = quant.fake_quant_affine(x, qp)
    d = float(qp.delta)
    lo, hi = -float(qp.eps) * d, (qp.qmax - float(qp.eps)) * d
    inside = (x >= lo) & (x <= hi)
    assert np.all(np.abs(x - xh)[inside] <= d / 2 + 1e-6 + 1e-6 * np.abs(x[inside]))
    np.testing.assert_array_equal(quant.fake_quant_affine(xh, qp), xh)


def test_symmetric_hand_examples():
    w = np.array([[-3.0, 1.2, 3.0]], dtype=np.float32)
    qp = quant.symmetric_weight_params(w, 4)
    assert qp.delta[0] == pytest.approx(3 / 7, rel=1e-6)
    np.testing.assert_array_equal(quant.quantize_weights(w, qp), [[-7, 3, 7]])
    np.testing.assert_allclose(quant.fake_quant_symmetric(w, qp), [[-3, 9 / 7, 3]], rtol=1e-6)
    assert quant.symmetric_weight_params(np.zeros((1, 3)), 4).delta[0] == np.float32(1e-8)
    assert quant.symmetric_weight_params(np.array([[12.7, -1]]), 8).delta[0] == pytest.approx(0.1, rel=1e-6)


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 12)), elements=finite), bits_st)
def test_symmetric_codes_bounded_and_error(w, bits):
    qp = quant.symmetric_weight_params(w, bits)
    c = quant.quantize_weights(w, qp)
    assert c.min() >= -qp.qmax and c.max() <= qp.qmax
    err = np.abs(w - quant.fake_quant_symmetric(w, qp))
    assert np.all(err <= qp.delta[:, None] / 2 + 1e-6 * (1 + np.abs(w)))


def test_weight_on_grid_exact():
    qp = quant.QuantParams(4, quant.PER_CHANNEL, np.array([0.5, 0.25]))
    w = np.array([[1.5, -3.5], [0.25, 1.75]], dtype=np.float32)
    np.testing.assert_array_equal(quant.fake_quant_symmetric(w, qp), w)


def test_per_token_params():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 8, 16)).astype(np.float32)
    qp = quant.per_token_params(x, 8)
    for l in range(8):
        ref = quant.minmax_affine_params(x[0, l], 8)
        assert qp.delta[l] == ref.delta and qp.eps[l] == ref.eps
    x = rng.standard_normal((4, 8, 16)).astype(np.float32)
    x[:, 5] *= 100
    qp = quant.per_token_params(x, 8)
    assert qp.delta[5] / np.median(qp.delta) >= 50
    assert np.all(quant.per_token_params(x, 8, 0.9).delta <= qp.delta)
    with pytest.raises(Exception):
        quant.per_token_params([np.ones((3, 2)), np.ones((4, 2))], 8)


def test_dynamic_tighter_than_static():
    rng = np.random.default_rng(1)
    calib = rng.standard_normal((16, 10, 32)).astype(np.float32) * rng.uniform(0.1, 5, (1, 10, 1))
    qp = quant.per_token_params(calib, 4)
    x = calib[3]
    pts_err = np.abs(quant.fake_quant_affine(x, qp) - x).mean()
    codes, dq = quant.dynamic_per_token_quant(x, 4)
    dyn = dq.delta[:, None] * (codes - dq.eps[:, None])
    assert np.abs(dyn - x).mean() <= pts_err
    one = x[:1]
    c1, q1 = quant.dynamic_per_token_quant(one, 4)
    ref = quant.minmax_affine_params(one, 4)
    assert q1.delta[0] == ref.delta and q1.eps[0] == ref.eps


def test_smooth_scale_examples():
    assert quant.smooth_scale([4.0], [1.0], 0.5)[0] == pytest.approx(2.0)
    assert quant.smooth_scale([3.0], [3.0], 0.5)[0] == pytest.approx(1.0)
    assert quant.smooth_scale([5.0], [0.2], 1.0)[0] == pytest.approx(5.0)
    with pytest.raises(ValueError):
        quant.smooth_scale([-1.0], [1.0])


def test_apply_smoothing_toy_and_identity():
    layer = mdl.Linear(np.array([[1.0, 1.0], [2.0, -1.0]], np.float32), np.zeros(2, np.float32))
    new, _, sc = quant.apply_smoothing(layer, [2.0, 0.5])
    np.testing.assert_array_equal(new.weight, [[2.0, 0.5], [4.0, -0.5]])
    np.testing.assert_array_equal(sc.inv, [0.5, 2.0])
    assert not sc.folded
    same, _, _ = quant.apply_smoothing(layer, [1.0, 1.0])
    np.testing.assert_array_equal(same.weight, layer.weight)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_smoothing_identity(d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d_out, d_in)).astype(np.float32)
    x = rng.standard_normal((5, d_in)).astype(np.float32)
    s = rng.uniform(0.1, 10, d_in).astype(np.float32)
    layer = mdl.Linear(w, None)
    new, _, sc = quant.apply_smoothing(layer, s)
    y0 = x @ w.T
    y1 = (x * sc.inv) @ new.weight.T
    assert np.linalg.norm(y1 - y0) <= 1e-5 * max(np.linalg.norm(y0), 1e-12)


def test_apply_smoothing_folds_into_producer():
    rng = np.random.default_rng(2)
    prod = mdl.Linear(rng.standard_normal((3, 4)).astype(np.float32), rng.standard_normal(3).astype(np.float32))
    cons = mdl.Linear(rng.standard_normal((2, 3)).astype(np.float32), None)
    s = np.array([2.0, 0.5, 4.0], np.float32)
    new, p2, sc = quant.apply_smoothing(cons, s, prod)
    assert sc.folded
    x = rng.standard_normal((5, 4)).astype(np.float32)
    ref = (x @ prod.weight.T + prod.bias) @ cons.weight.T
    got = (x @ p2.weight.T + p2.bias) @ new.weight.T
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_pack_examples():
    assert quant.pack_int4([3, -2])[0] == 0xE3
    assert quant.pack_int4([0, 0])[0] == 0
    assert quant.pack_int4([-8, 7])[0] == 0x78
    np.testing.assert_array_equal(quant.unpack_int4([0x78]), [-8, 7])
    with pytest.raises(ValueError):
        quant.pack_int4([8])


def test_pack_all_nibble_pairs_bijective():
    lo, hi = np.meshgrid(np.arange(-8, 8), np.arange(-8, 8))
    pairs = np.stack([lo.ravel(), hi.ravel()], axis=1).ravel()
    packed = quant.pack_int4(pairs)
    assert sorted(packed.tolist()) == list(range(256))
    np.testing.assert_array_equal(quant.unpack_int4(packed), pairs)


@given(hnp.arrays(np.int8, st.integers(0, 33), elements=st.integers(-8, 7)))
def test_pack_roundtrip_odd_lengths(c):
    p = quant.pack_int4(c)
    assert p.size == (c.size + 1) // 2
    np.testing.assert_array_equal(quant.unpack_int4(p, c.size), c)


def test_bits_and_gamma_validation():
    with pytest.raises(ValueError):
        quant.minmax_affine_params(np.ones(3), 9)
    with pytest.raises(ValueError):
        quant.minmax_affine_params(np.ones(3), 4, gamma=0.0)
    with pytest.raises(ValueError):
        quant.minmax_affine_params(np.zeros(0), 4)


def test_activation_stats(tiny_model, tiny_calib):
    one = quant.collect_activation_stats(tiny_model, tiny_calib[:1], taps=["blocks.0.out_proj"])
    acts = {}

    class Tap(mdl.FPContext):
        def linear(self, path, x, layer):
            acts.setdefault(path, x)
            return super().linear(path, x, layer)

    mdl.model_forward(tiny_model, tiny_calib[:1], Tap())
    st_ = one["blocks.0.out_proj"]
    x = acts["blocks.0.out_proj"][0]
    np.testing.assert_array_equal(st_.max_abs, np.abs(x).max(axis=0))
    np.testing.assert_array_equal(st_.tok_min, x.min(axis=1))
    more = quant.collect_activation_stats(tiny_model, tiny_calib[:16], taps=["blocks.0.out_proj"])
    assert np.all(more["blocks.0.out_proj"].max_abs >= st_.max_abs)
    top = np.argsort(more["blocks.0.out_proj"].max_abs)[-2:]
    assert set(top.tolist()) == set(tiny_model.pathology.outlier_channels)
    with pytest.raises(KeyError):
        quant.collect_activation_stats(tiny_model, tiny_calib[:1], taps=["nope"])
