import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axnn import engine
from axnn import multipliers as mx
from axnn.engine import KlmsRule, LayerShape, QTensor
from oracles import ref_conv, ref_requantize

EXACT = mx.build_table(mx.MultiplierSpec.exact())
ROUP_M_TABLE = mx.build_table(mx.ROUP_M)


def _random_case(rng, max_hw=9, max_k=3, max_ch=4, max_f=4):
    h = int(rng.integers(3, max_hw))
    w = int(rng.integers(3, max_hw))
    m = int(rng.integers(1, max_ch + 1))
    n = int(rng.integers(1, max_f + 1))
    kh = int(rng.integers(1, max_k + 1))
    kw = int(rng.integers(1, max_k + 1))
    stride = int(rng.integers(1, 3))
    padding = ["same", "valid"][int(rng.integers(2))]
    if padding == "valid":
        kh, kw = min(kh, h), min(kw, w)
    x = QTensor(rng.integers(0, 256, size=(2, h, w, m), dtype=np.uint8),
                float(rng.uniform(0.005, 0.05)), int(rng.integers(0, 256)))
    wt = QTensor(rng.integers(0, 256, size=(n, kh, kw, m), dtype=np.uint8),
                 float(rng.uniform(0.005, 0.05)), int(rng.integers(0, 256)))
    bias = rng.integers(-500, 500, size=n).astype(np.int32)
    shape = LayerShape(n, m, kh, kw, stride, padding)
    out_scale = float(rng.uniform(0.01, 0.2))
    out_zp = int(rng.integers(0, 256))
    return x, wt, bias, shape, out_scale, out_zp


def test_round_half_away_from_zero():
    got = engine.round_half_away(np.array([0.5, 1.5, -0.5, -1.5, 2.4, -2.4]))
    assert got.tolist() == [1, 2, -1, -2, 2, -2]


def test_requantize_matches_reference():
    rng = np.random.default_rng(0)
    acc = rng.integers(-40000, 40000, size=200)
    out = engine.requantize_acc(acc, 0.003, 0.07, 131)
    for a, q in zip(acc, out.data):
        assert q == ref_requantize(int(a), 0.003, 0.07, 131)


def test_quantize_dequantize_roundtrip():
    rng = np.random.default_rng(1)
    real = rng.uniform(-1, 1, size=100)
    t = engine.quantize(real, 1 / 100, 128)
    assert np.abs(engine.dequantize(t) - real).max() <= 0.5 / 100 + 1e-12


def test_conv_decomposition_exact_oracle_small_batch():
    rng = np.random.default_rng(11)
    for _ in range(25):
        x, wt, bias, shape, out_scale, out_zp = _random_case(rng)
        got = engine.conv2d_approx(
            x, wt, bias, shape, EXACT.products[None].astype(np.int64),
            np.zeros((shape.n_filters, shape.kernel_h, shape.kernel_w,
                      shape.n_channels), dtype=np.intp),
            out_scale, out_zp)
        want = ref_conv(x.data, x.zero_point, x.scale, wt.data, wt.zero_point,
                        wt.scale, bias, shape.stride, shape.padding,
                        out_scale, out_zp)
        assert np.array_equal(got.data, want)


def test_conv_with_approx_table_matches_scalar_decomposition():
    rng = np.random.default_rng(12)
    for _ in range(6):
        x, wt, bias, shape, out_scale, out_zp = _random_case(rng, max_hw=6)
        got = engine.conv2d_approx(
            x, wt, bias, shape, ROUP_M_TABLE.products[None].astype(np.int64),
            np.zeros((shape.n_filters, shape.kernel_h, shape.kernel_w,
                      shape.n_channels), dtype=np.intp),
            out_scale, out_zp)
        want = ref_conv(x.data, x.zero_point, x.scale, wt.data, wt.zero_point,
                        wt.scale, bias, shape.stride, shape.padding,
                        out_scale, out_zp, product=ROUP_M_TABLE.product)
        assert np.array_equal(got.data, want)


def test_conv_mixed_palette_respects_assignment():
    rng = np.random.default_rng(13)
    x, wt, bias, shape, out_scale, out_zp = _random_case(rng, max_hw=6)
    n, kh, kw, m = wt.data.shape
    assignment = rng.integers(0, 2, size=(n, kh, kw, m)).astype(np.intp)
    stack = np.stack([EXACT.products, ROUP_M_TABLE.products]).astype(np.int64)
    got = engine.conv2d_approx(x, wt, bias, shape, stack, assignment,
                               out_scale, out_zp)

    def product(sx, sw):
        raise AssertionError("scalar path goes through resolver below")

    # scalar reference with the per-coordinate table choice
    tables = [EXACT, ROUP_M_TABLE]
    def resolver_product(f, ki, kj, c):
        return lambda sx, sw: tables[assignment[f, ki, kj, c]].product(sx, sw)
    # re-run ref_conv per filter is awkward; instead check the engine
    # against itself restricted to each pure assignment on matching coords
    for idx, table in enumerate(tables):
        pure = engine.conv2d_approx(
            x, wt, bias, shape, stack,
            np.full_like(assignment, idx), out_scale, out_zp)
        # filters whose coordinates all use this table must agree exactly
        full = np.all(assignment == idx, axis=(1, 2, 3))
        assert np.array_equal(got.data[..., full], pure.data[..., full])


def test_dense_matches_conv_route():
    rng = np.random.default_rng(14)
    x = QTensor(rng.integers(0, 256, size=(5, 12), dtype=np.uint8), 0.02, 120)
    wt = QTensor(rng.integers(0, 256, size=(7, 12), dtype=np.uint8), 0.01, 130)
    bias = rng.integers(-300, 300, size=7).astype(np.int32)
    got = engine.dense_approx(x, wt, bias,
                              EXACT.products[None].astype(np.int64),
                              np.zeros((7, 12), dtype=np.intp), 0.05, 128)
    # dense is a 1x1x1 conv over in_units channels
    x4 = QTensor(x.data.reshape(5, 1, 1, 12), x.scale, x.zero_point)
    w4 = QTensor(wt.data.reshape(7, 1, 1, 12), wt.scale, wt.zero_point)
    conv = engine.conv2d_approx(x4, w4, bias, LayerShape(7, 12, 1, 1),
                                EXACT.products[None].astype(np.int64),
                                np.zeros((7, 1, 1, 12), dtype=np.intp),
                                0.05, 128)
    assert np.array_equal(got.data, conv.data.reshape(5, 7))


# --- KLMS ---


def test_klms_rule_statistics():
    w = np.array([-4, -2, 0, 2, 4], dtype=np.int64)
    rule = KlmsRule.from_weights(w, k=1.0)
    assert rule.mu == 0
    assert rule.sigma == pytest.approx(np.sqrt(8))  # population std
    assert rule.keep_mask(w).tolist() == [False, True, True, True, False]


def test_klms_huge_k_is_no_op():
    rng = np.random.default_rng(15)
    x, wt, bias, shape, out_scale, out_zp = _random_case(rng)
    stack = ROUP_M_TABLE.products[None].astype(np.int64)
    assign = np.zeros(wt.data.shape, dtype=np.intp)
    rule = KlmsRule.from_weights(wt.data.astype(np.int64) - 128, k=1e6)
    plain = engine.conv2d_approx(x, wt, bias, shape, stack, assign,
                                 out_scale, out_zp)
    gated = engine.conv2d_approx(x, wt, bias, shape, stack, assign,
                                 out_scale, out_zp, klms=rule)
    assert np.array_equal(plain.data, gated.data)


def test_klms_skip_matches_scalar_reference():
    rng = np.random.default_rng(16)
    x, wt, bias, shape, out_scale, out_zp = _random_case(rng, max_hw=6)
    rule = KlmsRule.from_weights(wt.data.astype(np.int64) - 128, k=1.0)
    got = engine.conv2d_approx(
        x, wt, bias, shape, EXACT.products[None].astype(np.int64),
        np.zeros(wt.data.shape, dtype=np.intp), out_scale, out_zp, klms=rule)
    want = ref_conv(x.data, x.zero_point, x.scale, wt.data, wt.zero_point,
                    wt.scale, bias, shape.stride, shape.padding,
                    out_scale, out_zp, product=lambda a, b: a * b,
                    keep=lambda sw: bool(rule.keep_mask(np.array([sw]))[0]))
    assert np.array_equal(got.data, want)


def test_count_multiplications():
    shape = LayerShape(4, 3, 3, 3)
    assert engine.count_multiplications(shape, 8, 8) == 8 * 8 * 4 * 3 * 3 * 3
    w = np.full((4, 3, 3, 3), 128, dtype=np.uint8)
    w[0, 0, 0, 0] = 255  # lone outlier gets skipped at k=1
    rule = KlmsRule.from_weights(w.astype(np.int64) - 128, k=1.0)
    assert engine.count_multiplications(shape, 8, 8, rule, w) == 8 * 8 * 107


# --- supporting layers ---


def test_relu_clamps_at_zero_point():
    t = QTensor(np.array([[0, 100, 128, 200]], dtype=np.uint8), 0.1, 128)
    assert engine.relu(t).data.tolist() == [[128, 128, 128, 200]]


def test_maxpool_and_avgpool():
    d = np.arange(16, dtype=np.uint8).reshape(1, 4, 4, 1)
    t = QTensor(d, 0.1, 0)
    assert engine.maxpool(t).data.reshape(2, 2).tolist() == [[5, 7], [13, 15]]
    # avgpool rounds half away from zero: mean of 0,1,4,5 = 2.5 -> 3
    assert engine.avgpool(t).data.reshape(2, 2).tolist() == [[3, 5], [11, 13]]
    assert engine.global_avgpool(t).data.tolist() == [[8]]  # mean 7.5 -> 8


def test_residual_add_realigns_scales():
    a = QTensor(np.array([[10]], dtype=np.uint8), 0.5, 0)   # 5.0
    b = QTensor(np.array([[100]], dtype=np.uint8), 0.1, 50)  # 5.0
    out = engine.residual_add(a, b, 1.0, 10)
    assert out.data.tolist() == [[20]]  # 10.0 / 1.0 + 10


def test_argmax_first_index_wins_ties():
    t = QTensor(np.array([[3, 9, 9, 1]], dtype=np.uint8), 0.1, 0)
    assert engine.argmax_class(t).tolist() == [1]


@given(st.integers(2, 10), st.integers(2, 10), st.integers(1, 3),
       st.integers(1, 3), st.integers(1, 2), st.sampled_from(["same", "valid"]))
@settings(max_examples=60, deadline=None)
def test_extract_patches_shape(h, w, kh, kw, stride, padding):
    if padding == "valid" and (kh > h or kw > w):
        return
    q = np.zeros((1, h, w, 2), dtype=np.uint8)
    patches = engine.extract_patches(q, kh, kw, stride, padding, 7)
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
    else:
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
    assert patches.shape == (1, ho, wo, kh, kw, 2)


def test_shape_errors():
    x = QTensor(np.zeros((1, 4, 4, 3), dtype=np.uint8), 0.1, 0)
    wt = QTensor(np.zeros((2, 3, 3, 3), dtype=np.uint8), 0.1, 0)
    with pytest.raises(engine.ShapeError):
        engine.conv2d_approx(x, wt, np.zeros(2, dtype=np.int32),
                             LayerShape(2, 4, 3, 3),  # wrong channel count
                             EXACT.products[None].astype(np.int64),
                             np.zeros((2, 3, 3, 3), dtype=np.intp), 0.1, 0)
    with pytest.raises(engine.ShapeError):
        QTensor(np.zeros(3, dtype=np.int32), 0.1, 0)  # not uint8
    with pytest.raises(engine.ShapeError):
        engine.conv2d_approx(x, wt, np.zeros(2, dtype=np.int32),
                             LayerShape(2, 3, 3, 3),
                             EXACT.products[None].astype(np.int64),
                             np.ones((2, 3, 3, 3), dtype=np.intp),  # idx 1 of 1
                             0.1, 0)
