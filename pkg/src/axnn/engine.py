"""Quantized int8 inference where every multiplication goes through a table.

Convolutions and dense layers are computed with the zero-point
decomposition: with sx = qx - 128 and sw = qw - 128,

    acc = sum T(sx, sw)                       (table lookups, maybe skipped)
        + (128 - w_zp) * sum sx               (exact correction)
        + (128 - x_zp) * sum sw               (exact correction)
        + K * (128 - x_zp) * (128 - w_zp)
        + bias

Only the first term is approximate; correction sums always use the
original weights and every position, so with the exact table the whole
thing collapses to sum (qx - x_zp)(qw - w_zp) + bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Inconsistent tensor/layer shapes."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (numpy's round() would go half-to-even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QTensor:
    """Affine-quantized tensor: real = scale * (q - zero_point)."""

    data: np.ndarray  # uint8, any shape
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ShapeError("scale must be positive")
        if self.data.dtype != np.uint8:
            raise ShapeError("QTensor data must be uint8")

    @property
    def shape(self):
        return self.data.shape


def quantize(x: np.ndarray, scale: float, zero_point: int) -> QTensor:
    if scale <= 0:
        raise ShapeError("scale must be positive")
    q = round_half_away(np.asarray(x, dtype=np.float64) / scale) + zero_point
    return QTensor(np.clip(q, 0, 255).astype(np.uint8), scale, zero_point)


def dequantize(t: QTensor) -> np.ndarray:
    return t.scale * (t.data.astype(np.float64) - t.zero_point)


@dataclass(frozen=True)
class LayerShape:
    n_filters: int
    n_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if min(self.n_filters, self.n_channels, self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ShapeError("layer dimensions must be positive")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be same/valid, got {self.padding!r}")


@dataclass(frozen=True)
class KlmsRule:
    """Keep a multiplication iff its signed weight lies in [mu - k*sigma, mu + k*sigma]."""

    k: float
    mu: float
    sigma: float

    def __post_init__(self):
        if self.k <= 0:
            raise ShapeError("KLMS width k must be positive")
        if self.sigma < 0:
            raise ShapeError("sigma must be nonnegative")

    @classmethod
    def from_weights(cls, signed_weights: np.ndarray, k: float) -> "KlmsRule":
        w = np.asarray(signed_weights, dtype=np.float64)
        return cls(k=k, mu=float(w.mean()), sigma=float(w.std()))

    def keep_mask(self, signed_weights: np.ndarray) -> np.ndarray:
        w = np.asarray(signed_weights, dtype=np.float64)
        return np.abs(w - self.mu) <= self.k * self.sigma


def _materialize_assignment(resolver, n, m, kh, kw) -> np.ndarray:
    """Accept an (N, kh, kw, M) index array or a (f, c, row, col) callable."""
    if isinstance(resolver, np.ndarray):
        if resolver.shape != (n, kh, kw, m):
            raise ShapeError(
                f"assignment shape {resolver.shape} != {(n, kh, kw, m)}"
            )
        return resolver.astype(np.intp)
    out = np.empty((n, kh, kw, m), dtype=np.intp)
    for f in range(n):
        for row in range(kh):
            for col in range(kw):
                for c in range(m):
                    out[f, row, col, c] = resolver(f, c, row, col)
    return out


def _check_palette(assignment: np.ndarray, n_tables: int):
    if assignment.size and (assignment.min() < 0 or assignment.max() >= n_tables):
        raise ShapeError("assignment references a table index outside the palette")


def extract_patches(q: np.ndarray, kh: int, kw: int, stride: int,
                    padding: str, pad_value: int) -> np.ndarray:
    """im2col: (B,H,W,M) uint8 -> (B,Ho,Wo,kh,kw,M)."""
    b, h, w, m = q.shape
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        pad_h = max(0, (ho - 1) * stride + kh - h)
        pad_w = max(0, (wo - 1) * stride + kw - w)
        q = np.pad(
            q,
            ((0, 0), (pad_h // 2, pad_h - pad_h // 2),
             (pad_w // 2, pad_w - pad_w // 2), (0, 0)),
            constant_values=pad_value,
        )
    win = np.lib.stride_tricks.sliding_window_view(q, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, M, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d_approx(
    x: QTensor,
    weights: QTensor,
    bias: np.ndarray,
    shape: LayerShape,
    tables: np.ndarray,
    resolver,
    out_scale: float,
    out_zp: int,
    klms: KlmsRule | None = None,
    tuned_weights: np.ndarray | None = None,
) -> QTensor:
    """Approximate quantized conv2d.

    tables is an (n_tables, 256, 256) stack indexed [idx, a+128, b+128];
    resolver maps (filter, channel, row, col) to a stack index.  KLMS
    drops individual lookups (never the exact correction sums).  Tuned
    weights, when given, replace the weight operand of the lookup only.
    """
    n, kh, kw, m = weights.shape
    if (n, m, kh, kw) != (shape.n_filters, shape.n_channels, shape.kernel_h, shape.kernel_w):
        raise ShapeError(f"weight tensor {weights.shape} does not match {shape}")
    if x.data.ndim != 4 or x.data.shape[3] != m:
        raise ShapeError(f"input {x.data.shape} does not have {m} channels")
    if bias.shape != (n,):
        raise ShapeError("bias length must equal the filter count")

    assignment = _materialize_assignment(resolver, n, m, kh, kw)
    _check_palette(assignment, len(tables))

    patches = extract_patches(x.data, kh, kw, shape.stride, shape.padding, x.zero_point)
    b_sz, ho, wo = patches.shape[:3]
    k = kh * kw * m
    pos = patches.reshape(-1, k)  # uint8 == sx + 128, direct table row index

    w_flat = weights.data.reshape(n, k)
    w_lookup = (tuned_weights if tuned_weights is not None else weights.data).reshape(n, k)
    assign_flat = assignment.reshape(n, k)

    prods = tables[assign_flat[None, :, :], pos[:, None, :], w_lookup[None, :, :]]
    prods = prods.astype(np.int64)
    if klms is not None:
        keep = klms.keep_mask(w_flat.astype(np.int64) - 128)
        prods *= keep[None, :, :]
    acc = prods.sum(axis=2)  # (npos, N)

    sx_sum = (pos.astype(np.int64) - 128).sum(axis=1)
    sw_sum = (w_flat.astype(np.int64) - 128).sum(axis=1)
    acc += (128 - weights.zero_point) * sx_sum[:, None]
    acc += (128 - x.zero_point) * sw_sum[None, :]
    acc += k * (128 - x.zero_point) * (128 - weights.zero_point)
    acc += bias.astype(np.int64)[None, :]

    return requantize_acc(acc.reshape(b_sz, ho, wo, n), x.scale * weights.scale,
                          out_scale, out_zp)


def dense_approx(
    x: QTensor,
    weights: QTensor,
    bias: np.ndarray,
    tables: np.ndarray,
    resolver,
    out_scale: float,
    out_zp: int,
    klms: KlmsRule | None = None,
    tuned_weights: np.ndarray | None = None,
) -> QTensor:
    """Approximate quantized dense layer; weights are (out_units, in_units).

    Routed through the same machinery as conv with each output unit as a
    filter and each input unit as a channel (1x1 kernel).
    """
    out_u, in_u = weights.shape
    if x.data.ndim != 2 or x.data.shape[1] != in_u:
        raise ShapeError(f"dense input {x.data.shape} does not match {weights.shape}")
    if isinstance(resolver, np.ndarray):
        assignment = resolver.astype(np.intp)
        if assignment.shape != (out_u, in_u):
            raise ShapeError("dense assignment must be (out_units, in_units)")
    else:
        assignment = np.empty((out_u, in_u), dtype=np.intp)
        for f in range(out_u):
            for c in range(in_u):
                assignment[f, c] = resolver(f, c, 0, 0)
    _check_palette(assignment, len(tables))

    pos = x.data  # (B, in)
    w_lookup = tuned_weights if tuned_weights is not None else weights.data
    prods = tables[assignment[None, :, :], pos[:, None, :], w_lookup[None, :, :]]
    prods = prods.astype(np.int64)
    if klms is not None:
        keep = klms.keep_mask(weights.data.astype(np.int64) - 128)
        prods *= keep[None, :, :]
    acc = prods.sum(axis=2)

    acc += (128 - weights.zero_point) * (pos.astype(np.int64) - 128).sum(1)[:, None]
    acc += (128 - x.zero_point) * (weights.data.astype(np.int64) - 128).sum(1)[None, :]
    acc += in_u * (128 - x.zero_point) * (128 - weights.zero_point)
    acc += bias.astype(np.int64)[None, :]

    return requantize_acc(acc, x.scale * weights.scale, out_scale, out_zp)


def requantize_acc(acc: np.ndarray, acc_scale: float, out_scale: float,
                   out_zp: int) -> QTensor:
    q = round_half_away(acc * (acc_scale / out_scale)) + out_zp
    return QTensor(np.clip(q, 0, 255).astype(np.uint8), out_scale, out_zp)


def count_multiplications(
    shape: LayerShape,
    out_h: int,
    out_w: int,
    klms: KlmsRule | None = None,
    weights: np.ndarray | None = None,
) -> int:
    """Multiplications one image needs through this conv layer.

    Without KLMS this is Ho*Wo*N*M*kh*kw; with KLMS only kept weights
    count at each output position.
    """
    if klms is None:
        return out_h * out_w * shape.n_filters * shape.n_channels * shape.kernel_h * shape.kernel_w
    if weights is None:
        raise ShapeError("KLMS counting needs the weight tensor")
    kept = int(klms.keep_mask(np.asarray(weights, dtype=np.int64) - 128).sum())
    return out_h * out_w * kept


# --- supporting layers (exact, standard semantics) ---


def relu(x: QTensor) -> QTensor:
    zp = np.uint8(np.clip(x.zero_point, 0, 255))
    return QTensor(np.maximum(x.data, zp), x.scale, x.zero_point)


def maxpool(x: QTensor, size: int = 2, stride: int | None = None) -> QTensor:
    stride = stride or size
    b, h, w, c = x.data.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool needs divisible spatial dims, got {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return QTensor(win.max(axis=(4, 5)), x.scale, x.zero_point)


def avgpool(x: QTensor, size: int = 2, stride: int | None = None) -> QTensor:
    stride = stride or size
    b, h, w, c = x.data.shape
    if h % stride or w % stride:
        raise ShapeError(f"avgpool needs divisible spatial dims, got {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    mean = win.astype(np.int64).sum(axis=(4, 5)) / (size * size)
    q = np.clip(round_half_away(mean), 0, 255).astype(np.uint8)
    return QTensor(q, x.scale, x.zero_point)


def global_avgpool(x: QTensor) -> QTensor:
    b, h, w, c = x.data.shape
    mean = x.data.astype(np.int64).sum(axis=(1, 2)) / (h * w)
    q = np.clip(round_half_away(mean), 0, 255).astype(np.uint8)
    return QTensor(q, x.scale, x.zero_point)


def residual_add(a: QTensor, b: QTensor, out_scale: float, out_zp: int) -> QTensor:
    """Add two quantized tensors, realigning scales; addition stays exact."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add operands {a.data.shape} vs {b.data.shape}")
    real = dequantize(a) + dequantize(b)
    q = round_half_away(real / out_scale) + out_zp
    return QTensor(np.clip(q, 0, 255).astype(np.uint8), out_scale, out_zp)


def argmax_class(x: QTensor) -> np.ndarray:
    """Predicted class per batch row (first index wins ties)."""
    return np.argmax(x.data.reshape(x.data.shape[0], -1), axis=1)
