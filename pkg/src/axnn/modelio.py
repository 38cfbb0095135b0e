"""Model and dataset persistence.

The native model format is a schema-versioned JSON manifest with
base64-encoded little-endian weight blobs: human-diffable, framework
free, and bit-exact under round-trip.  Datasets come either from the
standard CIFAR-10 binary layout or from seeded synthetic fixtures whose
labels are the exact model's own predictions (so the identity plan
scores 100% by construction).
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import LayerShape, QTensor, round_half_away

SCHEMA_VERSION = 1
CIFAR_RECORD_BYTES = 3073

MULT_LAYER_KINDS = ("conv", "dense")


class ModelFormatError(ValueError):
    """Schema violation, digest mismatch, or malformed dataset file."""


@dataclass
class ConvLayer:
    weights: np.ndarray  # uint8 (N, kh, kw, M), output-filter-major
    bias: np.ndarray  # int32 (N,)
    stride: int
    padding: str
    scale_in: float
    zp_in: int
    w_scale: float
    w_zp: int
    scale_out: float
    zp_out: int
    kind: str = "conv"
    # runtime-only: weight operand substitutes produced by plan tuning
    tuned_weights: np.ndarray | None = None

    @property
    def shape(self) -> LayerShape:
        n, kh, kw, m = self.weights.shape
        return LayerShape(n, m, kh, kw, self.stride, self.padding)


@dataclass
class DenseLayer:
    weights: np.ndarray  # uint8 (out_units, in_units)
    bias: np.ndarray  # int32 (out_units,)
    scale_in: float
    zp_in: int
    w_scale: float
    w_zp: int
    scale_out: float
    zp_out: int
    kind: str = "dense"
    tuned_weights: np.ndarray | None = None


@dataclass
class ReluLayer:
    kind: str = "relu"


@dataclass
class MaxPoolLayer:
    size: int = 2
    stride: int = 2
    kind: str = "maxpool"


@dataclass
class AvgPoolLayer:
    size: int = 2
    stride: int = 2
    kind: str = "avgpool"


@dataclass
class GlobalAvgPoolLayer:
    kind: str = "globalavgpool"


@dataclass
class AddLayer:
    shortcut_from: int  # index of the layer whose output is the second operand
    scale_out: float
    zp_out: int
    kind: str = "add"


@dataclass
class ArgmaxLayer:
    kind: str = "softmax-argmax"


Layer = (
    ConvLayer | DenseLayer | ReluLayer | MaxPoolLayer | AvgPoolLayer
    | GlobalAvgPoolLayer | AddLayer | ArgmaxLayer
)


@dataclass
class QModel:
    input_shape: tuple[int, int, int]  # (H, W, C)
    input_scale: float
    input_zp: int
    layers: list[Layer] = field(default_factory=list)
    version: int = SCHEMA_VERSION

    def mult_layer_indices(self) -> list[int]:
        """Indices of layers whose multiplications a plan can approximate."""
        return [i for i, l in enumerate(self.layers) if l.kind in MULT_LAYER_KINDS]

    def validate(self):
        for i, layer in enumerate(self.layers):
            if layer.kind == "add":
                if not (0 <= layer.shortcut_from < i):
                    raise ModelFormatError(
                        f"layers[{i}].shortcut_from must point to an earlier layer"
                    )


@dataclass
class Dataset:
    images: np.ndarray  # uint8 NHWC
    labels: np.ndarray  # int, in [0, classes)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ModelFormatError("image/label counts differ")


# --- manifest serialization ---


def _b64(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(arr.astype(dtype)).tobytes()).decode()


def _unb64(text: str, dtype: str, shape, where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception:
        raise ModelFormatError(f"{where}: invalid base64")
    arr = np.frombuffer(raw, dtype=dtype)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ModelFormatError(f"{where}: expected {expected} values, got {arr.size}")
    return arr.reshape(shape).copy()


def _layer_to_json(layer: Layer) -> dict:
    if isinstance(layer, ConvLayer):
        n, kh, kw, m = layer.weights.shape
        return {
            "kind": "conv",
            "shape": {"filters": n, "channels": m, "kernel": [kh, kw],
                      "stride": layer.stride, "padding": layer.padding},
            "scale_in": layer.scale_in, "zp_in": layer.zp_in,
            "w_scale": layer.w_scale, "w_zp": layer.w_zp,
            "scale_out": layer.scale_out, "zp_out": layer.zp_out,
            "weights_b64": _b64(layer.weights, "<u1"),
            "bias_b64": _b64(layer.bias, "<i4"),
        }
    if isinstance(layer, DenseLayer):
        out_u, in_u = layer.weights.shape
        return {
            "kind": "dense",
            "shape": {"units_out": out_u, "units_in": in_u},
            "scale_in": layer.scale_in, "zp_in": layer.zp_in,
            "w_scale": layer.w_scale, "w_zp": layer.w_zp,
            "scale_out": layer.scale_out, "zp_out": layer.zp_out,
            "weights_b64": _b64(layer.weights, "<u1"),
            "bias_b64": _b64(layer.bias, "<i4"),
        }
    if isinstance(layer, (MaxPoolLayer, AvgPoolLayer)):
        return {"kind": layer.kind, "shape": {"size": layer.size, "stride": layer.stride}}
    if isinstance(layer, AddLayer):
        return {"kind": "add", "shortcut_from": layer.shortcut_from,
                "scale_out": layer.scale_out, "zp_out": layer.zp_out}
    return {"kind": layer.kind}


def _require(d: dict, keys: set[str], where: str) -> None:
    missing = keys - d.keys()
    if missing:
        raise ModelFormatError(f"{where}: missing field(s) {sorted(missing)}")
    extra = d.keys() - keys
    if extra:
        raise ModelFormatError(f"{where}: unknown field(s) {sorted(extra)}")


_QUANT_KEYS = {"scale_in", "zp_in", "w_scale", "w_zp", "scale_out", "zp_out"}


def _layer_from_json(d: dict, where: str) -> Layer:
    if not isinstance(d, dict) or "kind" not in d:
        raise ModelFormatError(f"{where}: layer must be an object with a kind")
    kind = d["kind"]
    if kind == "conv":
        _require(d, {"kind", "shape", "weights_b64", "bias_b64"} | _QUANT_KEYS, where)
        s = d["shape"]
        _require(s, {"filters", "channels", "kernel", "stride", "padding"}, f"{where}.shape")
        kh, kw = s["kernel"]
        w = _unb64(d["weights_b64"], "<u1",
                   (s["filters"], kh, kw, s["channels"]), f"{where}.weights_b64")
        b = _unb64(d["bias_b64"], "<i4", (s["filters"],), f"{where}.bias_b64")
        return ConvLayer(w, b, s["stride"], s["padding"],
                         d["scale_in"], d["zp_in"], d["w_scale"], d["w_zp"],
                         d["scale_out"], d["zp_out"])
    if kind == "dense":
        _require(d, {"kind", "shape", "weights_b64", "bias_b64"} | _QUANT_KEYS, where)
        s = d["shape"]
        _require(s, {"units_out", "units_in"}, f"{where}.shape")
        w = _unb64(d["weights_b64"], "<u1", (s["units_out"], s["units_in"]),
                   f"{where}.weights_b64")
        b = _unb64(d["bias_b64"], "<i4", (s["units_out"],), f"{where}.bias_b64")
        return DenseLayer(w, b, d["scale_in"], d["zp_in"], d["w_scale"], d["w_zp"],
                          d["scale_out"], d["zp_out"])
    if kind in ("maxpool", "avgpool"):
        _require(d, {"kind", "shape"}, where)
        _require(d["shape"], {"size", "stride"}, f"{where}.shape")
        cls = MaxPoolLayer if kind == "maxpool" else AvgPoolLayer
        return cls(d["shape"]["size"], d["shape"]["stride"])
    if kind == "add":
        _require(d, {"kind", "shortcut_from", "scale_out", "zp_out"}, where)
        return AddLayer(d["shortcut_from"], d["scale_out"], d["zp_out"])
    if kind == "relu":
        _require(d, {"kind"}, where)
        return ReluLayer()
    if kind == "globalavgpool":
        _require(d, {"kind"}, where)
        return GlobalAvgPoolLayer()
    if kind == "softmax-argmax":
        _require(d, {"kind"}, where)
        return ArgmaxLayer()
    raise ModelFormatError(f"{where}: unknown layer kind {kind!r}")


def _weights_digest(layers: list[dict]) -> str:
    h = hashlib.sha256()
    for d in layers:
        for key in ("weights_b64", "bias_b64"):
            if key in d:
                h.update(d[key].encode())
    return h.hexdigest()


def save_model(model: QModel, path: str | Path) -> None:
    model.validate()
    layers = [_layer_to_json(l) for l in model.layers]
    doc = {
        "version": model.version,
        "input_shape": list(model.input_shape),
        "input_scale": model.input_scale,
        "input_zp": model.input_zp,
        "layers": layers,
        "digest": _weights_digest(layers),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path: str | Path) -> QModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})")
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: manifest must be a JSON object")
    _require(doc, {"version", "input_shape", "input_scale", "input_zp",
                   "layers", "digest"}, str(path))
    if doc["version"] != SCHEMA_VERSION:
        raise ModelFormatError(f"{path}: unsupported schema version {doc['version']}")
    layers_json = doc["layers"]
    if _weights_digest(layers_json) != doc["digest"]:
        raise ModelFormatError(f"{path}: digest mismatch (corrupt weight blobs?)")
    layers = [_layer_from_json(d, f"layers[{i}]") for i, d in enumerate(layers_json)]
    model = QModel(tuple(doc["input_shape"]), doc["input_scale"], doc["input_zp"], layers)
    model.validate()
    return model


# --- datasets ---


def load_cifar10(path: str | Path) -> Dataset:
    """Standard CIFAR-10 binary: per record one label byte, then 3072
    pixel bytes plane-major R,G,B; converted to NHWC."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES != 0:
        raise ModelFormatError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ModelFormatError(f"{path}: label byte {labels.max()} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(images), labels)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    np.savez(str(path), images=ds.images, labels=ds.labels)


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset: .npz fixture archives or CIFAR-10 .bin files."""
    p = Path(path)
    if p.suffix == ".npz":
        with np.load(str(p)) as z:
            return Dataset(z["images"], z["labels"])
    return load_cifar10(p)


# --- synthetic fixtures ---

FIXTURE_PRESETS = ("tiny", "resnet8")


def _gen_conv(rng, m, n, kh, kw, probe, scale_in, zp_in, center_bias=False):
    """Random Gaussian conv quantized to uint8, output range calibrated
    on the probe batch."""
    from .engine import extract_patches

    w_scale = 1.0 / 25.0  # sigma of N(0,1) weights maps to ~25 LSB
    w_real = rng.normal(0.0, 1.0, size=(n, kh, kw, m))
    w_real -= w_real.mean()  # keep the sample mean on 0 even for small layers
    w_q = np.clip(round_half_away(w_real / w_scale) + 128, 0, 255).astype(np.uint8)
    bias = rng.integers(-200, 200, size=n).astype(np.int32)

    patches = extract_patches(probe, kh, kw, 1, "same", zp_in)
    b_sz, ho, wo = patches.shape[:3]
    k = kh * kw * m
    sx = patches.reshape(-1, k).astype(np.int64) - zp_in
    sw = w_q.reshape(n, k).astype(np.int64) - 128
    acc = sx @ sw.T + bias[None, :]
    if center_bias:
        # classification head: remove each filter's mean response so no
        # class dominates by offset alone
        shift = round_half_away(acc.mean(axis=0)).astype(np.int64)
        bias = (bias - shift).astype(np.int32)
        acc = acc - shift[None, :]
    real = acc * (scale_in * w_scale)
    lo, hi = float(real.min()), float(real.max())
    span = max(hi - lo, 1e-6)
    lo -= 0.05 * span
    hi += 0.05 * span
    scale_out = (hi - lo) / 255.0
    zp_out = int(np.clip(round_half_away(np.array(-lo / scale_out)), 0, 255))
    layer = ConvLayer(w_q, bias, 1, "same", scale_in, zp_in, w_scale, 128,
                      scale_out, zp_out)
    out = np.clip(round_half_away(real / scale_out) + zp_out, 0, 255)
    return layer, out.reshape(b_sz, ho, wo, n).astype(np.uint8)


def _gen_dense(rng, in_u, out_u, probe, scale_in, zp_in, center_bias=False):
    w_scale = 1.0 / 25.0
    w_real = rng.normal(0.0, 1.0, size=(out_u, in_u))
    w_real -= w_real.mean()
    w_q = np.clip(round_half_away(w_real / w_scale) + 128, 0, 255).astype(np.uint8)
    bias = rng.integers(-200, 200, size=out_u).astype(np.int32)
    sx = probe.astype(np.int64) - zp_in
    acc = sx @ (w_q.astype(np.int64) - 128).T + bias[None, :]
    if center_bias:
        shift = round_half_away(acc.mean(axis=0)).astype(np.int64)
        bias = (bias - shift).astype(np.int32)
        acc = acc - shift[None, :]
    real = acc * (scale_in * w_scale)
    lo, hi = float(real.min()), float(real.max())
    span = max(hi - lo, 1e-6)
    lo -= 0.05 * span
    hi += 0.05 * span
    scale_out = (hi - lo) / 255.0
    zp_out = int(np.clip(round_half_away(np.array(-lo / scale_out)), 0, 255))
    layer = DenseLayer(w_q, bias, scale_in, zp_in, w_scale, 128, scale_out, zp_out)
    out = np.clip(round_half_away(real / scale_out) + zp_out, 0, 255).astype(np.uint8)
    return layer, out


def generate_fixture(seed: int, preset: str, n_images: int | None = None
                     ) -> tuple[QModel, Dataset]:
    """Deterministic synthetic model + self-labeled dataset.

    Presets: "tiny" is an all-conv net with 7 approximable conv layers
    on 8x8 inputs (the last conv emits the 10 class channels); "resnet8"
    is a 7-conv residual topology with identity shortcuts plus a dense
    head on 16x16 inputs.  Labels are the exact model's own argmax, so
    the identity plan is 100% accurate by construction.
    """
    if preset not in FIXTURE_PRESETS:
        raise ModelFormatError(f"unknown fixture preset {preset!r}")
    rng = np.random.default_rng(seed)
    input_scale, input_zp = 1.0 / 128.0, 128

    if preset == "tiny":
        h = w = 8
        n_images = n_images or 64
    else:
        h = w = 16
        n_images = n_images or 32
    images = rng.integers(0, 256, size=(n_images, h, w, 3), dtype=np.uint8)

    layers: list[Layer] = []
    act = images
    scale, zp = input_scale, input_zp

    def push_conv(filters, relu_after=True, center_bias=False):
        nonlocal act, scale, zp
        layer, act = _gen_conv(rng, act.shape[3], filters, 3, 3, act, scale, zp,
                               center_bias=center_bias)
        layers.append(layer)
        scale, zp = layer.scale_out, layer.zp_out
        if relu_after:
            layers.append(ReluLayer())
            act = np.maximum(act, np.uint8(np.clip(zp, 0, 255)))

    def push_maxpool():
        nonlocal act
        layers.append(MaxPoolLayer(2, 2))
        win = np.lib.stride_tricks.sliding_window_view(act, (2, 2), axis=(1, 2))
        act = win[:, ::2, ::2].max(axis=(4, 5))

    if preset == "tiny":
        push_conv(4)
        push_conv(4)
        push_maxpool()
        push_conv(4)
        push_conv(4)
        push_maxpool()
        push_conv(8)
        push_conv(8)
        push_conv(10, relu_after=False, center_bias=True)
        layers.append(GlobalAvgPoolLayer())
        act = np.clip(round_half_away(
            act.astype(np.int64).sum(axis=(1, 2)) / (act.shape[1] * act.shape[2])
        ), 0, 255).astype(np.uint8)
        layers.append(ArgmaxLayer())
    else:
        push_conv(16)
        for _stage in range(3):
            block_in_idx = len(layers) - 1  # relu after the previous conv
            block_in_act, block_in_scale, block_in_zp = act, scale, zp
            push_conv(16)
            push_conv(16, relu_after=False)
            # realign both operands onto the conv output's grid
            real = (scale * (act.astype(np.float64) - zp)
                    + block_in_scale * (block_in_act.astype(np.float64) - block_in_zp))
            lo, hi = float(real.min()), float(real.max())
            span = max(hi - lo, 1e-6)
            add_scale = (hi - lo + 0.1 * span) / 255.0
            add_zp = int(np.clip(round_half_away(
                np.array(-(lo - 0.05 * span) / add_scale)), 0, 255))
            layers.append(AddLayer(block_in_idx, add_scale, add_zp))
            act = np.clip(round_half_away(real / add_scale) + add_zp, 0, 255).astype(np.uint8)
            scale, zp = add_scale, add_zp
            layers.append(ReluLayer())
            act = np.maximum(act, np.uint8(np.clip(zp, 0, 255)))
            if _stage < 2:
                push_maxpool()
        layers.append(GlobalAvgPoolLayer())
        act = np.clip(round_half_away(
            act.astype(np.int64).sum(axis=(1, 2)) / (act.shape[1] * act.shape[2])
        ), 0, 255).astype(np.uint8)
        layer, act = _gen_dense(rng, act.shape[1], 10, act, scale, zp, center_bias=True)
        layers.append(layer)
        layers.append(ArgmaxLayer())

    model = QModel((h, w, 3), input_scale, input_zp, layers)
    model.validate()

    from .inference import predict_classes
    labels = predict_classes(model, images)
    return model, Dataset(images, labels)
