"""Keras model -> axnn manifest conversion.

Pipeline: parse the layer graph, fold batch normalization into the
preceding convolution, calibrate per-tensor uint8 quantization grids on
a probe batch, emit the manifest, then verify parity between the
framework's (simulated) quantized inference and the engine running the
identity plan.

Only per-tensor affine quantization is supported; the inference engine
assumes one weight scale and zero point per layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from axnn import engine
from axnn.engine import QTensor
from axnn.inference import compile_plan
from axnn.modelio import (AddLayer, ArgmaxLayer, AvgPoolLayer, ConvLayer,
                          DenseLayer, GlobalAvgPoolLayer, MaxPoolLayer,
                          QModel, ReluLayer, save_model)
from axnn.planning import identity_plan


class ExportError(ValueError):
    pass


class UnsupportedOpsError(ExportError):
    """Raised once with the full list of offending layers."""

    def __init__(self, offenders: list[tuple[str, str, str]]):
        self.offenders = offenders
        lines = [f"  {name} ({cls}): {reason}" for name, cls, reason in offenders]
        super().__init__("unsupported operations:\n" + "\n".join(lines))


PER_CHANNEL_GUIDANCE = (
    "per-channel quantization is not supported: the inference engine uses "
    "one weight scale and zero point per layer; re-export with "
    "granularity='per-tensor'"
)


@dataclass
class LayerParity:
    index: int
    kind: str
    name: str
    max_delta_quanta: int


@dataclass
class ExportReport:
    probe_count: int
    top1_agreement: float
    max_logit_delta_quanta: int
    logit_quantum: float
    per_layer: list[LayerParity] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            "axnn-export parity report",
            f"probe images: {self.probe_count}",
            f"top-1 agreement: {self.top1_agreement:.4f}",
            f"max |delta logit|: {self.max_logit_delta_quanta} quanta "
            f"(quantum {self.logit_quantum:.6g})",
            "per-layer max |delta| (output quanta):",
        ]
        for p in self.per_layer:
            lines.append(f"  [{p.index:2d}] {p.kind:<14} {p.name:<24} "
                         f"{p.max_delta_quanta}")
        return "\n".join(lines) + "\n"


# --- graph parsing ---


@dataclass
class _Op:
    kind: str
    name: str
    parents: list[str]
    keras_layer: object = None
    params: dict = field(default_factory=dict)


def _histories(obj) -> list[str]:
    """Collect parent layer names from a Keras 3 inbound-node args tree."""
    out = []
    if isinstance(obj, dict):
        if "keras_history" in obj:
            out.append(obj["keras_history"][0])
        elif obj.get("class_name") == "__keras_tensor__":
            out.extend(_histories(obj.get("config", {})))
        else:
            for v in obj.values():
                out.extend(_histories(v))
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            out.extend(_histories(v))
    return out


def _topology(model) -> list[tuple[object, list[str]]]:
    """(layer, parent names) in config order, which is topological."""
    import keras

    if isinstance(model, keras.Sequential):
        pairs = []
        prev = None
        for layer in model.layers:
            pairs.append((layer, [] if prev is None else [prev]))
            prev = layer.name
        return pairs
    cfg = model.get_config()
    by_name = {layer.name: layer for layer in model.layers}
    pairs = []
    for entry in cfg["layers"]:
        name = entry["config"]["name"]
        parents = []
        for node in entry.get("inbound_nodes", []):
            parents.extend(_histories(node))
        # keep declaration order, drop duplicates
        seen = []
        for p in parents:
            if p not in seen:
                seen.append(p)
        if name in by_name:
            pairs.append((by_name[name], seen))
    return pairs


_POOLS = {"MaxPooling2D": "maxpool", "AveragePooling2D": "avgpool"}


def _parse_ops(model) -> tuple[tuple[int, int, int], list[_Op]]:
    """Lower the Keras graph to engine-shaped ops, folding batch norm."""
    offenders: list[tuple[str, str, str]] = []
    ops: list[_Op] = []
    alias: dict[str, str] = {}  # keras name -> op name producing its value
    input_shape = None
    # Sequential models do not expose their InputLayer in model.layers
    try:
        shape = tuple(int(d) for d in model.inputs[0].shape[1:])
        if len(shape) == 3:
            input_shape = shape
    except (AttributeError, IndexError, TypeError):
        pass

    def src(parents):
        return [alias[p] for p in parents]

    for layer, parents in _topology(model):
        cls = type(layer).__name__
        name = layer.name
        if cls == "InputLayer":
            shape = tuple(layer.batch_shape[1:])
            if len(shape) != 3:
                offenders.append((name, cls, "input must be rank-3 (H, W, C)"))
            else:
                input_shape = shape
            alias[name] = "__input__"
            continue
        if input_shape is None:
            raise ExportError("model has no image input layer")
        if cls == "Conv2D":
            sh, sw = layer.strides
            reason = None
            if sh != sw:
                reason = "non-square stride"
            if layer.groups != 1:
                reason = "grouped convolution"
            if layer.dilation_rate != (1, 1):
                reason = "dilated convolution"
            if layer.activation.__name__ not in ("linear", "relu"):
                reason = f"conv activation {layer.activation.__name__!r}"
            if reason:
                offenders.append((name, cls, reason))
                continue
            k = layer.get_weights()
            w = k[0].transpose(3, 0, 1, 2)  # (kh,kw,in,out) -> (out,kh,kw,in)
            b = k[1] if layer.use_bias else np.zeros(w.shape[0])
            ops.append(_Op("conv", name, src(parents), layer,
                           {"w": w.astype(np.float64),
                            "b": b.astype(np.float64),
                            "stride": int(sh), "padding": layer.padding}))
            alias[name] = name
            if layer.activation.__name__ == "relu":
                ops.append(_Op("relu", name + "/relu", [name]))
                alias[name] = name + "/relu"
        elif cls == "DepthwiseConv2D":
            offenders.append((name, cls, "depthwise convolution"))
        elif cls == "Dense":
            k = layer.get_weights()
            w = k[0].T  # (in,out) -> (out,in)
            b = k[1] if layer.use_bias else np.zeros(w.shape[0])
            act = layer.activation.__name__
            if act not in ("linear", "relu", "softmax"):
                offenders.append((name, cls, f"dense activation {act!r}"))
                continue
            ops.append(_Op("dense", name, src(parents), layer,
                           {"w": w.astype(np.float64), "b": b.astype(np.float64)}))
            alias[name] = name
            if act == "relu":
                ops.append(_Op("relu", name + "/relu", [name]))
                alias[name] = name + "/relu"
            elif act == "softmax":
                ops.append(_Op("softmax-argmax", name + "/softmax", [name]))
                alias[name] = name + "/softmax"
        elif cls == "BatchNormalization":
            # fold into the producing conv/dense in the real domain
            target = next((o for o in ops if o.name == alias[parents[0]]), None)
            if target is None or target.kind not in ("conv", "dense"):
                offenders.append((name, cls,
                                  "batch norm must directly follow conv/dense"))
                continue
            gamma, beta, mu, var = (x.astype(np.float64)
                                    for x in layer.get_weights())
            f = gamma / np.sqrt(var + layer.epsilon)
            shape = [-1] + [1] * (target.params["w"].ndim - 1)
            target.params["w"] = target.params["w"] * f.reshape(shape)
            target.params["b"] = (target.params["b"] - mu) * f + beta
            alias[name] = alias[parents[0]]
        elif cls == "ReLU":
            ops.append(_Op("relu", name, src(parents)))
            alias[name] = name
        elif cls == "Activation":
            act = layer.activation.__name__
            if act == "relu":
                ops.append(_Op("relu", name, src(parents)))
                alias[name] = name
            elif act == "softmax":
                ops.append(_Op("softmax-argmax", name, src(parents)))
                alias[name] = name
            else:
                offenders.append((name, cls, f"activation {act!r}"))
        elif cls == "Softmax":
            ops.append(_Op("softmax-argmax", name, src(parents)))
            alias[name] = name
        elif cls in _POOLS:
            ph, pw = layer.pool_size
            st = layer.strides[0]
            if ph != pw or layer.strides[0] != layer.strides[1]:
                offenders.append((name, cls, "non-square pooling"))
                continue
            if layer.padding != "valid":
                offenders.append((name, cls, "padded pooling"))
                continue
            ops.append(_Op(_POOLS[cls], name, src(parents),
                           params={"size": int(ph), "stride": int(st)}))
            alias[name] = name
        elif cls == "GlobalAveragePooling2D":
            ops.append(_Op("globalavgpool", name, src(parents)))
            alias[name] = name
        elif cls == "Flatten":
            if len(layer.input.shape) == 2:
                alias[name] = alias[parents[0]]  # no-op after global pooling
            else:
                offenders.append((name, cls, "flatten of a spatial tensor "
                                  "(use global pooling before dense)"))
        elif cls == "Add":
            ops.append(_Op("add", name, src(parents)))
            alias[name] = name
        elif cls == "Dropout":
            alias[name] = alias[parents[0]]  # identity at inference
        else:
            offenders.append((name, cls, "no engine equivalent"))
    if offenders:
        raise UnsupportedOpsError(offenders)
    return input_shape, ops


# --- quantization helpers ---


def _qgrid(lo: float, hi: float) -> tuple[float, int]:
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    scale = max((hi - lo) / 255.0, 1e-9)
    zp = int(np.clip(round(-lo / scale), 0, 255))
    return scale, zp


def _fake_quant(x: np.ndarray, scale: float, zp: int) -> np.ndarray:
    q = np.clip(np.round(x / scale) + zp, 0, 255)
    return scale * (q - zp)


def _float_conv(x, op):
    import tensorflow as tf

    w = op.params["w"].transpose(1, 2, 3, 0)  # back to (kh,kw,in,out)
    # float64 so the reference accumulates exactly, like the integer engine
    y = tf.nn.conv2d(x.astype(np.float64), w.astype(np.float64),
                     strides=op.params["stride"],
                     padding=op.params["padding"].upper())
    return y.numpy() + op.params["b"]


def _ref_op(op, a, b, grid):
    """One op of the framework-side quantized inference simulation.

    Real-valued input tensors; conv/dense use the dequantized
    (discretized) weights; every tensor that the engine requantizes is
    snapped to the engine's grid for this op, with the framework's
    native round-to-nearest-even.
    """
    if op.kind == "conv":
        return _fake_quant(_float_conv(a, op), *grid)
    if op.kind == "dense":
        return _fake_quant(a @ op.params["w"].T + op.params["b"], *grid)
    if op.kind == "relu":
        return np.maximum(a, 0.0)
    if op.kind in ("maxpool", "avgpool"):
        import tensorflow as tf

        fn = tf.nn.max_pool2d if op.kind == "maxpool" else tf.nn.avg_pool2d
        y = fn(a.astype(np.float32), op.params["size"],
               op.params["stride"], "VALID").numpy().astype(np.float64)
        return _fake_quant(y, *grid) if op.kind == "avgpool" else y
    if op.kind == "globalavgpool":
        return _fake_quant(a.mean(axis=(1, 2)), *grid)
    if op.kind == "add":
        return _fake_quant(a + b, *grid)
    return a  # softmax-argmax: logits pass through


def _run_reference(ops, images_real, snap_grids):
    """Chained framework-side quantized inference over the whole graph."""
    values = {"__input__": images_real}
    prev = "__input__"
    for i, op in enumerate(ops):
        a = values[op.parents[0]] if op.parents else values[prev]
        b = values[op.parents[1]] if len(op.parents) > 1 else None
        values[op.name] = _ref_op(op, a, b, snap_grids[i])
        prev = op.name
    return values


def _float_forward(ops, images: np.ndarray) -> dict[str, np.ndarray]:
    """Float forward pass of the lowered, BN-folded op list."""
    values = {"__input__": np.asarray(images, dtype=np.float64)}
    prev = "__input__"
    for op in ops:
        a = values[op.parents[0]] if op.parents else values[prev]
        if op.kind == "conv":
            y = _float_conv(a, op)
        elif op.kind == "dense":
            y = a @ op.params["w"].T + op.params["b"]
        elif op.kind == "relu":
            y = np.maximum(a, 0.0)
        elif op.kind in ("maxpool", "avgpool"):
            import tensorflow as tf

            fn = tf.nn.max_pool2d if op.kind == "maxpool" else tf.nn.avg_pool2d
            y = fn(a.astype(np.float32), op.params["size"],
                   op.params["stride"], "VALID").numpy().astype(np.float64)
        elif op.kind == "globalavgpool":
            y = a.mean(axis=(1, 2))
        elif op.kind == "add":
            y = a + values[op.parents[1]]
        else:
            y = a
        values[op.name] = y
        prev = op.name
    return values


def folded_float_logits(model, images: np.ndarray) -> np.ndarray:
    """Oracle hook: batch-norm folding is exact algebra, so this must
    match the framework's own float inference to numerical noise."""
    _, ops = _parse_ops(model)
    values = _float_forward(ops, images)
    last = next(op for op in reversed(ops) if op.kind != "softmax-argmax")
    return values[last.name]


# --- the converter ---


def export(model, probe_images: np.ndarray, out_manifest=None,
           report_path=None, granularity: str = "per-tensor"
           ) -> tuple[QModel, ExportReport]:
    """Convert a Keras model (instance or saved path) to a QModel.

    probe_images: float array in the model's input domain, NHWC, used
    for activation calibration and the parity report.  Returns the
    in-memory model and the report; writes them when paths are given.
    """
    if granularity != "per-tensor":
        raise ExportError(PER_CHANNEL_GUIDANCE)
    if isinstance(model, (str, Path)):
        import keras

        model = keras.models.load_model(model, compile=False)
    probe_images = np.asarray(probe_images, dtype=np.float64)
    if probe_images.ndim != 4:
        raise ExportError("probe images must be a NHWC batch")

    input_shape, ops = _parse_ops(model)
    if probe_images.shape[1:] != input_shape:
        raise ExportError(
            f"probe images {probe_images.shape[1:]} do not match model "
            f"input {input_shape}")

    # pass 1: float forward on the probe batch to calibrate output grids
    in_scale, in_zp = _qgrid(float(probe_images.min()), float(probe_images.max()))
    x_real = _fake_quant(probe_images, in_scale, in_zp)
    values = _float_forward(ops, x_real)

    out_grids = {}
    for i, op in enumerate(ops):
        y = values[op.name]
        out_grids[i] = _qgrid(float(y.min()), float(y.max()))

    # pass 2: build engine layers with quantized parameters
    layers = []
    op_to_layer = {}  # op name -> index into layers
    scale, zp = in_scale, in_zp
    grids = {"__input__": (in_scale, in_zp)}
    for i, op in enumerate(ops):
        in_grid = grids[op.parents[0]] if op.parents else (scale, zp)
        if op.kind in ("conv", "dense"):
            w = op.params["w"]
            w_scale, w_zp = _qgrid(float(w.min()), float(w.max()))
            w_q = np.clip(np.round(w / w_scale) + w_zp, 0, 255).astype(np.uint8)
            bias_q = np.round(op.params["b"] / (in_grid[0] * w_scale)
                              ).astype(np.int32)
            # the parity reference must share the engine's discretized
            # parameters, so write the dequantized values back
            op.params["w"] = w_scale * (w_q.astype(np.float64) - w_zp)
            op.params["b"] = bias_q.astype(np.float64) * (in_grid[0] * w_scale)
            so, zo = out_grids[i]
            if op.kind == "conv":
                layers.append(ConvLayer(
                    w_q, bias_q, op.params["stride"], op.params["padding"],
                    in_grid[0], in_grid[1], w_scale, w_zp, so, zo))
            else:
                layers.append(DenseLayer(
                    w_q, bias_q, in_grid[0], in_grid[1], w_scale, w_zp, so, zo))
            grids[op.name] = (so, zo)
        elif op.kind == "relu":
            layers.append(ReluLayer())
            grids[op.name] = in_grid
        elif op.kind == "maxpool":
            layers.append(MaxPoolLayer(op.params["size"], op.params["stride"]))
            grids[op.name] = in_grid
        elif op.kind == "avgpool":
            layers.append(AvgPoolLayer(op.params["size"], op.params["stride"]))
            grids[op.name] = in_grid
        elif op.kind == "globalavgpool":
            layers.append(GlobalAvgPoolLayer())
            grids[op.name] = in_grid
        elif op.kind == "add":
            so, zo = out_grids[i]
            layers.append(AddLayer(op_to_layer[op.parents[1]], so, zo))
            grids[op.name] = (so, zo)
        else:
            layers.append(ArgmaxLayer())
            grids[op.name] = in_grid
        op_to_layer[op.name] = len(layers) - 1

    qmodel = QModel(input_shape, in_scale, in_zp, layers)
    qmodel.validate()

    snap_grids = [grids[op.name] for op in ops]
    report = _parity_report(qmodel, ops, probe_images, snap_grids)
    if out_manifest is not None:
        save_model(qmodel, out_manifest)
    if report_path is not None:
        Path(report_path).write_text(report.to_text())
    return qmodel, report


def _run_engine_layers(qmodel: QModel, images_q: np.ndarray):
    """Engine identity-plan forward pass, keeping every activation."""
    compiled = compile_plan(qmodel, identity_plan(len(qmodel.mult_layer_indices())))
    x = QTensor(images_q, qmodel.input_scale, qmodel.input_zp)
    acts = []
    mult_idx = 0
    outputs = []
    for layer in qmodel.layers:
        if isinstance(layer, ConvLayer):
            x = engine.conv2d_approx(
                x, QTensor(layer.weights, layer.w_scale, layer.w_zp),
                layer.bias, layer.shape, compiled.table_stack,
                compiled.assignments[mult_idx], layer.scale_out, layer.zp_out)
            mult_idx += 1
        elif isinstance(layer, DenseLayer):
            x = engine.dense_approx(
                x, QTensor(layer.weights, layer.w_scale, layer.w_zp),
                layer.bias, compiled.table_stack,
                compiled.assignments[mult_idx], layer.scale_out, layer.zp_out)
            mult_idx += 1
        elif isinstance(layer, ReluLayer):
            x = engine.relu(x)
        elif isinstance(layer, MaxPoolLayer):
            x = engine.maxpool(x, layer.size, layer.stride)
        elif isinstance(layer, AvgPoolLayer):
            x = engine.avgpool(x, layer.size, layer.stride)
        elif isinstance(layer, GlobalAvgPoolLayer):
            x = engine.global_avgpool(x)
        elif isinstance(layer, AddLayer):
            x = engine.residual_add(x, outputs[layer.shortcut_from],
                                    layer.scale_out, layer.zp_out)
        outputs.append(x)
        acts.append(x)
    return acts


def _parity_report(qmodel: QModel, ops, probe_images, snap_grids) -> ExportReport:
    in_scale, in_zp = qmodel.input_scale, qmodel.input_zp
    images_q = np.clip(np.round(probe_images / in_scale) + in_zp,
                       0, 255).astype(np.uint8)
    x_real = in_scale * (images_q.astype(np.float64) - in_zp)
    ref = _run_reference(ops, x_real, snap_grids)
    acts = _run_engine_layers(qmodel, images_q)
    # dequantized engine activations, used to teacher-force the per-layer
    # parity: each op is recomputed from the engine's own inputs, so the
    # per-layer delta isolates that one op's rounding behaviour
    engine_real = {"__input__": x_real}
    for i, op in enumerate(ops):
        t = acts[i]
        engine_real[op.name] = t.scale * (t.data.astype(np.float64)
                                          - t.zero_point)

    per_layer = []
    logits_idx = None
    prev = "__input__"
    for i, op in enumerate(ops):
        t = acts[i]
        if op.kind == "softmax-argmax":
            prev = op.name
            continue
        a = engine_real[op.parents[0]] if op.parents else engine_real[prev]
        b = engine_real[op.parents[1]] if len(op.parents) > 1 else None
        want = np.asarray(_ref_op(op, a, b, snap_grids[i]))
        got_q = t.data.astype(np.int64)
        want_q = np.clip(np.round(want / t.scale) + t.zero_point,
                         0, 255).astype(np.int64)
        delta = int(np.abs(got_q - want_q).max())
        per_layer.append(LayerParity(i, op.kind, op.name, delta))
        logits_idx = i
        prev = op.name

    logit_t = acts[logits_idx]
    ref_logits = np.asarray(ref[ops[logits_idx].name])
    ref_logits = ref_logits.reshape(ref_logits.shape[0], -1)
    got_logits = logit_t.scale * (
        logit_t.data.reshape(len(images_q), -1).astype(np.float64)
        - logit_t.zero_point)
    quantum = logit_t.scale
    # both sides live on the same grid, so the gap is a whole number of quanta
    max_delta = int(round(float(np.abs(got_logits - ref_logits).max()) / quantum))
    agreement = float((got_logits.argmax(1) == ref_logits.argmax(1)).mean())
    return ExportReport(
        probe_count=len(images_q),
        top1_agreement=agreement,
        max_logit_delta_quanta=max_delta,
        logit_quantum=quantum,
        per_layer=per_layer,
    )
