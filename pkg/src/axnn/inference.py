"""Execute a quantized model graph under a placement plan."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from . import multipliers as mx
from .engine import KlmsRule, QTensor
from .modelio import (AddLayer, ArgmaxLayer, AvgPoolLayer, ConvLayer,
                      DenseLayer, GlobalAvgPoolLayer, MaxPoolLayer, QModel,
                      ReluLayer)
from .planning import (ApproxPlan, PlanError, build_palette_tables,
                       identity_plan, klms_rules_for, tune_weights)


@dataclass
class CompiledPlan:
    """A plan resolved against one model: table stack, per-mult-layer
    assignment arrays, skip rules, and optional tuned weight operands."""

    plan: ApproxPlan
    tables: list[mx.MultTable]
    table_stack: np.ndarray  # (n_tables, 256, 256) int64
    assignments: list[np.ndarray]
    klms: list[KlmsRule | None]
    tuned: list[np.ndarray | None]
    energies: np.ndarray  # per-table energy


def compile_plan(
    model: QModel,
    plan: ApproxPlan,
    tune: bool = False,
    energy_table: dict[str, float] | None = None,
    table_cache: dict[str, mx.MultTable] | None = None,
) -> CompiledPlan:
    mult_layers = model.mult_layer_indices()
    if len(plan.per_layer) != len(mult_layers):
        raise PlanError(
            f"plan covers {len(plan.per_layer)} layers but the model has "
            f"{len(mult_layers)} multiplicative layers"
        )
    tables = build_palette_tables(plan.palette, energy_table, table_cache)
    stack = np.stack([t.products.astype(np.int64) for t in tables])

    assignments = []
    for plan_li, li in enumerate(mult_layers):
        layer = model.layers[li]
        if isinstance(layer, ConvLayer):
            assignments.append(plan.assignment_array(plan_li, layer.shape))
        else:
            assignments.append(
                plan.dense_assignment_array(plan_li, *layer.weights.shape))

    klms = klms_rules_for(model, plan.klms_k)

    tuned: list[np.ndarray | None] = [None] * len(mult_layers)
    if tune:
        tuned_model = tune_weights(model, plan, tables)
        tuned = [tuned_model.layers[li].tuned_weights for li in mult_layers]

    return CompiledPlan(
        plan=plan,
        tables=tables,
        table_stack=stack,
        assignments=assignments,
        klms=klms,
        tuned=tuned,
        energies=np.array([t.energy for t in tables]),
    )


def run_model(model: QModel, images: np.ndarray, compiled: CompiledPlan
              ) -> tuple[QTensor, np.ndarray]:
    """Forward pass for a uint8 NHWC batch.

    Returns the final pre-argmax tensor (the logits) and the predicted
    classes.  Batch rows are independent; accumulation order inside one
    output element is fixed, so results are bit-reproducible.
    """
    if images.ndim != 4 or images.shape[1:] != model.input_shape:
        raise engine.ShapeError(
            f"images {images.shape} do not match model input {model.input_shape}"
        )
    x = QTensor(images, model.input_scale, model.input_zp)
    outputs: list[QTensor] = []
    mult_idx = 0
    classes = None
    for li, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            wt = QTensor(layer.weights, layer.w_scale, layer.w_zp)
            x = engine.conv2d_approx(
                x, wt, layer.bias, layer.shape,
                compiled.table_stack, compiled.assignments[mult_idx],
                layer.scale_out, layer.zp_out,
                klms=compiled.klms[mult_idx],
                tuned_weights=compiled.tuned[mult_idx],
            )
            mult_idx += 1
        elif isinstance(layer, DenseLayer):
            wt = QTensor(layer.weights, layer.w_scale, layer.w_zp)
            x = engine.dense_approx(
                x, wt, layer.bias,
                compiled.table_stack, compiled.assignments[mult_idx],
                layer.scale_out, layer.zp_out,
                klms=compiled.klms[mult_idx],
                tuned_weights=compiled.tuned[mult_idx],
            )
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
        elif isinstance(layer, ArgmaxLayer):
            classes = engine.argmax_class(x)
        else:
            raise engine.ShapeError(f"cannot execute layer kind {layer.kind!r}")
        outputs.append(x)
    if classes is None:
        classes = engine.argmax_class(x)
    return x, classes


def predict_classes(model: QModel, images: np.ndarray,
                    compiled: CompiledPlan | None = None) -> np.ndarray:
    if compiled is None:
        compiled = compile_plan(model, identity_plan(len(model.mult_layer_indices())))
    return run_model(model, images, compiled)[1]


def output_spatial_dims(model: QModel) -> list[tuple[int, int]]:
    """(Ho, Wo) per multiplicative layer, for multiplication counting."""
    h, w, _ = model.input_shape
    dims = []
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            if layer.padding == "same":
                h = -(-h // layer.stride)
                w = -(-w // layer.stride)
            else:
                h = (h - layer.shape.kernel_h) // layer.stride + 1
                w = (w - layer.shape.kernel_w) // layer.stride + 1
            dims.append((h, w))
        elif isinstance(layer, DenseLayer):
            dims.append((1, 1))
        elif isinstance(layer, (MaxPoolLayer, AvgPoolLayer)):
            h //= layer.stride
            w //= layer.stride
        elif isinstance(layer, GlobalAvgPoolLayer):
            h = w = 1
    return dims


def layer_energies(model: QModel, compiled: CompiledPlan) -> np.ndarray:
    """Energy of one inference, per multiplicative layer.

    Each performed multiplication contributes the energy of the table
    serving it; KLMS-skipped multiplications contribute nothing.  With a
    single multiplier per layer this reduces to count * multiplier
    energy.
    """
    dims = output_spatial_dims(model)
    energies = []
    for plan_li, li in enumerate(model.mult_layer_indices()):
        layer = model.layers[li]
        assign = compiled.assignments[plan_li]
        per_coord = compiled.energies[assign]
        rule = compiled.klms[plan_li]
        if rule is not None:
            keep = rule.keep_mask(layer.weights.astype(np.int64) - 128)
            per_coord = per_coord * keep
        ho, wo = dims[plan_li]
        energies.append(ho * wo * float(per_coord.sum()))
    return np.array(energies)


def count_layer_multiplications(model: QModel, compiled: CompiledPlan
                                ) -> np.ndarray:
    dims = output_spatial_dims(model)
    counts = []
    for plan_li, li in enumerate(model.mult_layer_indices()):
        layer = model.layers[li]
        ho, wo = dims[plan_li]
        rule = compiled.klms[plan_li]
        if rule is None:
            counts.append(ho * wo * layer.weights.size)
        else:
            kept = int(rule.keep_mask(layer.weights.astype(np.int64) - 128).sum())
            counts.append(ho * wo * kept)
    return np.array(counts)
