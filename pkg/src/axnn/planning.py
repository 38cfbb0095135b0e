"""Placement plans: which multiplier serves which multiplication.

Approaches: LLAM (one multiplier per layer), FLAM (contiguous filter
groups), KLAM (cyclic over channel / kernel row / kernel column), and
KLMS (exact multipliers, skip by weight statistics).  A KLMS width can
also be composed with any of the other approaches.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import multipliers as mx
from .engine import KlmsRule, LayerShape
from .modelio import ConvLayer, DenseLayer, QModel

APPROACHES = ("LLAM", "FLAM", "KLAM", "KLMS")
KLAM_FLAVORS = ("channel", "row", "column")


class PlanError(ValueError):
    """Malformed plan file or plan/model mismatch."""


@dataclass(frozen=True)
class LayerAssignment:
    """Per-layer multiplier placement.

    LLAM/KLMS use ``index``; FLAM uses ``group_count`` contiguous filter
    groups with one palette index each (remainder filters go to the last
    group); KLAM applies ``indices`` cyclically over the flavor axis.
    """

    index: int | None = None
    group_count: int | None = None
    indices: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ApproxPlan:
    approach: str
    palette: tuple[str, ...]  # multiplier ids
    per_layer: tuple[LayerAssignment, ...]
    flavor: str | None = None  # KLAM only
    klms_k: float | None = None

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise PlanError(f"unknown approach {self.approach!r}")
        if (self.flavor is not None) != (self.approach == "KLAM"):
            raise PlanError("flavor is required for KLAM and only for KLAM")
        if self.flavor is not None and self.flavor not in KLAM_FLAVORS:
            raise PlanError(f"unknown KLAM flavor {self.flavor!r}")
        if not self.palette:
            raise PlanError("palette must not be empty")
        if self.klms_k is not None and self.klms_k <= 0:
            raise PlanError("klms_k must be positive")
        for li, a in enumerate(self.per_layer):
            self._check_assignment(li, a)

    def _check_assignment(self, li: int, a: LayerAssignment):
        n_pal = len(self.palette)
        if self.approach in ("LLAM", "KLMS"):
            if a.index is None or a.group_count is not None or a.indices is not None:
                raise PlanError(f"layer {li}: {self.approach} wants a single index")
            if not (0 <= a.index < n_pal):
                raise PlanError(f"layer {li}: palette index {a.index} out of range")
        elif self.approach == "FLAM":
            if a.group_count is None or a.indices is None or a.index is not None:
                raise PlanError(f"layer {li}: FLAM wants group_count and indices")
            if a.group_count < 1 or len(a.indices) != a.group_count:
                raise PlanError(f"layer {li}: need exactly group_count indices")
            for idx in a.indices:
                if not (0 <= idx < n_pal):
                    raise PlanError(f"layer {li}: palette index {idx} out of range")
        else:  # KLAM
            if a.indices is None or a.index is not None or a.group_count is not None:
                raise PlanError(f"layer {li}: KLAM wants a cyclic index list")
            if not a.indices:
                raise PlanError(f"layer {li}: KLAM index list must be non-empty")
            for idx in a.indices:
                if not (0 <= idx < n_pal):
                    raise PlanError(f"layer {li}: palette index {idx} out of range")

    def resolve(self, layer: int, filt: int, channel: int, row: int, col: int) -> int:
        """Palette index serving one multiplication coordinate."""
        if not (0 <= layer < len(self.per_layer)):
            raise PlanError(f"layer index {layer} out of range")
        a = self.per_layer[layer]
        if self.approach in ("LLAM", "KLMS"):
            return a.index
        if self.approach == "FLAM":
            return a.indices[_flam_group(filt, a.group_count)]
        if self.flavor == "channel":
            return a.indices[channel % len(a.indices)]
        if self.flavor == "row":
            return a.indices[row % len(a.indices)]
        return a.indices[col % len(a.indices)]

    def assignment_array(self, layer: int, shape: LayerShape) -> np.ndarray:
        """Vectorized resolve for a whole conv layer: (N, kh, kw, M)."""
        a = self.per_layer[layer]
        n, m = shape.n_filters, shape.n_channels
        kh, kw = shape.kernel_h, shape.kernel_w
        out = np.empty((n, kh, kw, m), dtype=np.intp)
        if self.approach in ("LLAM", "KLMS"):
            out[:] = a.index
        elif self.approach == "FLAM":
            per_filter = np.array(
                [a.indices[_flam_group(f, a.group_count)] for f in range(n)],
                dtype=np.intp)
            out[:] = per_filter[:, None, None, None]
        else:
            cyc = np.array(a.indices, dtype=np.intp)
            if self.flavor == "channel":
                out[:] = cyc[np.arange(m) % len(cyc)][None, None, None, :]
            elif self.flavor == "row":
                out[:] = cyc[np.arange(kh) % len(cyc)][None, :, None, None]
            else:
                out[:] = cyc[np.arange(kw) % len(cyc)][None, None, :, None]
        return out

    def dense_assignment_array(self, layer: int, out_units: int, in_units: int
                               ) -> np.ndarray:
        """Dense layers go through the same rules with each output unit
        as a filter and each input unit as a channel (1x1 kernel)."""
        return self.assignment_array(
            layer, LayerShape(out_units, in_units, 1, 1)
        ).reshape(out_units, in_units)

    @property
    def plan_id(self) -> str:
        return "plan-" + hashlib.sha1(
            json.dumps(plan_to_json(self), sort_keys=True).encode()
        ).hexdigest()[:12]

    def is_identity(self) -> bool:
        if self.klms_k is not None:
            return False
        exact = [i for i, mid in enumerate(self.palette)
                 if mx.resolve_multiplier_id(mid).kind == "exact"]
        used = set()
        for a in self.per_layer:
            if a.index is not None:
                used.add(a.index)
            if a.indices is not None:
                used.update(a.indices)
        return used <= set(exact)


def _flam_group(filt: int, group_count: int) -> int:
    # Contiguous equal groups, remainder filters folded into the last one.
    return min(filt, group_count - 1) if group_count else 0


def identity_plan(n_layers: int) -> ApproxPlan:
    return ApproxPlan(
        approach="LLAM",
        palette=("exact",),
        per_layer=tuple(LayerAssignment(index=0) for _ in range(n_layers)),
    )


def uniform_llam_plan(mult_id: str, n_layers: int) -> ApproxPlan:
    return ApproxPlan(
        approach="LLAM",
        palette=(mult_id,),
        per_layer=tuple(LayerAssignment(index=0) for _ in range(n_layers)),
    )


# --- plan files ---


def _assignment_to_json(plan: ApproxPlan, a: LayerAssignment) -> dict:
    if plan.approach in ("LLAM", "KLMS"):
        return {"index": a.index}
    if plan.approach == "FLAM":
        return {"groups": a.group_count, "indices": list(a.indices)}
    return {"indices": list(a.indices)}


def plan_to_json(plan: ApproxPlan) -> dict:
    doc = {
        "approach": plan.approach,
        "palette": list(plan.palette),
        "layers": [_assignment_to_json(plan, a) for a in plan.per_layer],
        "klms_k": plan.klms_k,
    }
    if plan.flavor is not None:
        doc["flavor"] = plan.flavor
    return doc


def plan_from_json(doc: dict) -> ApproxPlan:
    if not isinstance(doc, dict):
        raise PlanError("plan must be a JSON object")
    allowed = {"approach", "flavor", "palette", "layers", "klms_k"}
    extra = doc.keys() - allowed
    if extra:
        raise PlanError(f"unknown plan field(s) {sorted(extra)}")
    for key in ("approach", "palette", "layers"):
        if key not in doc:
            raise PlanError(f"plan is missing field {key!r}")
    approach = doc["approach"]
    palette = tuple(doc["palette"])
    for mid in palette:
        mx.resolve_multiplier_id(mid)  # raises on a bad id
    per_layer = []
    for li, entry in enumerate(doc["layers"]):
        if not isinstance(entry, dict):
            raise PlanError(f"layer {li}: assignment must be an object")
        extra = entry.keys() - {"index", "groups", "indices"}
        if extra:
            raise PlanError(f"layer {li}: unknown field(s) {sorted(extra)}")
        per_layer.append(LayerAssignment(
            index=entry.get("index"),
            group_count=entry.get("groups"),
            indices=tuple(entry["indices"]) if "indices" in entry else None,
        ))
    try:
        return ApproxPlan(
            approach=approach,
            flavor=doc.get("flavor"),
            palette=palette,
            per_layer=tuple(per_layer),
            klms_k=doc.get("klms_k"),
        )
    except PlanError:
        raise
    except (TypeError, ValueError) as e:
        raise PlanError(str(e))


def parse_plan(path: str | Path) -> ApproxPlan:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise PlanError(f"{path}: not valid JSON ({e})")
    try:
        return plan_from_json(doc)
    except PlanError as e:
        raise PlanError(f"{path}: {e}")


def format_plan(plan: ApproxPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_json(plan), indent=1) + "\n")


# --- weight tuning ---


def tuned_value_map(table: mx.MultTable) -> np.ndarray:
    """For every stored weight w, the operand v minimizing
    sum_a |T(a, v) - a*w| over all 256 activations.

    Ties break to the candidate nearest the original weight, then to the
    smallest signed value.  Returned as a 256-entry uint8 lookup indexed
    by the quantized weight (w + 128).
    """
    a = np.arange(-128, 128, dtype=np.int64)
    t = table.products.astype(np.int64)  # (a, v)
    out = np.empty(256, dtype=np.uint8)
    for chunk in range(0, 256, 32):
        w = a[chunk:chunk + 32]
        aw = np.outer(a, w)  # (a, w)
        obj = np.abs(t[:, None, :] - aw[:, :, None]).sum(axis=0)  # (w, v)
        for i, wv in enumerate(w):
            row = obj[i]
            best = row.min()
            cand = np.flatnonzero(row == best) - 128
            pick = cand[np.lexsort((cand, np.abs(cand - wv)))][0]
            out[chunk + i] = np.uint8(pick + 128)
    return out


def tune_weights(model: QModel, plan: ApproxPlan,
                 tables: list[mx.MultTable]) -> QModel:
    """ALWANN-style weight update: per weight, substitute the operand
    that best matches exact products under its assigned table.

    The substitute only feeds the multiplier; original weights remain in
    the model for correction sums and KLMS statistics.
    """
    mult_layers = model.mult_layer_indices()
    if len(mult_layers) != len(plan.per_layer):
        raise PlanError(
            f"plan has {len(plan.per_layer)} layers, model has {len(mult_layers)}"
        )
    maps: dict[int, np.ndarray] = {}

    def value_map(idx: int) -> np.ndarray:
        if idx not in maps:
            maps[idx] = tuned_value_map(tables[idx])
        return maps[idx]

    new_layers = list(model.layers)
    for plan_li, li in enumerate(mult_layers):
        layer = model.layers[li]
        if isinstance(layer, ConvLayer):
            assign = plan.assignment_array(plan_li, layer.shape)
        else:
            assign = plan.dense_assignment_array(plan_li, *layer.weights.shape)
        w = layer.weights
        tuned = np.empty_like(w)
        for idx in np.unique(assign):
            mask = assign == idx
            tuned[mask] = value_map(int(idx))[w[mask]]
        new_layers[li] = replace(layer, tuned_weights=tuned)
    return replace(model, layers=new_layers)


def klms_rules_for(model: QModel, k: float | None) -> list[KlmsRule | None]:
    """Per-mult-layer skip rules from that layer's signed weight stats."""
    rules: list[KlmsRule | None] = []
    for li in model.mult_layer_indices():
        if k is None:
            rules.append(None)
        else:
            sw = model.layers[li].weights.astype(np.int64) - 128
            rules.append(KlmsRule.from_weights(sw, k))
    return rules


def build_palette_tables(
    palette: tuple[str, ...],
    energy_table: dict[str, float] | None = None,
    cache: dict[str, mx.MultTable] | None = None,
) -> list[mx.MultTable]:
    tables = []
    for mid in palette:
        if cache is not None and mid in cache:
            tables.append(cache[mid])
            continue
        t = mx.build_table(mx.resolve_multiplier_id(mid), energy_table)
        if cache is not None:
            cache[mid] = t
        tables.append(t)
    return tables
