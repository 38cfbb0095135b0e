import numpy as np
import pytest

from axnn import multipliers as mx
from axnn import planning
from axnn.engine import LayerShape
from axnn.planning import (ApproxPlan, LayerAssignment, PlanError,
                           identity_plan, plan_from_json, plan_to_json,
                           tune_weights, tuned_value_map, uniform_llam_plan)

PALETTE3 = ("exact", "roup:P=0,R=4", "roup:P=0,R=5")


def llam(*idx):
    return ApproxPlan("LLAM", PALETTE3,
                      tuple(LayerAssignment(index=i) for i in idx))


# --- resolve semantics ---


def test_llam_resolve_is_uniform_per_layer():
    plan = llam(0, 2)
    for f, c, r, col in [(0, 0, 0, 0), (3, 1, 2, 2)]:
        assert plan.resolve(0, f, c, r, col) == 0
        assert plan.resolve(1, f, c, r, col) == 2


def test_flam_contiguous_groups_with_remainder_in_last():
    plan = ApproxPlan("FLAM", PALETTE3,
                      (LayerAssignment(group_count=3, indices=(2, 1, 1)),))
    got = [plan.resolve(0, f, 0, 0, 0) for f in range(8)]
    # 8 filters, 3 groups: filters 0,1 -> group boundaries at 0,1, rest last
    assert got == [2, 1, 1, 1, 1, 1, 1, 1]
    arr = plan.assignment_array(0, LayerShape(8, 3, 3, 3))
    assert arr.shape == (8, 3, 3, 3)
    assert np.array_equal(arr[:, 0, 0, 0], got)


def test_klam_row_cycles_over_kernel_rows():
    plan = ApproxPlan("KLAM", PALETTE3, (LayerAssignment(indices=(0, 1)),),
                      flavor="row")
    got = [[plan.resolve(0, 0, 0, r, c) for c in range(3)] for r in range(3)]
    assert got == [[0, 0, 0], [1, 1, 1], [0, 0, 0]]


def test_klam_channel_and_column_flavors():
    chan = ApproxPlan("KLAM", PALETTE3, (LayerAssignment(indices=(0, 1, 2)),),
                      flavor="channel")
    arr = chan.assignment_array(0, LayerShape(2, 5, 3, 3))
    assert arr[0, 0, 0].tolist() == [0, 1, 2, 0, 1]
    col = ApproxPlan("KLAM", PALETTE3, (LayerAssignment(indices=(1, 2)),),
                     flavor="column")
    arr = col.assignment_array(0, LayerShape(2, 3, 1, 4))
    assert arr[0, 0, :, 0].tolist() == [1, 2, 1, 2]


def test_dense_assignment_treats_units_as_filters_and_channels():
    plan = ApproxPlan("KLAM", PALETTE3, (LayerAssignment(indices=(0, 1)),),
                      flavor="channel")
    arr = plan.dense_assignment_array(0, 3, 5)
    assert arr.shape == (3, 5)
    assert arr[0].tolist() == [0, 1, 0, 1, 0]


def test_identity_and_uniform_plans():
    ident = identity_plan(4)
    assert ident.is_identity()
    uni = uniform_llam_plan("roup:P=0,R=4", 4)
    assert not uni.is_identity()
    assert all(a.index == 0 for a in uni.per_layer)


def test_klms_plan_is_never_identity():
    plan = ApproxPlan("KLMS", ("exact",), (LayerAssignment(index=0),),
                      klms_k=2.0)
    assert not plan.is_identity()


# --- validation ---


@pytest.mark.parametrize("kwargs", [
    dict(approach="XXX", palette=("exact",), per_layer=()),
    dict(approach="LLAM", palette=(), per_layer=()),
    dict(approach="LLAM", palette=("exact",),
         per_layer=(LayerAssignment(index=1),)),  # palette index out of range
    dict(approach="LLAM", palette=("exact",),
         per_layer=(LayerAssignment(indices=(0,)),)),  # wrong shape for LLAM
    dict(approach="FLAM", palette=("exact",),
         per_layer=(LayerAssignment(group_count=2, indices=(0,)),)),
    dict(approach="KLAM", palette=("exact",),
         per_layer=(LayerAssignment(indices=()),), flavor="row"),
    dict(approach="KLAM", palette=("exact",),
         per_layer=(LayerAssignment(indices=(0,)),), flavor="diagonal"),
    dict(approach="LLAM", palette=("exact",),
         per_layer=(LayerAssignment(index=0),), flavor="row"),  # flavor w/o KLAM
    dict(approach="LLAM", palette=("exact",),
         per_layer=(LayerAssignment(index=0),), klms_k=-1.0),
])
def test_invalid_plans_rejected(kwargs):
    with pytest.raises(PlanError):
        ApproxPlan(**kwargs)


# --- JSON round trip ---


@pytest.mark.parametrize("plan", [
    llam(0, 1, 2),
    ApproxPlan("FLAM", PALETTE3,
               (LayerAssignment(group_count=2, indices=(0, 2)),)),
    ApproxPlan("KLAM", PALETTE3, (LayerAssignment(indices=(1, 2)),),
               flavor="column"),
    ApproxPlan("KLMS", ("exact",), (LayerAssignment(index=0),), klms_k=1.5),
])
def test_plan_json_roundtrip(plan):
    back = plan_from_json(plan_to_json(plan))
    assert back == plan
    assert back.plan_id == plan.plan_id


def test_plan_id_depends_on_content():
    assert llam(0, 1).plan_id != llam(1, 0).plan_id
    assert llam(0, 1).plan_id.startswith("plan-")


@pytest.mark.parametrize("doc", [
    [],
    {"approach": "LLAM"},
    {"approach": "LLAM", "palette": ["exact"], "layers": [{"index": 0}],
     "surprise": 1},
    {"approach": "LLAM", "palette": ["nope"], "layers": [{"index": 0}]},
    {"approach": "LLAM", "palette": ["exact"], "layers": [{"idx": 0}]},
])
def test_bad_plan_docs_rejected(doc):
    with pytest.raises((PlanError, mx.MultiplierError)):
        plan_from_json(doc)


def test_parse_plan_file_errors(tmp_path):
    bad = tmp_path / "p.json"
    bad.write_text("{not json")
    with pytest.raises(PlanError, match="not valid JSON"):
        planning.parse_plan(bad)


# --- weight tuning ---


def test_tuning_under_exact_table_is_identity():
    table = mx.build_table(mx.MultiplierSpec.exact())
    vmap = tuned_value_map(table)
    assert np.array_equal(vmap, np.arange(256, dtype=np.uint8))


def test_tuned_values_are_optimal_brute_force():
    table = mx.build_table(mx.ROUP_H)
    vmap = tuned_value_map(table)
    a = np.arange(-128, 128, dtype=np.int64)
    t = table.products.astype(np.int64)
    rng = np.random.default_rng(4)
    for wq in rng.integers(0, 256, size=24):
        w = int(wq) - 128
        obj = np.abs(t - np.outer(a, np.full(256, w))).sum(axis=0)  # per v
        best = obj.min()
        got = int(vmap[wq]) - 128
        assert obj[got + 128] == best
        # tie-break: nearest to w, then smallest signed value
        cand = np.flatnonzero(obj == best) - 128
        expect = sorted(cand, key=lambda v: (abs(v - w), v))[0]
        assert got == expect


def test_tune_weights_only_touches_lookup_operands(tiny_fixture):
    model, _ = tiny_fixture
    n = len(model.mult_layer_indices())
    plan = uniform_llam_plan("roup:P=1,R=4", n)
    tables = planning.build_palette_tables(plan.palette)
    tuned = tune_weights(model, plan, tables)
    for li in model.mult_layer_indices():
        orig = model.layers[li]
        new = tuned.layers[li]
        assert np.array_equal(orig.weights, new.weights)  # untouched
        assert new.tuned_weights is not None
        assert new.tuned_weights.shape == orig.weights.shape
    assert all(model.layers[li].tuned_weights is None
               for li in model.mult_layer_indices())


def test_tune_weights_layer_count_mismatch(tiny_fixture):
    model, _ = tiny_fixture
    plan = uniform_llam_plan("exact", 3)
    with pytest.raises(PlanError):
        tune_weights(model, plan, planning.build_palette_tables(plan.palette))


def test_build_palette_tables_caches():
    cache = {}
    t1 = planning.build_palette_tables(("exact", "exact"), cache=cache)
    assert t1[0] is t1[1]
    t2 = planning.build_palette_tables(("exact",), cache=cache)
    assert t2[0] is t1[0]
