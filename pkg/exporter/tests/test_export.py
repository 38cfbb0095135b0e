import numpy as np
import pytest

keras = pytest.importorskip("keras")
from keras import layers  # noqa: E402

from axnn.inference import compile_plan, run_model
from axnn.modelio import load_model
from axnn.planning import identity_plan
from axnn_export import (ExportError, UnsupportedOpsError, export)
from axnn_export.cli import main as cli_main
from axnn_export.export import PER_CHANNEL_GUIDANCE, folded_float_logits

RNG = np.random.default_rng(42)


@pytest.fixture(autouse=True)
def _seed():
    keras.utils.set_random_seed(42)


def probe(n, h=8, w=8, c=3):
    return np.random.default_rng(7).uniform(0.0, 1.0, size=(n, h, w, c))


def one_conv_model():
    inp = keras.Input((8, 8, 3))
    out = layers.Conv2D(5, 3, padding="same", activation="relu")(inp)
    return keras.Model(inp, out)


def conv_bn_model():
    inp = keras.Input((8, 8, 3))
    x = layers.Conv2D(6, 3, padding="same")(inp)
    x = layers.BatchNormalization()(x)
    x = layers.ReLU()(x)
    x = layers.GlobalAveragePooling2D()(x)
    out = layers.Dense(4)(x)
    m = keras.Model(inp, out)
    # give BN non-trivial statistics so folding actually changes weights
    bn = m.layers[2]
    bn.set_weights([
        np.linspace(0.5, 1.5, 6), np.linspace(-0.3, 0.3, 6),
        np.linspace(-0.2, 0.2, 6), np.linspace(0.5, 2.0, 6),
    ])
    return m


def resnet_model():
    inp = keras.Input((16, 16, 3))
    x = layers.Conv2D(8, 3, padding="same")(inp)
    x = layers.BatchNormalization()(x)
    x = layers.ReLU()(x)
    for _ in range(3):
        skip = x
        x = layers.Conv2D(8, 3, padding="same")(x)
        x = layers.BatchNormalization()(x)
        x = layers.ReLU()(x)
        x = layers.Conv2D(8, 3, padding="same")(x)
        x = layers.Add()([x, skip])
        x = layers.ReLU()(x)
    x = layers.MaxPooling2D(2)(x)
    x = layers.GlobalAveragePooling2D()(x)
    x = layers.Dense(10, activation="softmax")(x)
    return keras.Model(inp, x)


@pytest.fixture(scope="module")
def trained_resnet():
    """Residual toy net overfit to random labels so the logit margins are
    wide, like a trained classifier's; untrained nets sit near argmax ties
    where quantization noise flips the prediction."""
    keras.utils.set_random_seed(42)
    m = resnet_model()
    imgs = probe(100, 16, 16)
    labels = np.random.default_rng(11).integers(0, 10, size=100)
    m.compile(optimizer="adam", loss="sparse_categorical_crossentropy")
    m.fit(imgs, labels, epochs=200, batch_size=32, verbose=0)
    return m, imgs


def test_one_conv_toy_round_trips(tmp_path):
    qm, rep = export(one_conv_model(), probe(16),
                     out_manifest=tmp_path / "m.json")
    assert rep.top1_agreement == 1.0
    back = load_model(tmp_path / "m.json")  # validates schema + digest
    assert back.input_shape == (8, 8, 3)
    assert [l.kind for l in back.layers] == ["conv", "relu"]


def test_bn_folding_within_one_quantum():
    m = conv_bn_model()
    imgs = probe(32)
    # folding itself is exact algebra: folded float logits == framework
    # float logits to numerical noise, far below one quantization step
    folded = folded_float_logits(m, imgs)
    framework = m.predict(imgs, verbose=0).astype(np.float64)
    _, rep = export(m, imgs)
    assert np.abs(folded - framework).max() <= rep.logit_quantum
    # per layer, engine and framework round the same values the same
    # way up to half-even vs half-away ties
    assert all(p.max_delta_quanta <= 1 for p in rep.per_layer)
    assert rep.top1_agreement == 1.0


def test_parity_report_layers(tmp_path):
    _, rep = export(conv_bn_model(), probe(16),
                    report_path=tmp_path / "rep.txt")
    kinds = [p.kind for p in rep.per_layer]
    assert kinds == ["conv", "relu", "globalavgpool", "dense"]
    assert all(p.max_delta_quanta <= 1 for p in rep.per_layer)
    text = (tmp_path / "rep.txt").read_text()
    assert "top-1 agreement" in text and "dense" in text


def test_resnet_like_export_agreement(trained_resnet):
    m, imgs = trained_resnet
    qm, rep = export(m, imgs)
    assert rep.probe_count == 100
    assert rep.top1_agreement >= 0.99
    assert all(p.max_delta_quanta <= 1 for p in rep.per_layer)
    assert len(qm.mult_layer_indices()) == 8  # 7 convs + dense head
    adds = [l for l in qm.layers if l.kind == "add"]
    assert len(adds) == 3
    assert qm.layers[-1].kind == "softmax-argmax"


def test_engine_runs_exported_manifest(trained_resnet, tmp_path):
    m, imgs = trained_resnet
    qm, rep = export(m, imgs, out_manifest=tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    images_q = np.clip(np.round(imgs / back.input_scale) + back.input_zp,
                       0, 255).astype(np.uint8)
    compiled = compile_plan(back, identity_plan(len(back.mult_layer_indices())))
    _, classes = run_model(back, images_q, compiled)
    ref = m.predict(imgs, verbose=0).argmax(1)
    assert (classes == ref).mean() >= 0.95  # quantization noise only


def test_depthwise_rejected_by_name():
    inp = keras.Input((8, 8, 3))
    x = layers.DepthwiseConv2D(3, padding="same", name="dwise")(inp)
    m = keras.Model(inp, x)
    with pytest.raises(UnsupportedOpsError) as exc:
        export(m, probe(4))
    assert "dwise" in str(exc.value)
    assert "depthwise" in str(exc.value)


def test_unsupported_ops_all_listed():
    inp = keras.Input((8, 8, 3))
    x = layers.Conv2D(4, 3, padding="same")(inp)
    x = layers.Flatten(name="flat")(x)
    x = layers.Dense(4, activation="tanh", name="head")(x)
    m = keras.Model(inp, x)
    with pytest.raises(UnsupportedOpsError) as exc:
        export(m, probe(4))
    msg = str(exc.value)
    assert "flat" in msg and "head" in msg


def test_per_channel_rejected_with_guidance():
    with pytest.raises(ExportError, match="per-tensor"):
        export(one_conv_model(), probe(4), granularity="per-channel")
    assert "one weight scale" in PER_CHANNEL_GUIDANCE


def test_probe_shape_mismatch():
    with pytest.raises(ExportError, match="probe"):
        export(one_conv_model(), probe(4, 16, 16))


def test_sequential_models_supported():
    m = keras.Sequential([
        keras.Input((8, 8, 3)),
        layers.Conv2D(4, 3, padding="same", activation="relu"),
        layers.GlobalAveragePooling2D(),
        layers.Dense(3),
    ])
    qm, rep = export(m, probe(8))
    assert [l.kind for l in qm.layers] == ["conv", "relu", "globalavgpool",
                                           "dense"]


def test_cli_end_to_end(trained_resnet, tmp_path):
    model_path = tmp_path / "model.keras"
    m, imgs = trained_resnet
    m.save(model_path)
    np.savez(tmp_path / "probe.npz", images=imgs)
    code = cli_main(["--model", str(model_path),
                     "--probe", str(tmp_path / "probe.npz"),
                     "--out", str(tmp_path / "m.json"),
                     "--report", str(tmp_path / "rep.txt")])
    assert code == 0
    assert load_model(tmp_path / "m.json").layers
    assert "top-1 agreement" in (tmp_path / "rep.txt").read_text()


def test_cli_unsupported_exits_3(tmp_path):
    model_path = tmp_path / "model.keras"
    inp = keras.Input((8, 8, 3))
    m = keras.Model(inp, layers.DepthwiseConv2D(3)(inp))
    m.save(model_path)
    np.savez(tmp_path / "probe.npz", images=probe(4))
    code = cli_main(["--model", str(model_path),
                     "--probe", str(tmp_path / "probe.npz"),
                     "--out", str(tmp_path / "m.json"),
                     "--report", str(tmp_path / "rep.txt")])
    assert code == 3
