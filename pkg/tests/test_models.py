import struct

import numpy as np
import pytest

from tumorscope import models as m
from tumorscope.tensorcore import RngState


def pool_inputs_and_outputs(model):
    """Spatial sizes seen just before and after every max-pool layer."""
    chain = [model.shapes[0][0]]
    for i, layer in enumerate(model.layers):
        if layer.kind == "maxpool":
            chain.append(model.shapes[i + 1][0])
    return chain


def test_cnn3_shape_chain_at_full_resolution():
    model = m.build_cnn3((270, 270, 1), 3)
    assert pool_inputs_and_outputs(model) == [270, 135, 67, 33]
    flat = next(model.shapes[i + 1] for i, layer in enumerate(model.layers) if layer.kind == "flatten")
    assert flat == (33 * 33 * 64,) == (69_696,)
    assert [layer.hyper["filters"] for layer in model.layers if layer.kind == "conv"] == [16, 32, 64]
    assert model.output_shape == (3,)


def test_cnn3_layer_order_and_regularisation():
    model = m.build_cnn3((64, 64, 1), 3)
    kinds = [layer.kind for layer in model.layers]
    assert kinds == ["conv", "relu", "maxpool", "dropout", "batchnorm",
                     "conv", "relu", "maxpool", "conv", "relu", "maxpool", "flatten",
                     "dense", "batchnorm", "relu", "dense", "batchnorm", "relu", "dense"]
    assert [layer.hyper["l2"] for layer in model.layers if layer.kind == "conv"] == [0.0, 1e-4, 1e-4]
    assert model.layers[3].hyper["rate"] == 0.5
    assert [layer.hyper["units"] for layer in model.layers if layer.kind == "dense"] == [16, 16, 3]


def test_unet_shape_chain_and_widths():
    model = m.build_unet_classifier((270, 270, 1), 3)
    assert pool_inputs_and_outputs(model) == [270, 135, 67, 33, 16]
    gap_idx = next(i for i, layer in enumerate(model.layers) if layer.kind == "gap")
    assert model.shapes[gap_idx] == (16, 16, 1024)
    assert model.shapes[gap_idx + 1] == (1024,)
    filters = [layer.hyper["filters"] for layer in model.layers if layer.kind == "conv"]
    assert filters == [64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024]
    assert not any(layer.kind == "flatten" for layer in model.layers)


def test_unet_parameter_count_matches_tally():
    model = m.build_unet_classifier((64, 64, 1), 3, base_filters=8)
    cin, total = 1, 0
    for f in (8, 8, 16, 16, 32, 32, 64, 64, 128, 128):
        total += 9 * cin * f + f
        cin = f
    total += 128 * 3 + 3
    assert model.parameter_count() == total
    full = m.build_unet_classifier((270, 270, 1), 3)
    cin, expect = 1, 0
    for f in (64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024):
        expect += (9 * cin + 1) * f
        cin = f
    assert full.parameter_count() == expect + 1024 * 3 + 3


@pytest.mark.parametrize("builder", ["cnn3", "unet", "tl"])
def test_softmax_rows_sum_to_one(builder):
    rng = RngState(3)
    if builder == "cnn3":
        model = m.build_cnn3((32, 32, 1), 3, rng)
    elif builder == "unet":
        model = m.build_unet_classifier((32, 32, 1), 3, rng, base_filters=4)
    else:
        model = m.build_tl_head(m.make_toy_backbone((32, 32, 1), rng), 3)
    x = np.random.default_rng(0).uniform(0, 1, (5, 32, 32, 1)).astype(np.float32)
    probs = m.forward(model, x)
    assert probs.shape == (5, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
    assert m.forward(model, x).tobytes() == probs.tobytes()


def test_train_mode_forward_needs_rng():
    model = m.build_cnn3((16, 16, 1), 3)
    with pytest.raises(m.ModelError):
        m.forward(model, np.zeros((2, 16, 16, 1), np.float32), "train")


def test_forward_shape_mismatch_names_layer():
    model = m.build_cnn3((16, 16, 1), 3)
    with pytest.raises(m.ModelError, match="layer 0"):
        m.forward(model, np.zeros((2, 17, 16, 1), np.float32))


def test_validation_rejects_bad_stacks():
    with pytest.raises(m.ModelError):
        m.assemble("x", (8, 8, 1), [m.conv(4), m.dense(3, softmax=True)], 3, RngState(0))
    with pytest.raises(m.ModelError):
        m.assemble("x", (8, 8, 1), [m.flatten(), m.dense(2, softmax=True)], 3, RngState(0))
    with pytest.raises(m.ModelError):
        m.assemble("x", (8, 8, 1), [m.flatten(), m.dense(3)], 3, RngState(0))
    with pytest.raises(m.ModelError):
        m.build_cnn3((16, 16, 1), 1)


def test_tl_head_structure_and_param_count():
    bb = m.make_toy_backbone((64, 64, 1), RngState(1))
    head = m.build_tl_head(bb, 3, 0.2)
    n_bb = len(bb.layers)
    assert all(not layer.trainable for layer in head.layers[:n_bb])
    assert [layer.kind for layer in head.layers[n_bb:]] == ["flatten", "batchnorm", "dropout", "dense"]
    assert head.layers[n_bb + 2].hyper["rate"] == 0.2
    flat = int(np.prod(bb.output_shape))
    assert flat == 16 * 16 * 16
    assert head.parameter_count() == 2 * flat + flat * 3 + 3
    with pytest.raises(m.ModelError):
        m.build_tl_head(m.ModelSpec("empty", (4, 4, 1), []), 3)


def test_toy_backbone_deterministic_and_finite():
    a = m.make_toy_backbone((64, 64, 1), RngState(11))
    b = m.make_toy_backbone((64, 64, 1), RngState(11))
    for (_, _, _, x), (_, _, _, y) in zip(a.named_params(), b.named_params()):
        assert x.tobytes() == y.tobytes()
    feats = m.features(a, np.random.default_rng(0).uniform(0, 1, (2, 64, 64, 1)).astype(np.float32))
    assert feats.shape == (2, 16, 16, 16) and np.all(np.isfinite(feats))


def test_backward_matches_finite_differences_through_whole_model():
    rng = RngState(5)
    layers = [m.conv(2), m.relu(), m.maxpool(), m.batchnorm(), m.flatten(), m.dense(4), m.relu(),
              m.dense(3, softmax=True)]
    model = m.assemble("tiny", (6, 6, 1), layers, 3, rng, dtype=np.float64)
    x = np.random.default_rng(1).uniform(-1, 1, (3, 6, 6, 1))
    r = np.random.default_rng(2).uniform(-1, 1, (3, 3))
    logits, tr = m.forward_logits(model, x, "train", rng, trace=True)
    grads = m.backward(model, tr, r)

    from tumorscope.tensorcore import finite_diff_check
    params = {name: arr for name, _, _, arr in model.named_params(trainable_only=True)}
    rep = finite_diff_check(lambda p: float(np.sum(m.forward_logits(model, x, "train", rng) * r)), params, grads)
    assert rep.worst < 1e-4, rep.max_rel_error


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = m.build_cnn3((32, 32, 1), 3, RngState(2))
    model.meta = {"epochs": 3, "final_lr": 0.0005, "seed": 2, "classes": ["a", "b", "c"]}
    path = tmp_path / "m.tbck"
    m.save_checkpoint(model, path)
    loaded = m.load_checkpoint(path)
    x = np.random.default_rng(0).uniform(0, 1, (4, 32, 32, 1)).astype(np.float32)
    assert m.forward(loaded, x).tobytes() == m.forward(model, x).tobytes()
    assert loaded.meta == model.meta and loaded.name == "cnn3"
    assert path.read_bytes()[:4] == b"TBCK"


def test_checkpoint_lists_tensors_in_layer_order(tmp_path):
    model = m.build_cnn3((32, 32, 1), 3)
    expected = []
    for i, layer in enumerate(model.layers):
        names = {"conv": ["kernel", "bias"], "dense": ["weight", "bias"],
                 "batchnorm": ["gamma", "beta", "running_mean", "running_var"]}.get(layer.kind, [])
        expected += [f"{i:02d}_{layer.kind}.{n}" for n in names]
    m.save_checkpoint(model, tmp_path / "c")
    got = [name for name, *_ in m.load_checkpoint(tmp_path / "c").named_params()]
    assert got == expected
    assert got[:2] == ["00_conv.kernel", "00_conv.bias"]


def test_checkpoint_rejects_corruption(tmp_path):
    model = m.build_unet_classifier((16, 16, 1), 3, base_filters=2)
    blob = m.checkpoint_bytes(model)
    with pytest.raises(m.BadMagicError):
        m.checkpoint_from_bytes(b"X" + blob[1:])
    with pytest.raises(m.VersionMismatchError):
        m.checkpoint_from_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(m.TruncatedError):
        m.checkpoint_from_bytes(blob[: len(blob) // 2])
    codes = {m.BadMagicError.code, m.VersionMismatchError.code, m.TruncatedError.code}
    assert len(codes) == 3
