import json

import numpy as np
import pytest

from sepseg import tensor as T
from sepseg.sepnet import (NetworkSpec, Model, _block, build_sepnet, build_unet_baseline, init_params,
                           load_checkpoint, param_count, read_checkpoint_arrays, save_checkpoint,
                           unet_spec_for)
from sepseg.tensor import ShapeError, grad_check

TOY = NetworkSpec(num_classes=3, base_channels=4, num_scales=2)


def sep_block_count(n):
    # three in-plane convs, one cross-slice conv, 1x1x1 skip, IN affine on four convs
    return 3 * (9 * n * n + n) + (3 * n * n + n) + (n * n + n) + 4 * 2 * n


def plain_block_count(n):
    return 2 * (27 * n * n + n) + 4 * n


def test_forward_shape_and_normalisation():
    m = build_sepnet(TOY, dtype=np.float64, seed=0)
    x = np.random.default_rng(0).random((1, 1, 8, 16, 16))
    p = m.forward(x).data
    assert p.shape == (1, 3, 8, 16, 16)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_forward_is_deterministic():
    x = np.random.default_rng(1).random((1, 1, 4, 8, 8)).astype(np.float32)
    a = build_sepnet(TOY, seed=5).predict_probs(x)
    b = build_sepnet(TOY, seed=5).predict_probs(x)
    assert a.tobytes() == b.tobytes()


def test_slice_axis_is_never_pooled():
    spec = NetworkSpec(num_classes=2, base_channels=2, num_scales=4)
    m = build_sepnet(spec, dtype=np.float64, seed=0)
    seen = []
    orig = T.max_pool

    def tracing(x, window):
        out = orig(x, window)
        seen.append((x.shape[2], out.shape[2]))
        return out

    T.max_pool = tracing
    try:
        out = m.predict_probs(np.zeros((1, 1, 1, 8, 8)))
    finally:
        T.max_pool = orig
    assert out.shape == (1, 2, 1, 8, 8)
    assert seen == [(1, 1)] * 3


def test_input_divisibility_is_checked():
    m = build_sepnet(TOY, seed=0)
    with pytest.raises(ShapeError, match="divisible"):
        m.predict_probs(np.zeros((1, 1, 4, 7, 8)))


@pytest.mark.parametrize("n", [1, 3, 8])
def test_sep_block_count_matches_enumeration(n):
    spec = NetworkSpec(num_classes=2, base_channels=n, num_scales=2, encoder_blocks=(1, 1),
                       decoder_blocks=(1,), in_channels=n)
    params = init_params(spec, 0)
    enc0 = sum(a.size for k, a in params.items() if k.startswith("enc0.0."))
    assert enc0 == sep_block_count(n)


@pytest.mark.parametrize("n", [1, 3, 8])
def test_plain_block_count_matches_enumeration(n):
    spec = NetworkSpec(num_classes=2, base_channels=n, num_scales=2, encoder_blocks=(1, 1),
                       decoder_blocks=(1,), in_channels=n, block="plain")
    params = init_params(spec, 0)
    enc0 = sum(a.size for k, a in params.items() if k.startswith("enc0.0."))
    assert enc0 == plain_block_count(n)


def test_single_inplane_conv_has_ten_parameters():
    k, b = np.zeros((1, 1, 1, 3, 3)), np.zeros(1)
    assert k.size + b.size == 10


def test_param_count_equals_named_sum():
    for spec in (TOY, NetworkSpec()):
        m = build_sepnet(spec, seed=0)
        assert param_count(m) == sum(a.size for a in m.named_arrays().values()) == param_count(spec)


@pytest.mark.parametrize("n0", [4, 8, 16])
@pytest.mark.parametrize("scales", [2, 3, 4])
def test_parameter_ratio_grid(n0, scales):
    spec = NetworkSpec(num_classes=4, base_channels=n0, num_scales=scales)
    ratio = param_count(spec) / param_count(unet_spec_for(spec))
    assert 0.25 <= ratio <= 0.45


def test_unet_baseline_shares_shape_contract():
    u = build_unet_baseline(TOY, dtype=np.float64, seed=0)
    assert u.spec.block == "plain"
    assert u.predict_probs(np.zeros((1, 1, 4, 8, 8))).shape == (1, 3, 4, 8, 8)


def test_zero_input_and_zero_biases_give_uniform_softmax():
    m = build_sepnet(NetworkSpec(num_classes=4, base_channels=4, num_scales=3), dtype=np.float64, seed=2)
    for name, p in m.params.items():
        if name.endswith(("bias", "beta")):
            p.data[...] = 0.0
    out = m.predict_probs(np.zeros((1, 1, 2, 8, 8)))
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


def test_spec_validation_lists_every_problem():
    with pytest.raises(ValueError) as e:
        NetworkSpec(num_classes=1, base_channels=0, num_scales=0, block="dense")
    msg = str(e.value)
    for word in ("num_classes", "base_channels", "num_scales", "block"):
        assert word in msg


def test_sep_block_gradient():
    rng = np.random.default_rng(0)
    n = 3
    spec = NetworkSpec(num_classes=2, base_channels=n, num_scales=2, encoder_blocks=(1, 1),
                       decoder_blocks=(1,), in_channels=2)
    params = {k: v for k, v in init_params(spec, 1).items() if k.startswith("enc0.0.")}
    for k in params:
        if k.endswith(("bias", "beta")):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    names = sorted(params)
    x = rng.normal(size=(1, 2, 3, 4, 4))
    w = rng.normal(size=(1, n, 3, 4, 4))

    def f(x, *ps):
        return (_block(x, dict(zip(names, ps)), "enc0.0", "sep") * w).sum()

    assert grad_check(f, [x] + [params[k] for k in names], eps=1e-6) < 1e-4


def test_full_network_gradient():
    # A 1e-5 step can straddle ReLU / max-pool kinks that instance norm then
    # amplifies; 1e-6 keeps every probe on one side of every kink.
    rng = np.random.default_rng(0)
    m = build_sepnet(TOY, dtype=np.float64, seed=4)
    names = sorted(m.params)
    x = rng.random((1, 1, 2, 4, 4))
    w = rng.normal(size=(1, 3, 2, 4, 4))

    def f(x, *ps):
        m.params = dict(zip(names, ps))
        return (T.softmax_channels(m.logits(x)) * w).sum()

    arrays = [x] + [m.params[k].data.copy() for k in names]
    assert grad_check(f, arrays, eps=1e-6, max_entries=12) < 1e-4


def test_model_backward_matches_manual_graph():
    m = build_sepnet(TOY, dtype=np.float64, seed=0)
    x = np.random.default_rng(0).random((1, 1, 2, 4, 4))
    g = np.random.default_rng(1).normal(size=(1, 3, 2, 4, 4))
    m.forward(x)
    m.backward(g)
    first = {k: v.copy() for k, v in m.grads().items()}
    m.zero_grad()
    m.forward(x)
    m.backward(g)
    for k, v in m.grads().items():
        np.testing.assert_array_equal(v, first[k])


def test_checkpoint_roundtrip(tmp_path):
    m = build_sepnet(TOY, seed=9)
    path = tmp_path / "m.sepn"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec
    for k, v in m.named_arrays().items():
        assert back.named_arrays()[k].tobytes() == v.tobytes()
    assert json.loads((tmp_path / "m.sepn.json").read_text())["base_channels"] == 4
    assert path.read_bytes()[:4] == b"SEPN"
    save_checkpoint(back, tmp_path / "again.sepn")
    assert (tmp_path / "again.sepn").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.sepn"
    save_checkpoint(build_sepnet(TOY, seed=9), path)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="CRC"):
        read_checkpoint_arrays(path)
    path.write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(ValueError, match="not a SEPN"):
        read_checkpoint_arrays(path)


def test_model_rejects_mismatched_parameters():
    params = init_params(TOY, 0)
    params.pop("head.bias")
    with pytest.raises(ValueError, match="missing"):
        Model(TOY, params)
