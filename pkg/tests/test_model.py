import math

import numpy as np
import pytest

from quietsr import model as M
from quietsr import params as P
from quietsr.errors import CapacityError, FormatError, NumericalFailure, ValidationError

import oracles

MICRO = dict(num_layers=2, layers_per_block=2)


def build(seed=0, **kw):
    cfg = M.ModelConfig(**{**MICRO, **kw})
    return cfg, M.init_params(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Convolution, layer norm, pixel shuffle
# ---------------------------------------------------------------------------


def test_identity_kernel_reproduces_input():
    x = np.random.default_rng(0).normal(size=(5, 6, 3))
    w = np.zeros((3, 3, 3, 3))
    w[1, 1] = np.eye(3)
    np.testing.assert_array_equal(M.conv2d_3x3(x, w, np.zeros(3)), x)


def test_ones_kernel_on_constant_interior():
    x = np.full((5, 5, 2), 1.5)
    out = M.conv2d_3x3(x, np.ones((3, 3, 2, 1)), np.zeros(1))
    # Interior sees 9 pixels times 2 channels; corners see only 4 pixels.
    assert out[2, 2, 0] == pytest.approx(27.0, abs=1e-12)
    assert out[0, 0, 0] == pytest.approx(12.0, abs=1e-12)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    np.testing.assert_allclose(M.conv2d_3x3(x, w, b), oracles.naive_conv3x3(x, w, b), atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValidationError):
        M.conv2d_3x3(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


def test_conv_backward_matches_finite_difference():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 3, 4, 2))
    w = rng.normal(size=(3, 3, 2, 2))
    b = rng.normal(size=2)
    g = rng.normal(size=(1, 3, 4, 2))
    dx, dw, db = M.conv_bwd(x, g, w)
    np.testing.assert_allclose(dx, oracles.central_diff(lambda v: np.sum(g * M.conv_fwd(v, w, b)[0]), x),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, oracles.central_diff(lambda v: np.sum(g * M.conv_fwd(x, v, b)[0]), w),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, g.sum(axis=(0, 1, 2)), atol=1e-12)


def test_layer_norm_moments_and_example():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(6, 7, 4))
    y = M.layer_norm(x, np.ones(4), np.zeros(4))
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), rtol=1e-12)
    v = M.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(v, [-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)], atol=1e-15)
    z = M.layer_norm(np.full(4, 7.0), np.full(4, 2.0), np.arange(4.0))
    np.testing.assert_array_equal(z, np.arange(4.0))


def test_layer_norm_backward():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    s, b, g = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))
    _, cache = M.ln_fwd(x, s, b)
    dx, ds, db = M.ln_bwd(cache, g, s)
    np.testing.assert_allclose(dx, oracles.central_diff(lambda v: np.sum(g * M.ln_fwd(v, s, b)[0]), x),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(ds, oracles.central_diff(lambda v: np.sum(g * M.ln_fwd(x, v, b)[0]), s),
                               rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, g.sum(axis=0), atol=1e-12)


def test_pixel_shuffle_layout():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4)
    np.testing.assert_array_equal(M.pixel_shuffle(x, 2)[..., 0], [[1, 2], [3, 4]])
    y = np.random.default_rng(0).normal(size=(3, 3, 5))
    np.testing.assert_array_equal(M.pixel_shuffle(y, 1), y)


def test_pixel_shuffle_roundtrip_and_errors():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 8))
    assert M.pixel_shuffle(x, 2).shape == (2, 6, 8, 2)
    assert M.pixel_unshuffle(M.pixel_shuffle(x, 2), 2).tobytes() == x.tobytes()
    with pytest.raises(ValidationError):
        M.pixel_shuffle(np.zeros((2, 2, 3)), 2)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValidationError):
        M.ModelConfig(embed_dim=4, heads=3)
    with pytest.raises(ValidationError):
        M.ModelConfig(num_layers=3, layers_per_block=2)
    with pytest.raises(ValidationError):
        M.ModelConfig(drop_path=1.5)
    with pytest.raises(CapacityError):
        M.ModelConfig(embed_dim=6, qmlp_ratio=2)


def test_config_dict_roundtrip():
    cfg = M.ModelConfig(bases=("RY",), num_layers=4)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_shift_schedule_alternates():
    assert [M.shift_for_layer(i, 2) for i in range(6)] == [0, 1, 0, 1, 0, 1]
    assert M.shift_for_layer(1, 4) == 2


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def test_output_shape_doubles_resolution():
    cfg, p = build(bases=("RY",))
    lr = np.random.default_rng(0).random((14, 14, 1))
    assert M.forward(lr, p, cfg).shape == (28, 28, 1)
    assert M.forward(lr[None].repeat(2, 0), p, cfg).shape == (2, 28, 28, 1)


def test_forward_rejects_bad_inputs():
    cfg, p = build()
    with pytest.raises(ValidationError):
        M.forward(np.zeros((5, 4, 1)), p, cfg)
    with pytest.raises(ValidationError):
        M.forward(np.zeros((4, 4, 3)), p, cfg)


def test_zeroed_reconstruction_gives_bias():
    cfg, p = build(bases=("RY",))
    p.conv_up_w[:] = 0
    p.conv_up_b[:] = 0
    p.conv_out_w[:] = 0
    p.conv_out_b[:] = 0.37
    out = M.forward(np.random.default_rng(0).random((4, 4, 1)), p, cfg)
    np.testing.assert_array_equal(out, 0.37)


def test_global_residual_bypasses_blocks():
    cfg, p = build(bases=("RY",))
    lr = np.random.default_rng(1).random((4, 4, 1))
    p.conv_mid_w[:] = 0
    p.conv_mid_b[:] = 0
    before = M.forward(lr, p, cfg)
    for block in p.blocks:
        block.conv_w[:] += 1.0
        block.layers[0].mlp.post_b[:] += 3.0
    np.testing.assert_array_equal(M.forward(lr, p, cfg), before)
    # With the deep path cut, the output is shallow conv -> up -> shuffle -> out.
    f0 = M.conv2d_3x3(lr, p.conv_in_w, p.conv_in_b)
    up = M.pixel_shuffle(M.conv2d_3x3(f0, p.conv_up_w, p.conv_up_b), 2)
    np.testing.assert_allclose(before, M.conv2d_3x3(up, p.conv_out_w, p.conv_out_b), atol=1e-13)


def test_drop_path_one_makes_layer_identity():
    cfg, p = build(bases=("RY",))
    x = np.random.default_rng(2).normal(size=(2, 4, 4, 4))
    lp = p.blocks[0].layers[0]
    y = M.transformer_layer_forward(x, lp, 0, drop_path=1.0, training=True,
                                    rng=np.random.default_rng(0))
    np.testing.assert_array_equal(y, x)
    # At inference time drop path is inactive.
    assert not np.array_equal(M.transformer_layer_forward(x, lp, 0, drop_path=1.0), x)


def test_drop_path_needs_generator():
    cfg, p = build(drop_path=0.1)
    with pytest.raises(ValidationError):
        M.forward(np.zeros((4, 4, 1)), p, cfg, training=True)


def test_zero_mlp_output_leaves_attention_branch():
    cfg, p = build(bases=("RY",))
    x = np.random.default_rng(3).normal(size=(1, 4, 4, 4))
    lp = p.blocks[0].layers[0]
    lp.mlp.post_w[:] = 0
    lp.mlp.post_b[:] = 0
    from quietsr.attention import sqwin_forward

    n1 = M.layer_norm(x, lp.norm1_scale, lp.norm1_bias)
    expect = x + sqwin_forward(n1, lp.attn, 0)
    np.testing.assert_allclose(M.transformer_layer_forward(x, lp, 0), expect, atol=1e-14)


def test_non_finite_input_is_reported():
    cfg, p = build()
    lr = np.zeros((4, 4, 1))
    lr[0, 0, 0] = np.nan
    with pytest.raises(NumericalFailure) as info:
        M.forward(lr, p, cfg)
    assert info.value.where == "conv_in"


def test_deep_features_shape():
    cfg, p = build(bases=("RY",))
    assert M.deep_features(np.zeros((4, 4, 1)), p, cfg).shape == (4, 4, 4)


@pytest.mark.parametrize("bases", [None, ("RY",)])
def test_model_gradient_matches_finite_difference(bases):
    cfg, p = build(seed=7, bases=bases)
    rng = np.random.default_rng(11)
    lr = rng.random((2, 4, 4, 1))
    g = rng.normal(size=(2, 8, 8, 1))
    out, cache = M.model_fwd(lr, p, cfg)
    dx, grads = M.model_bwd(cache, g, p, cfg)
    base = p.flatten()
    ana = grads.flatten()
    idx = rng.choice(base.size, size=60, replace=False)

    def f(vec):
        return np.sum(g * M.model_fwd(lr, p.unflatten(vec), cfg)[0])

    h = 1e-5
    num = np.empty(idx.size)
    for n, i in enumerate(idx):
        e = np.zeros_like(base)
        e[i] = h
        num[n] = (f(base + e) - f(base - e)) / (2 * h)
    np.testing.assert_allclose(ana[idx], num, rtol=1e-4, atol=1e-8)
    numx = oracles.central_diff(lambda v: np.sum(g * M.model_fwd(v, p, cfg)[0]), lr)
    np.testing.assert_allclose(dx, numx, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# Resource report and checkpoints
# ---------------------------------------------------------------------------


def test_resource_report_default():
    cfg = M.ModelConfig()
    rep = M.resource_report(cfg)
    assert rep["qubits_per_circuit"] == 8 <= 10
    assert rep["log_formula_qubits"] == 2
    assert rep["ancilla"] == 0
    assert rep["param_count"] == M.init_params(cfg, np.random.default_rng(0)).count()
    assert M.resource_report(cfg, ancilla=3)["log_formula_qubits"] == 5


def test_checkpoint_roundtrip(tmp_path):
    cfg, p = build(seed=4, bases=("RY",))
    path = tmp_path / "m.qsr1"
    M.save_checkpoint(path, p, cfg, seed=4, epoch=3)
    q, cfg2, header = M.load_checkpoint(path)
    assert cfg2 == cfg and header["seed"] == 4 and header["epoch"] == 3
    assert q.flatten().tobytes() == p.flatten().tobytes()
    lr = np.random.default_rng(0).random((4, 4, 1))
    assert M.forward(lr, q, cfg).tobytes() == M.forward(lr, p, cfg).tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"QSR1"
    assert len(raw) == 12 + int.from_bytes(raw[4:12], "little") + 8 * p.count()


def test_checkpoint_format_errors(tmp_path):
    cfg, p = build()
    good = tmp_path / "m.qsr1"
    M.save_checkpoint(good, p, cfg)
    raw = good.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        M.load_checkpoint(bad)
    assert info.value.offset == 0
    bad.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        M.load_checkpoint(bad)
    bad.write_bytes(raw[:20])
    with pytest.raises(FormatError):
        M.load_checkpoint(bad)
