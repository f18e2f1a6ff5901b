import hashlib
import logging
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mscmhmst import numcore as nc
from mscmhmst.errors import ConfigurationError
from mscmhmst.model import (
    VARIANTS,
    HeadSpec,
    ModelConfig,
    build_variant,
    count_parameters,
    default_head_specs,
    mhms_attention,
    mhms_channels,
    multi_scale_conv_block,
    positional_encoding,
    transformer_encoder_layer,
)
from mscmhmst.numcore import ParameterSet, Tensor
from mscmhmst.training import loss

odd = st.integers(0, 5).map(lambda i: 2 * i + 1)
head_lists = st.lists(
    st.lists(odd, min_size=1, max_size=3, unique=True).map(lambda s: HeadSpec(tuple(s))),
    min_size=1, max_size=5,
)


def msc_params(c_in, kernels, branch, rng, residual=False, zero_bias=True):
    p = ParameterSet()
    for k in kernels:
        p.add(f"msc.k{k}.weight", rng.normal(size=(branch, c_in, k)))
        p.add(f"msc.k{k}.bias", np.zeros(branch) if zero_bias else rng.normal(size=branch))
    if residual:
        p.add("msc.skip.weight", rng.normal(size=(branch * len(kernels), c_in, 1)))
        p.add("msc.skip.bias", np.zeros(branch * len(kernels)))
    return p


def mhms_params(c, specs, ch, rng, zero_att=False):
    p = ParameterSet()
    for i, spec in enumerate(specs):
        for k in spec.scales:
            base = f"mhms.h{i}.k{k}"
            p.add(f"{base}.feat.weight", rng.normal(size=(ch, c, k)))
            p.add(f"{base}.feat.bias", rng.normal(size=ch))
            p.add(f"{base}.att.weight", np.zeros((ch, ch, k)) if zero_att else rng.normal(size=(ch, ch, k)))
            p.add(f"{base}.att.bias", np.zeros(ch) if zero_att else rng.normal(size=ch))
    return p


# ---------------------------------------------------------------- multi-scale conv


def test_msc_default_channel_count(rng):
    x = Tensor(rng.normal(size=(2, 3, 12)))
    p = msc_params(3, (3, 5, 7, 9), 8, rng)
    assert multi_scale_conv_block(x, p, (3, 5, 7, 9)).shape == (2, 32, 12)


def test_msc_zero_input_gives_zero(rng):
    p = msc_params(2, (3, 5), 4, rng)
    out = multi_scale_conv_block(Tensor(np.zeros((2, 10))), p, (3, 5))
    assert np.all(out.data == 0)


def test_msc_identity_branch_is_relu(rng):
    p = ParameterSet()
    p.add("msc.k3.weight", np.array([[[0.0, 1.0, 0.0]]]))
    p.add("msc.k3.bias", np.zeros(1))
    x = rng.normal(size=(1, 9))
    out = multi_scale_conv_block(Tensor(x), p, (3,))
    np.testing.assert_array_equal(out.data, np.maximum(x, 0))


def test_msc_residual_adds_projection(rng):
    p = msc_params(2, (3,), 2, rng, residual=True)
    x = Tensor(rng.normal(size=(2, 6)))
    plain = multi_scale_conv_block(x, p, (3,))
    skip = nc.conv1d_same(x, p["msc.skip.weight"], p["msc.skip.bias"])
    np.testing.assert_allclose(multi_scale_conv_block(x, p, (3,), residual=True).data,
                               plain.data + skip.data, atol=1e-14)


# ---------------------------------------------------------------- MHMS attention


def test_mhms_default_channel_count(rng):
    specs = default_head_specs(16)
    assert mhms_channels(specs, 2) == 64
    x = Tensor(rng.normal(size=(4, 12)))
    out = mhms_attention(x, specs, mhms_params(4, specs, 2, rng))
    assert out.shape == (64, 12)


def test_mhms_zero_attention_halves_features(rng):
    specs = default_head_specs(3)
    p = mhms_params(3, specs, 2, rng, zero_att=True)
    x = Tensor(rng.normal(size=(3, 10)))
    feats = [
        nc.conv1d_same(x, p[f"mhms.h{i}.k{k}.feat.weight"], p[f"mhms.h{i}.k{k}.feat.bias"]).data
        for i, s in enumerate(specs) for k in s.scales
    ]
    np.testing.assert_array_equal(mhms_attention(x, specs, p).data, 0.5 * np.concatenate(feats))


def test_mhms_tiny_threshold_matches_unpruned_bitwise(rng):
    specs = default_head_specs(4)
    p = mhms_params(2, specs, 2, rng)
    x = Tensor(rng.normal(size=(3, 2, 12)))
    off = mhms_attention(x, specs, p, 0.0).data
    on = mhms_attention(x, specs, p, 1e-300).data
    assert np.array_equal(off, on)


def test_mhms_empty_heads():
    with pytest.raises(ConfigurationError):
        mhms_attention(Tensor(np.ones((1, 4))), [], ParameterSet())


@settings(max_examples=25, deadline=None)
@given(specs=head_lists, ch=st.integers(1, 3), c=st.integers(1, 3), seed=st.integers(0, 999))
def test_mhms_channel_bookkeeping(specs, ch, c, seed):
    r = np.random.default_rng(seed)
    out = mhms_attention(Tensor(r.normal(size=(c, 7))), specs, mhms_params(c, specs, ch, r))
    assert out.shape[0] == sum(len(s) for s in specs) * ch == mhms_channels(specs, ch)


@settings(max_examples=25, deadline=None)
@given(tau=st.floats(0.01, 0.99), seed=st.integers(0, 999))
def test_mhms_maps_and_pruning(tau, seed):
    r = np.random.default_rng(seed)
    specs = default_head_specs(3)
    p = mhms_params(2, specs, 2, r)
    x = Tensor(r.normal(size=(2, 2, 9)))
    trace = {}
    mhms_attention(x, specs, p, tau, trace=trace)
    for raw, pruned in zip(trace["maps"], trace["pruned"]):
        assert np.all((raw >= 0) & (raw <= 1))
        assert np.all((pruned == 0) | (pruned >= tau))
        np.testing.assert_array_equal(pruned[raw >= tau], raw[raw >= tau])


@settings(max_examples=20, deadline=None)
@given(taus=st.lists(st.floats(0.0, 0.99), min_size=2, max_size=5), seed=st.integers(0, 999))
def test_raising_threshold_never_adds_nonzeros(taus, seed):
    r = np.random.default_rng(seed)
    specs = default_head_specs(2)
    p = mhms_params(2, specs, 2, r)
    x = Tensor(r.normal(size=(2, 8)))
    counts = []
    for tau in sorted(taus):
        trace = {}
        mhms_attention(x, specs, p, tau, trace=trace)
        counts.append(sum(int(np.count_nonzero(m)) for m in trace["pruned"]))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


# ---------------------------------------------------------------- positional encoding / encoder


def test_positional_encoding_values():
    pe = positional_encoding(12, 8)
    assert pe[0, 0] == 0 and pe[0, 1] == 1
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert pe[3, 2] == pytest.approx(math.sin(3 / 10000 ** (2 / 8)), abs=1e-15)
    assert np.all(np.abs(pe) <= 1)
    with pytest.raises(ConfigurationError):
        positional_encoding(4, 7)


def encoder_params(d, rng):
    p = ParameterSet()
    for name in "qkvo":
        p.add(f"enc0.{name}.weight", rng.normal(size=(d, d)) / math.sqrt(d))
        p.add(f"enc0.{name}.bias", rng.normal(size=d) * 0.1)
    for ln in ("ln1", "ln2"):
        p.add(f"enc0.{ln}.gain", 1 + 0.1 * rng.normal(size=d))
        p.add(f"enc0.{ln}.shift", 0.1 * rng.normal(size=d))
    p.add("enc0.ffn1.weight", rng.normal(size=(d, 4 * d)) / math.sqrt(d))
    p.add("enc0.ffn1.bias", 0.1 * rng.normal(size=4 * d))
    p.add("enc0.ffn2.weight", rng.normal(size=(4 * d, d)) / math.sqrt(4 * d))
    p.add("enc0.ffn2.bias", 0.1 * rng.normal(size=d))
    return p


@pytest.mark.parametrize("length", [1, 2, 5, 12])
def test_encoder_layer_shape_and_attention_rows(rng, length):
    p = encoder_params(8, rng)
    for shape in ((length, 8), (3, length, 8)):
        trace = {}
        out = transformer_encoder_layer(Tensor(rng.normal(size=shape)), p, 2, trace=trace)
        assert out.shape == shape
        np.testing.assert_allclose(trace["attention"][0].sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_encoder_single_position_attention_is_identity(rng):
    p = encoder_params(4, rng)
    x = rng.normal(size=(1, 4))
    trace = {}
    out = transformer_encoder_layer(Tensor(x), p, 2, trace=trace)
    assert np.all(trace["attention"][0] == 1.0)
    # with one key the context is V itself: recompute the layer by hand
    v = x @ p["enc0.v.weight"].data + p["enc0.v.bias"].data
    sa = v @ p["enc0.o.weight"].data + p["enc0.o.bias"].data
    y = nc.layer_norm(Tensor(x + sa), p["enc0.ln1.gain"], p["enc0.ln1.shift"]).data
    ff = np.maximum(y @ p["enc0.ffn1.weight"].data + p["enc0.ffn1.bias"].data, 0)
    ff = ff @ p["enc0.ffn2.weight"].data + p["enc0.ffn2.bias"].data
    ref = nc.layer_norm(Tensor(y + ff), p["enc0.ln2.gain"], p["enc0.ln2.shift"]).data
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


# ---------------------------------------------------------------- full model


def test_forward_shape_and_row_independence(rng):
    m = build_variant(ModelConfig(c_in=3, h=12, t=6, head_specs=default_head_specs(4)))
    x = rng.normal(size=(2, 3, 12))
    assert m.forward(x).shape == (2, 3, 6)
    same = np.repeat(x[:1], 3, axis=0)
    out = m.forward(same).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[0], out[2])
    with pytest.raises(ConfigurationError):
        m.forward(rng.normal(size=(2, 2, 12)))


def test_forward_bitwise_identical_across_processes():
    code = (
        "import hashlib, numpy as np\n"
        "from mscmhmst.model import ModelConfig, build_variant\n"
        "m = build_variant(ModelConfig(c_in=2, seed=11))\n"
        "x = np.random.default_rng(5).normal(size=(4, 2, 12))\n"
        "print(hashlib.sha256(m.forward(x).data.tobytes()).hexdigest())\n"
    )
    runs = [
        subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
        for _ in range(2)
    ]
    assert runs[0] == runs[1] and len(runs[0].strip()) == 64


def test_variant_heads_and_layers():
    m4 = build_variant(ModelConfig(variant="MSCMHMST_4", c_in=2))
    assert m4.plan.heads == default_head_specs(16)[:4]
    assert [s.scales for s in m4.plan.heads] == [(1, 3), (3, 5), (5, 7), (7, 9)]
    assert "MHMSAttention(heads=4)" in m4.layers
    msc_tr = build_variant(ModelConfig(variant="MSC_Transformer", c_in=2))
    assert not any(".att." in n for n in msc_tr.params.names())
    m16 = build_variant(ModelConfig(variant="MSCMHMST_16", c_in=2))
    assert count_parameters(msc_tr) < count_parameters(m16)
    r2 = build_variant(ModelConfig(variant="MSC2R_MHMST2L", c_in=2))
    assert r2.layers.count("ResidualConvBlock") == 2
    assert r2.layers.count("ResidualDenseBlock") == 2
    cnn = build_variant(ModelConfig(variant="1DCNN_MHMST", c_in=2))
    assert cnn.config.variant == "CNN1D_MHMST" and cnn.layers[0] == "Conv1d(k=3)"


def test_unknown_variant():
    with pytest.raises(ConfigurationError):
        ModelConfig(variant="MSCMHMST_5")


def test_build_is_deterministic():
    a = build_variant(ModelConfig(c_in=2, seed=3))
    b = build_variant(ModelConfig(c_in=2, seed=3))
    c = build_variant(ModelConfig(c_in=2, seed=4))
    assert count_parameters(a) == count_parameters(b)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert not np.array_equal(a.params["fc1.weight"].data, c.params["fc1.weight"].data)


def test_shared_names_share_initialisation():
    m4 = build_variant(ModelConfig(variant="MSCMHMST_4", c_in=2, seed=9))
    m16 = build_variant(ModelConfig(variant="MSCMHMST_16", c_in=2, seed=9))
    assert set(m4.params.names()) <= set(m16.params.names())
    shared = [n for n in m4.params if n.startswith(("msc.", "mhms."))]
    assert shared
    for name in shared:
        assert np.array_equal(m4.params[name].data, m16.params[name].data)


def test_initialisation_bounds():
    m = build_variant(ModelConfig(c_in=2))
    w = m.params["msc.k5.weight"].data
    assert np.all(np.abs(w) <= 1 / math.sqrt(2 * 5))
    assert np.all(m.params["msc.k5.bias"].data == 0)
    assert np.all(m.params["enc0.ln1.gain"].data == 1)


def test_count_parameters():
    p = ParameterSet()
    p.add("w", np.zeros((2, 3)))
    p.add("b", np.zeros(3))
    assert p.count() == 9
    small = build_variant(ModelConfig(c_in=2, branch_channels=4))
    big = build_variant(ModelConfig(c_in=2, branch_channels=8))
    assert count_parameters(big) > count_parameters(small)


def test_even_scales_round_up_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="mscmhmst.model"):
        spec = HeadSpec.from_scales([8, 10])
    assert spec.scales == (9, 11)
    assert "even" in caplog.text
    assert [s.scales for s in default_head_specs(16)[9:]] == [
        (3, 7), (5, 9), (3, 9), (3, 5), (5, 7), (7, 9), (9, 11)
    ]
    with pytest.raises(ConfigurationError):
        HeadSpec((2, 3))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=8, encoder_heads=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(prune_threshold=1.0)
    with pytest.raises(ConfigurationError):
        ModelConfig(msc_kernels=(3, 4))
    cfg = ModelConfig(c_in=3, head_specs=default_head_specs(2))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


SMALL = dict(c_in=2, h=12, t=6, branch_channels=2, head_channels=2, encoder_layers=1,
             fc_hidden=8, head_specs=default_head_specs(2))


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_gradchecks(variant):
    cfg = ModelConfig(variant=variant, **SMALL)
    if variant.startswith("MSCMHMST_"):
        cfg = cfg.with_(head_specs=default_head_specs(16))
    m = build_variant(cfg)
    r = np.random.default_rng(0)
    x, y = r.normal(size=(2, 2, 12)), Tensor(r.normal(size=(2, 2, 6)))
    res = nc.gradcheck(lambda: loss(m.forward(x), y), m.params, max_coords=8)
    assert res.max_error < 1e-4, res.worst_parameter


def test_pruned_model_gradchecks():
    m = build_variant(ModelConfig(prune_threshold=0.45, residual=True, **SMALL))
    r = np.random.default_rng(2)
    x, y = r.normal(size=(2, 2, 12)), Tensor(r.normal(size=(2, 2, 6)))
    assert nc.gradcheck(lambda: loss(m.forward(x), y), m.params, max_coords=16).max_error < 1e-4
