import numpy as np
import pytest

from tsxplain.models import (ConfigError, HybridModel, MultiHeadSelfAttention, ResNet1D, ResNetConfig,
                             ResidualBlock, Transformer2D, TransformerConfig, build_model, combine, hybrid_predict,
                             mhsa_forward, model_config, model_from_config, patch_embed, window_mask)
from tsxplain.tensor import Tensor


def small_transformer(**kw):
    cfg = dict(in_channels=3, num_outputs=2, embed_dim=8, layers=2, heads=2, head_dim=4, dropout=0.0)
    cfg.update(kw)
    return Transformer2D(TransformerConfig(**cfg), seed=0)


# -- ResNet --------------------------------------------------------------------------


def test_resnet_zero_input_is_deterministic():
    m = ResNet1D(ResNetConfig(in_channels=5), seed=0).eval()
    x = np.zeros((100, 5))
    a, _ = m.forward(x)
    b, _ = m.forward(x)
    np.testing.assert_array_equal(a.data, b.data)


def test_resnet_feature_length_for_T100():
    cfg = ResNetConfig(in_channels=5)
    assert cfg.feature_length(100) == 25
    # stem: (100 + 2*3 - 7)//2 + 1 = 50; pool: (50 - 2)//2 + 1 = 25; blocks keep length
    m = ResNet1D(cfg, seed=0).eval()
    _, cache = m.forward(np.random.default_rng(0).normal(size=(2, 100, 5)))
    assert cache.features.shape == (2, 64, 25)


def test_resnet_output_shapes():
    x = np.random.default_rng(0).normal(size=(3, 40, 4))
    cls, _ = ResNet1D(ResNetConfig(in_channels=4, num_outputs=3)).eval().forward(x)
    reg, _ = ResNet1D(ResNetConfig(in_channels=4, num_outputs=1, task="regression")).eval().forward(x)
    assert cls.shape == (3, 3) and reg.shape == (3,)


def test_resnet_rejects_short_input():
    m = ResNet1D(ResNetConfig(in_channels=2))
    with pytest.raises(ValueError, match="too short"):
        m.forward(np.zeros((5, 2)))


@pytest.mark.parametrize("c_in,c_out", [(4, 4), (4, 6)])
def test_skip_path_identity(c_in, c_out):
    rng = np.random.default_rng(1)
    block = ResidualBlock(c_in, c_out, 3, rng).eval()
    block.bn2.gamma.data[:] = 0.0
    block.bn2.beta.data[:] = 0.0
    x = Tensor(np.abs(rng.normal(size=(2, c_in, 10))))
    out = block(x).data
    skip = block.proj(x).data if block.proj is not None else x.data
    np.testing.assert_allclose(out, np.maximum(skip, 0.0), atol=1e-12)


def test_resnet_config_invariants():
    with pytest.raises(ConfigError):
        ResNetConfig(in_channels=2, stage_filters=(32, 16))
    with pytest.raises(ConfigError):
        ResNetConfig(in_channels=2, stem_kernel=6)


# -- Transformer ------------------------------------------------------------------------


def test_patch_embed_zero_projection_gives_positions():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(10, 6))
    z = patch_embed(rng.normal(size=(10, 3)), Tensor(np.zeros((3, 6))), Tensor(np.zeros(6)), pos)
    np.testing.assert_array_equal(z.data, pos)


@pytest.mark.parametrize("C", [1, 3, 7])
def test_patch_embed_shape_and_row_stats(C):
    rng = np.random.default_rng(C)
    z = patch_embed(rng.normal(size=(12, C)), Tensor(rng.normal(size=(C, 8))), Tensor(rng.normal(size=8)))
    assert z.shape == (12, 8)
    np.testing.assert_allclose(z.data.mean(axis=-1), 0.0, atol=1e-9)


def test_embedding_rejects_long_sequences():
    m = small_transformer(max_len=16)
    with pytest.raises(ValueError, match="max positions"):
        m.forward(np.zeros((20, 3)))


def test_mhsa_single_token():
    m = small_transformer()
    _, maps = mhsa_forward(Tensor(np.random.default_rng(0).normal(size=(1, 8))), m.blocks[0])
    assert all(np.array_equal(a, [[1.0]]) for a in maps)


def test_mhsa_equal_rows_attend_uniformly():
    m = small_transformer()
    z = np.tile(np.random.default_rng(0).normal(size=(1, 8)), (5, 1))
    _, maps = mhsa_forward(Tensor(z), m.blocks[0])
    for a in maps:
        np.testing.assert_allclose(a, np.full((5, 5), 0.2), atol=1e-15)


def test_mhsa_hand_case_single_head():
    attn = MultiHeadSelfAttention(1, 1, np.random.default_rng(0))
    for lin in (attn.q, attn.k, attn.v, attn.out):
        lin.weight.data[:] = 1.0
        lin.bias.data[:] = 0.0
    z = np.array([[[1.0], [2.0]]])
    out, maps = attn(Tensor(z))
    s = np.array([[1.0, 2.0], [2.0, 4.0]])
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(maps[0, 0], p, atol=1e-15)
    np.testing.assert_allclose(out.data[0, :, 0], p @ np.array([1.0, 2.0]), atol=1e-15)


def test_cache_holds_L_times_h_maps():
    m = small_transformer(layers=3, heads=2)
    _, cache = m.forward(np.random.default_rng(0).normal(size=(4, 9, 3)))
    assert len(cache.attention) == 3
    assert all(a.shape == (4, 2, 9, 9) for a in cache.attention)


def test_windowed_attention_is_exactly_zero_outside_window():
    m = small_transformer(attention_mode="windowed", window=3, layers=3, window_from_layer=1)
    _, cache = m.forward(np.random.default_rng(0).normal(size=(2, 12, 3)))
    outside = ~window_mask(12, 3)
    assert (cache.attention[0][..., outside] > 0).any()  # first layer stays dense
    for a in cache.attention[1:]:
        assert (a[..., outside] == 0.0).all()


def test_wide_window_equals_dense():
    x = np.random.default_rng(0).normal(size=(2, 10, 3))
    dense, _ = small_transformer().forward(x)
    windowed, _ = small_transformer(attention_mode="windowed", window=9).forward(x)
    np.testing.assert_array_equal(dense.data, windowed.data)


def test_transformer_channel_permutation_symmetry():
    m = small_transformer().eval()
    x = np.random.default_rng(0).normal(size=(2, 7, 3))
    perm = [2, 0, 1]
    a, _ = m.forward(x)
    m.embed.proj.weight.data = m.embed.proj.weight.data[perm]
    b, _ = m.forward(x[..., perm])
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_transformer_config_invariants():
    with pytest.raises(ConfigError):
        TransformerConfig(in_channels=2, embed_dim=32, heads=4, head_dim=4)
    with pytest.raises(ConfigError):
        TransformerConfig(in_channels=2, attention_mode="windowed", window=4)


def test_dropout_only_in_training():
    m = small_transformer(dropout=0.5)
    x = np.random.default_rng(0).normal(size=(2, 6, 3))
    m.eval()
    a, _ = m.forward(x, np.random.default_rng(1))
    b, _ = m.forward(x, np.random.default_rng(2))
    np.testing.assert_array_equal(a.data, b.data)
    m.train()
    c, _ = m.forward(x, np.random.default_rng(1))
    assert not np.array_equal(a.data, c.data)


# -- Hybrid ----------------------------------------------------------------------------------


def test_combine_gate_values():
    r, t = Tensor([2.0]), Tensor([4.0])
    assert combine(r, t, 1.0).data[0] == 2.0
    assert combine(r, t, 0.0).data[0] == 4.0
    assert combine(r, t, 0.5).data[0] == 3.0


def test_hybrid_predict_gate_extremes():
    x = np.random.default_rng(0).normal(size=(2, 20, 3))
    rn = ResNet1D(ResNetConfig(in_channels=3)).eval()
    tr = small_transformer().eval()
    np.testing.assert_array_equal(hybrid_predict(x, rn, tr, 1.0).data, rn.forward(x)[0].data)
    np.testing.assert_array_equal(hybrid_predict(x, rn, tr, 0.0).data, tr.forward(x)[0].data)


def test_hybrid_task_mismatch():
    rn = ResNet1D(ResNetConfig(in_channels=3, num_outputs=1, task="regression"))
    tr = small_transformer()
    with pytest.raises(ConfigError):
        HybridModel(rn, tr)
    with pytest.raises(ConfigError):
        hybrid_predict(np.zeros((20, 3)), rn, tr, 0.5)


def test_hybrid_gate_starts_at_half_and_cache_has_both_branches():
    m = build_model("hybrid", 3, 2, "classification").eval()
    assert m.gate == 0.5
    out, cache = m.forward(np.random.default_rng(0).normal(size=(2, 30, 3)))
    assert set(cache.branch_outputs) == {"resnet", "transformer"}
    expected = 0.5 * cache.branch_outputs["resnet"].data + 0.5 * cache.branch_outputs["transformer"].data
    np.testing.assert_allclose(out.data, expected, atol=1e-15)
    assert cache.features is not None and len(cache.attention) == 3


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ConfigError, match="resnet, transformer or hybrid"):
        build_model("lstm", 3, 2, "classification")


@pytest.mark.parametrize("kind", ["resnet", "transformer", "hybrid"])
def test_model_config_round_trip(kind):
    m = build_model(kind, 3, 2, "classification", seed=4)
    clone = model_from_config(model_config(m))
    clone.load_state_dict(m.state_dict())
    x = np.random.default_rng(0).normal(size=(2, 24, 3))
    np.testing.assert_array_equal(m.eval().forward(x)[0].data, clone.eval().forward(x)[0].data)


def test_attention_rows_are_stochastic():
    m = build_model("transformer", 3, 2, "classification", seed=0, transformer_kwargs={"attention_mode": "windowed"})
    _, cache = m.forward(np.random.default_rng(0).normal(size=(3, 17, 3)))
    for a in cache.attention:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        assert a.min() >= 0.0
