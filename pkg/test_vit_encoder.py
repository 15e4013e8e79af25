"""
ViT stream: patch layout, embedding, pre-norm blocks and the full encoder
"""

import numpy as np
import pytest
from scipy.special import erf

import layers
import tensor as T
from conftest import fd_check
from errors import ConfigError, ShapeError
from tensor import Tensor
from vit_encoder import (StreamConfig, TokenSequence, embed_tokens, encode, encoder_block, init_stream_params,
                         patchify, unpatchify)


def _stream_params(cfg, seed=0, prefix="s"):
    params = {}
    init_stream_params(params, np.random.default_rng(seed), cfg, prefix)
    return params


def _ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x):
    return x * 0.5 * (1 + erf(x / np.sqrt(2)))


def test_patch_count_and_length():
    img = np.random.default_rng(0).random((32, 32, 1))
    patches = patchify(img, 8)
    assert patches.shape == (16, 64)
    assert StreamConfig(H=32, W=32, p=8).n_patches == 16


def test_patches_are_row_major_over_the_grid():
    img = np.arange(16 * 16 * 2, dtype=float).reshape(16, 16, 2)
    patches = patchify(img, 8)
    np.testing.assert_array_equal(patches[1], img[0:8, 8:16].reshape(-1))
    np.testing.assert_array_equal(patches[2], img[8:16, 0:8].reshape(-1))


def test_constant_image_single_patch():
    patches = patchify(np.full((8, 8, 1), 3.0), 8)
    assert patches.shape == (1, 64)
    assert np.all(patches == 3.0)


def test_unpatchify_inverts_patchify():
    img = np.random.default_rng(1).random((3, 16, 24, 2))
    np.testing.assert_array_equal(unpatchify(patchify(img, 4), 4, 16, 24, 2), img)


def test_patchify_rejects_non_divisible_extents():
    with pytest.raises(ShapeError):
        patchify(np.zeros((30, 32, 1)), 8)


@pytest.mark.parametrize("overrides,field", [
    ({"H": 30}, "s.p"),
    ({"C_e": 6, "n_heads_enc": 4}, "s.n_heads_enc"),
    ({"depth": -1}, "s.depth"),
    ({"p": 0}, "s.p"),
])
def test_stream_config_validation(overrides, field):
    with pytest.raises(ConfigError) as err:
        StreamConfig(**overrides).validate("s")
    assert err.value.field == field


def test_embed_tokens_places_class_token_first(f64):
    cfg = StreamConfig(H=32, W=32, p=8, C_e=8)
    params = _stream_params(cfg)
    params["s.pos_embed"].assign(np.zeros((17, 8)))
    params["s.cls_token"].assign(np.arange(8.0))
    seq = embed_tokens(Tensor(np.zeros((1, 16, 64))), cfg, params, "s")
    assert seq.tokens.shape == (1, 17, 8)
    np.testing.assert_array_equal(seq.tokens.data[0, 0], np.arange(8.0))
    assert not seq.tokens.data[0, 1:].any()


def test_embed_tokens_rejects_wrong_patch_length(f64):
    cfg = StreamConfig(H=16, W=16, p=8, C_e=8)
    with pytest.raises(ShapeError):
        embed_tokens(Tensor(np.zeros((1, 4, 63))), cfg, _stream_params(cfg), "s")


def _zero_block(params, block):
    for name, p in params.items():
        if name.startswith(f"{block}.attn.wo") or name.startswith(f"{block}.mlp.fc2"):
            p.assign(np.zeros_like(p.data))


def test_block_with_zero_output_weights_is_identity(f64, rng):
    cfg = StreamConfig(H=16, W=16, p=8, C_e=8, depth=1)
    params = _stream_params(cfg)
    _zero_block(params, "s.block0")
    x = TokenSequence(tokens=Tensor(rng.normal(size=(2, 5, 8))), n_patches=4)
    y, weights = encoder_block(x, params, "s.block0", cfg.n_heads_enc)
    np.testing.assert_array_equal(y.tokens.data, x.tokens.data)
    assert weights.shape == (2, 2, 5, 5)


def test_attention_rows_sum_to_one(f64, rng):
    cfg = StreamConfig(H=16, W=16, p=4, C_e=8, depth=3, n_heads_enc=4)
    out = encode(rng.random((3, 16, 16, 1)), cfg, _stream_params(cfg), "s")
    for weights in out.attn_maps:
        assert np.all(weights >= 0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_single_token_block_matches_hand_evaluation(f64, rng):
    params = {}
    layers.new_layer_norm(params, "b.norm1", 2)
    layers.new_attention(params, rng, "b.attn", 2, 2, bias=True)
    layers.new_layer_norm(params, "b.norm2", 2)
    layers.new_feed_forward(params, rng, "b.mlp", 2, 3)
    for p in params.values():
        p.assign(rng.normal(size=p.shape))
    P = {name: p.data for name, p in params.items()}
    x = np.array([[[0.3, -1.2]]])

    y, weights = encoder_block(TokenSequence(Tensor(x), 0), params, "b", n_heads=1)

    ln1 = _ln(x) * P["b.norm1.gamma"] + P["b.norm1.beta"]
    v = ln1 @ P["b.attn.wv.weight"] + P["b.attn.wv.bias"]
    h = x + v @ P["b.attn.wo.weight"] + P["b.attn.wo.bias"]
    ln2 = _ln(h) * P["b.norm2.gamma"] + P["b.norm2.beta"]
    ffn = _gelu(ln2 @ P["b.mlp.fc1.weight"] + P["b.mlp.fc1.bias"]) @ P["b.mlp.fc2.weight"] + P["b.mlp.fc2.bias"]
    np.testing.assert_allclose(y.tokens.data, h + ffn, rtol=1e-12, atol=1e-12)
    assert weights.shape == (1, 1, 1, 1) and weights[0, 0, 0, 0] == 1.0


def test_encode_shapes(f64, rng):
    cfg = StreamConfig(H=32, W=32, C_in=1, p=8, C_e=8, depth=2, n_heads_enc=2)
    out = encode(rng.random((32, 32, 1)), cfg, _stream_params(cfg), "s")
    assert out.cls_feat.shape == (1, 8)
    assert out.patch_feats.shape == (1, 16, 8)
    assert [w.shape for w in out.attn_maps] == [(1, 2, 17, 17)] * 2


def test_depth_zero_is_final_norm_of_embedding(f64, rng):
    cfg = StreamConfig(H=16, W=16, p=8, C_e=8, depth=0)
    params = _stream_params(cfg)
    img = rng.random((1, 16, 16, 1))
    out = encode(img, cfg, params, "s")
    seq = embed_tokens(Tensor(patchify(img, 8)), cfg, params, "s")
    expected = layers.norm(seq.tokens, params, "s.norm").data
    np.testing.assert_allclose(out.cls_feat.data, expected[:, 0], rtol=0, atol=1e-14)
    np.testing.assert_allclose(out.patch_feats.data, expected[:, 1:], rtol=0, atol=1e-14)
    assert out.attn_maps == []


def test_batch_permutation_permutes_outputs(f64, rng):
    cfg = StreamConfig(H=16, W=16, p=8, C_e=8, depth=2)
    params = _stream_params(cfg)
    imgs = rng.random((4, 16, 16, 1))
    order = np.array([2, 0, 3, 1])
    a = encode(imgs, cfg, params, "s")
    b = encode(imgs[order], cfg, params, "s")
    np.testing.assert_allclose(b.cls_feat.data, a.cls_feat.data[order], rtol=0, atol=1e-13)
    np.testing.assert_allclose(b.patch_feats.data, a.patch_feats.data[order], rtol=0, atol=1e-13)


def test_encode_rejects_wrong_image_extent(f64):
    cfg = StreamConfig(H=16, W=16, p=8)
    with pytest.raises(ShapeError):
        encode(np.zeros((1, 8, 16, 1)), cfg, _stream_params(cfg), "s")


def test_encode_gradients_match_finite_differences(f64, rng):
    cfg = StreamConfig(H=8, W=8, C_in=2, p=4, C_e=4, depth=2, n_heads_enc=2)
    params = _stream_params(cfg, seed=3)
    img = rng.random((2, 8, 8, 2))
    w_cls = Tensor(rng.normal(size=(2, 4)))
    w_patch = Tensor(rng.normal(size=(2, 4, 4)))

    def loss():
        out = encode(img, cfg, params, "s")
        return T.add(T.sum_all(T.mul(out.cls_feat, w_cls)), T.sum_all(T.mul(out.patch_feats, w_patch)))

    fd_check(loss, list(params.values()), rng, per_param=2)
