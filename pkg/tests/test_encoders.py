"""Modality encoder tests: shapes, attention algebra, determinism."""

import numpy as np
import pytest

from trimodal.autograd import Tensor
from trimodal.encoders import (
    EncoderConfig,
    ImageEncoder,
    ModalityEncoders,
    SelfAttention,
    TabularEncoder,
    pool_tokens,
)


def test_config_flat_width():
    cfg = EncoderConfig(tokens=5, d_tok=3)
    assert cfg.d == 15


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(tokens=0),
        dict(d_tok=0),
        dict(heads=3, d_attn=64),   # 64 not divisible by 3
        dict(heads=16, d_attn=64),  # head_dim 4 < 8
    ],
)
def test_config_validate_rejects(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs).validate()


def test_image_encoder_token_shape(rng):
    cfg = EncoderConfig()
    enc = ImageEncoder(rng, cfg)
    out = enc(Tensor(rng.standard_normal((2, 1, 16, 16, 16)).astype(np.float32)))
    assert out.data.shape == (2, cfg.tokens, cfg.d_tok)


def test_image_encoder_handles_8cube(rng):
    # three stride-2 halvings take 8^3 down to a single spatial cell
    enc = ImageEncoder(rng, EncoderConfig())
    out = enc(Tensor(rng.standard_normal((3, 1, 8, 8, 8)).astype(np.float32)))
    assert out.data.shape == (3, 8, 8)


def test_image_encoder_rejects_flat_input(rng):
    enc = ImageEncoder(rng, EncoderConfig())
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((2, 64), dtype=np.float32)))


def test_tabular_encoder_shape_and_width_check(rng):
    cfg = EncoderConfig()
    enc = TabularEncoder(rng, cfg)
    out = enc(Tensor(rng.standard_normal((5, 7)).astype(np.float32)))
    assert out.data.shape == (5, cfg.tokens, cfg.d_tok)
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((5, 6), dtype=np.float32)))


def test_self_attention_preserves_shape(rng):
    cfg = EncoderConfig()
    attn = SelfAttention(rng, cfg)
    x = Tensor(rng.standard_normal((2, cfg.tokens, cfg.d_tok)).astype(np.float32))
    out = attn(x)
    assert out.data.shape == x.data.shape


def test_self_attention_weights_are_row_stochastic(rng):
    cfg = EncoderConfig()
    attn = SelfAttention(rng, cfg)
    x = Tensor(rng.standard_normal((3, cfg.tokens, cfg.d_tok)).astype(np.float32))
    _, w = attn(x, return_weights=True)
    assert w.shape == (3, cfg.heads, cfg.tokens, cfg.tokens)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-5)
    assert (w >= 0).all()


def test_self_attention_output_is_normalized(rng):
    # fresh LayerNorm has identity affine, so every token vector comes out
    # with zero mean and unit variance along the feature axis
    cfg = EncoderConfig()
    attn = SelfAttention(rng, cfg)
    x = Tensor(rng.standard_normal((4, cfg.tokens, cfg.d_tok)).astype(np.float32))
    out = attn(x).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-2)


def test_pool_tokens_hand_value():
    f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
    np.testing.assert_allclose(pool_tokens(f).data, [[2.0, 3.0]])


def test_modality_encoders_accept_plain_arrays(rng):
    cfg = EncoderConfig()
    enc = ModalityEncoders(rng, cfg)
    mri = rng.standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    pet = rng.standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    clin = rng.standard_normal((2, 7)).astype(np.float32)
    f_m, f_p, f_c = enc(mri, pet, clin)
    for f in (f_m, f_p, f_c):
        assert f.data.shape == (2, cfg.tokens, cfg.d_tok)


def test_modality_encoders_deterministic_across_builds():
    cfg = EncoderConfig()
    mri = np.random.default_rng(3).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    pet = np.zeros_like(mri)
    clin = np.random.default_rng(4).standard_normal((2, 7)).astype(np.float32)
    outs = []
    for _ in range(2):
        enc = ModalityEncoders(np.random.default_rng(7), cfg)
        outs.append([f.data.copy() for f in enc(mri, pet, clin)])
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a, b)


def test_encoder_gradients_reach_conv_weights(rng):
    enc = ImageEncoder(rng, EncoderConfig())
    x = Tensor(rng.standard_normal((2, 1, 8, 8, 8)).astype(np.float32))
    enc(x).sum().backward()
    assert enc.c1.weight.grad is not None
    assert np.abs(enc.c1.weight.grad).max() > 0
