import numpy as np
import pytest
import torch

from corpus.engine import MelSpectrogram
from errors import InputError, ShapeMismatch
from style_encoder.engine import (
    EmbeddingRole,
    StyleEncoder,
    encode_style,
    encode_style_set,
    freeze,
)
from settings import StyleEncoderConfig

N_MELS = 20
CFG = StyleEncoderConfig(conv_channels=[8, 8, 16], gru_units=16, n_tokens=4, n_heads=2, output_dim=16)


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return StyleEncoder(N_MELS, CFG)


def _mel(t=24, seed=0):
    return np.random.default_rng(seed).standard_normal((t, N_MELS)).astype(np.float32)


def test_forward_shapes_and_token_weights(encoder):
    emb, weights = encoder(torch.randn(3, 17, N_MELS))
    assert emb.shape == (3, 16)
    assert weights.shape == (3, 2, 4)
    assert torch.all(weights >= 0)
    assert torch.allclose(weights.sum(-1), torch.ones(3, 2))


def test_bad_shapes(encoder):
    with pytest.raises(ShapeMismatch):
        encoder(torch.randn(2, 10, N_MELS + 1))
    with pytest.raises(ShapeMismatch):
        encoder(torch.randn(10, N_MELS))
    with pytest.raises(ShapeMismatch):
        encode_style(torch.randn(1, 10, N_MELS), encoder)


def test_heads_must_divide_output():
    with pytest.raises(InputError):
        StyleEncoder(N_MELS, StyleEncoderConfig(n_heads=3, output_dim=16))


def test_encode_style_is_deterministic_and_restores_mode(encoder):
    encoder.train()
    a = encode_style(MelSpectrogram(frames=_mel()), encoder)
    b = encode_style(_mel(), encoder)
    assert encoder.training
    assert a.vector.shape == (16,)
    assert a.token_weights.shape == (2, 4)
    assert np.array_equal(a.vector, b.vector)
    with pytest.raises(InputError):
        encode_style(_mel(), encoder, mode="infer")


def test_encode_style_set(encoder):
    mels = [_mel(seed=i) for i in range(3)]
    result = encode_style_set(mels, encoder, reference_ids=["x", "y", "z"])
    assert len(result) == 3
    assert result.matrix().shape == (3, 16)
    assert result.reference_ids == ["x", "y", "z"]
    with pytest.raises(InputError):
        encode_style_set([], encoder)


def test_frozen_encoder_is_constant(encoder):
    frozen = freeze(encoder)
    before = frozen.state_dict()

    x = torch.randn(2, 16, N_MELS, requires_grad=True)
    out = frozen(x)
    assert not out.requires_grad
    assert frozen.trainable_parameters() == []
    assert all(not p.requires_grad for p in frozen.module.parameters())

    # 原编码器继续训练不影响冻结副本
    with torch.no_grad():
        for p in encoder.parameters():
            p.add_(1.0)
    after = frozen.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert frozen.embed(_mel()).source is EmbeddingRole.TARGET_E_PRIME
