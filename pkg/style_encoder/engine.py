"""
style_encoder/engine.py - 风格编码器（参考编码器 + 全局风格 token）

mel (B, T, n_mels)
  → 6 × [Conv2d 3×3 stride 2 → BatchNorm2d → ReLU]
  → GRU(128) 末状态
  → 4 头注意力，key/value 为 tanh(token 表)
  → 线性投影到 256 维风格向量

同一个类既用作可训练编码器，也在冻结后用作预训练目标编码器 E′。
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from corpus.engine import MelSpectrogram
from errors import InputError, NonFiniteActivation, ShapeMismatch
from settings import StyleEncoderConfig

MelLike = Union[MelSpectrogram, np.ndarray, torch.Tensor]


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

class EmbeddingRole(str, Enum):
    PREDICTED_E = "predicted_E"
    TARGET_E_PRIME = "target_E_prime"
    PER_REFERENCE = "per_reference_s_i"


@dataclass
class StyleEmbedding:
    vector: np.ndarray               # (output_dim,)
    source: EmbeddingRole = EmbeddingRole.PER_REFERENCE
    token_weights: Optional[np.ndarray] = None  # (n_heads, n_tokens)


@dataclass
class StyleEmbeddingSet:
    embeddings: List[StyleEmbedding]
    reference_ids: List[str]

    def __len__(self) -> int:
        return len(self.embeddings)

    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.embeddings])


# ---------------------------------------------------------------------------
# 网络
# ---------------------------------------------------------------------------

def _conv_out(size: int, kernel: int, stride: int, n_layers: int) -> int:
    pad = kernel // 2
    for _ in range(n_layers):
        size = (size - kernel + 2 * pad) // stride + 1
    return size


class ReferenceEncoder(nn.Module):
    def __init__(self, n_mels: int, cfg: StyleEncoderConfig) -> None:
        super().__init__()
        channels = [1] + list(cfg.conv_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size=cfg.kernel_size, stride=cfg.stride, padding=cfg.kernel_size // 2)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(c) for c in channels[1:])
        freq = _conv_out(n_mels, cfg.kernel_size, cfg.stride, len(cfg.conv_channels))
        self.gru = nn.GRU(channels[-1] * freq, cfg.gru_units, batch_first=True)

    def forward(self, mels: torch.Tensor) -> torch.Tensor:
        x = mels.unsqueeze(1)  # (B, 1, T, n_mels)
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(x)))
        b, c, t, f = x.shape
        x = x.transpose(1, 2).reshape(b, t, c * f)
        self.gru.flatten_parameters()
        _, h = self.gru(x)
        return h[-1]  # (B, gru_units)


class StyleTokenLayer(nn.Module):
    """多头内容注意力：query 为参考摘要，key/value 为 tanh(tokens)。"""

    def __init__(self, query_dim: int, cfg: StyleEncoderConfig) -> None:
        super().__init__()
        if cfg.output_dim % cfg.n_heads:
            raise InputError(f"output_dim {cfg.output_dim} must be divisible by n_heads {cfg.n_heads}")
        token_dim = cfg.output_dim // cfg.n_heads
        self.n_heads = cfg.n_heads
        self.tokens = nn.Parameter(torch.randn(cfg.n_tokens, token_dim) * 0.5)
        self.w_query = nn.Linear(query_dim, cfg.output_dim, bias=False)
        self.w_key = nn.Linear(token_dim, cfg.output_dim, bias=False)
        self.w_value = nn.Linear(token_dim, cfg.output_dim, bias=False)
        self.out = nn.Linear(cfg.output_dim, cfg.output_dim)

    def forward(self, summary: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        b = summary.shape[0]
        keys = torch.tanh(self.tokens)
        q = self.w_query(summary).view(b, self.n_heads, 1, -1)           # (B, H, 1, d)
        k = self.w_key(keys).view(-1, self.n_heads, q.shape[-1]).transpose(0, 1)  # (H, n_tokens, d)
        v = self.w_value(keys).view(-1, self.n_heads, q.shape[-1]).transpose(0, 1)

        scores = torch.matmul(q, k.transpose(-1, -2).unsqueeze(0)) / q.shape[-1] ** 0.5
        weights = torch.softmax(scores, dim=-1)                           # (B, H, 1, n_tokens)
        heads = torch.matmul(weights, v.unsqueeze(0)).reshape(b, -1)     # (B, H*d)
        return self.out(heads), weights.squeeze(2)


class StyleEncoder(nn.Module):
    def __init__(self, n_mels: int, cfg: Optional[StyleEncoderConfig] = None) -> None:
        super().__init__()
        self.cfg = cfg or StyleEncoderConfig()
        self.n_mels = n_mels
        self.reference = ReferenceEncoder(n_mels, self.cfg)
        self.tokens = StyleTokenLayer(self.cfg.gru_units, self.cfg)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def forward(self, mels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """mels (B, T, n_mels) → (风格向量 (B, output_dim), token 权重 (B, heads, n_tokens))"""
        if mels.dim() != 3 or mels.shape[-1] != self.n_mels or mels.shape[1] < 1:
            raise ShapeMismatch(f"expected (B, T>=1, {self.n_mels}) mel batch, got {tuple(mels.shape)}")
        embedding, weights = self.tokens(self.reference(mels))
        if not torch.isfinite(embedding).all():
            raise NonFiniteActivation("style encoder produced non-finite values")
        return embedding, weights


def _as_tensor(mel: MelLike, like: nn.Module) -> torch.Tensor:
    if isinstance(mel, MelSpectrogram):
        mel = mel.frames
    param = next(like.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    return torch.as_tensor(np.asarray(mel) if not isinstance(mel, torch.Tensor) else mel, dtype=dtype)


# ---------------------------------------------------------------------------
# 单条 / 集合编码
# ---------------------------------------------------------------------------

def encode_style(
    mel: MelLike,
    encoder: StyleEncoder,
    mode: str = "eval",
    source: EmbeddingRole = EmbeddingRole.PER_REFERENCE,
) -> StyleEmbedding:
    """单条 mel 编码。mode 只在本次调用内生效，结束后恢复编码器原来的模式。"""
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be train or eval, got {mode!r}")
    frames = _as_tensor(mel, encoder)
    if frames.dim() != 2:
        raise ShapeMismatch(f"expected a T x n_mels matrix, got {tuple(frames.shape)}")

    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        with torch.no_grad():
            vector, weights = encoder(frames.unsqueeze(0))
    finally:
        encoder.train(was_training)
    return StyleEmbedding(
        vector=vector[0].cpu().numpy(),
        source=source,
        token_weights=weights[0].cpu().numpy(),
    )


def encode_style_set(
    mels: Sequence[MelLike],
    encoder: StyleEncoder,
    mode: str = "eval",
    reference_ids: Optional[Sequence[str]] = None,
) -> StyleEmbeddingSet:
    if not mels:
        raise InputError("cannot encode an empty reference set")
    embeddings = [encode_style(m, encoder, mode) for m in mels]
    ids = list(reference_ids) if reference_ids is not None else [str(i) for i in range(len(mels))]
    return StyleEmbeddingSet(embeddings=embeddings, reference_ids=ids)


# ---------------------------------------------------------------------------
# 冻结
# ---------------------------------------------------------------------------

class FrozenStyleEncoder:
    """
    预训练编码器的只读副本：不是 nn.Module，不会被 model.parameters() 收集；
    前向在 no_grad 下运行，输出对其内部参数而言是常量。
    """

    def __init__(self, encoder: StyleEncoder) -> None:
        self._encoder = copy.deepcopy(encoder)
        self._encoder.eval()
        for p in self._encoder.parameters():
            p.requires_grad_(False)

    @property
    def output_dim(self) -> int:
        return self._encoder.output_dim

    @property
    def n_mels(self) -> int:
        return self._encoder.n_mels

    @property
    def module(self) -> StyleEncoder:
        return self._encoder

    def __call__(self, mels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            embedding, _ = self._encoder(mels)
        return embedding.detach()

    def embed(self, mel: MelLike) -> StyleEmbedding:
        return encode_style(mel, self._encoder, mode="eval", source=EmbeddingRole.TARGET_E_PRIME)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return []

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self._encoder.state_dict().items()}

    def to(self, dtype: torch.dtype) -> "FrozenStyleEncoder":
        self._encoder.to(dtype)
        return self


def freeze(encoder: StyleEncoder) -> FrozenStyleEncoder:
    return FrozenStyleEncoder(encoder)
