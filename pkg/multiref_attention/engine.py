"""
multiref_attention/engine.py - 多参考风格聚合

N 个参考风格向量 S = [s_1 … s_N] 通过一个可学习的查询种子 Q′ 做缩放点积注意力：

    Q = Q′ W_q,  K = S W_k,  V = S W_v
    w = softmax( f(Q) f(K)ᵀ / √d_m )
    E = Σ_i w_i · f(V_i)

f 为打分前的变换（默认恒等，可配置为共享 tanh）。
无注意力的系统用均值聚合代替。
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from errors import DimensionMismatch, InputError, NonFiniteScore
from settings import AttentionConfig
from style_encoder.engine import StyleEmbeddingSet

Transform = Callable[[torch.Tensor], torch.Tensor]

SCORE_TRANSFORMS = {
    "identity": lambda x: x,
    "tanh": torch.tanh,
}


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

@dataclass
class AttentionTrace:
    Q: np.ndarray        # (d_m,)
    K: np.ndarray        # (N, d_m)
    V: np.ndarray        # (N, d_v)
    weights: np.ndarray  # (N,)


@dataclass
class FinalStyleEmbedding:
    vector: np.ndarray
    weights: np.ndarray
    trace: Optional[AttentionTrace] = None


# ---------------------------------------------------------------------------
# 纯函数形式
# ---------------------------------------------------------------------------

def scaled_attention(
    query_seed: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    S: torch.Tensor,
    f: Transform = SCORE_TRANSFORMS["identity"],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    S 形状 (N, D) 或 (B, N, D)。返回 (E, weights, Q, K, V)，
    E 为 (d_v,) 或 (B, d_v)，weights 为 (N,) 或 (B, N)。
    """
    if S.dim() not in (2, 3) or S.shape[-2] < 1:
        raise DimensionMismatch(f"expected a non-empty (N, D) or (B, N, D) set, got {tuple(S.shape)}")
    if S.shape[-1] != w_k.shape[0] or S.shape[-1] != w_v.shape[0]:
        raise DimensionMismatch(f"style dim {S.shape[-1]} does not match projections {tuple(w_k.shape)}")
    if query_seed.shape[0] != w_q.shape[0] or w_q.shape[1] != w_k.shape[1]:
        raise DimensionMismatch("query seed / W_q / W_k dimensions are inconsistent")

    d_m = w_k.shape[1]
    Q = query_seed @ w_q          # (d_m,)
    K = S @ w_k                   # (..., N, d_m)
    V = S @ w_v                   # (..., N, d_v)

    logits = (f(K) @ f(Q)) / math.sqrt(d_m)  # (..., N)
    if not torch.isfinite(logits).all():
        raise NonFiniteScore("attention logits are not finite")
    weights = torch.softmax(logits, dim=-1)
    E = (weights.unsqueeze(-1) * f(V)).sum(dim=-2)
    return E, weights, Q, K, V


def mean_aggregate(S: torch.Tensor) -> torch.Tensor:
    """(…, N, D) → (…, D)"""
    if S.dim() not in (2, 3) or S.shape[-2] < 1:
        raise DimensionMismatch(f"expected a non-empty (N, D) or (B, N, D) set, got {tuple(S.shape)}")
    return S.mean(dim=-2)


# ---------------------------------------------------------------------------
# 模块
# ---------------------------------------------------------------------------

class MultiRefAttention(nn.Module):
    def __init__(self, style_dim: int = 256, cfg: Optional[AttentionConfig] = None) -> None:
        super().__init__()
        self.cfg = cfg or AttentionConfig()
        if self.cfg.score_transform not in SCORE_TRANSFORMS:
            raise InputError(f"unknown score transform {self.cfg.score_transform!r}")
        self.style_dim = style_dim
        bound = 1.0 / math.sqrt(self.cfg.d_q)
        self.query_seed = nn.Parameter(torch.empty(self.cfg.d_q).uniform_(-bound, bound))
        self.w_q = nn.Parameter(torch.empty(self.cfg.d_q, self.cfg.d_m))
        self.w_k = nn.Parameter(torch.empty(style_dim, self.cfg.d_m))
        self.w_v = nn.Parameter(torch.empty(style_dim, self.cfg.d_v))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)

    @property
    def transform(self) -> Transform:
        return SCORE_TRANSFORMS[self.cfg.score_transform]

    def forward(self, S: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        E, weights, _, _, _ = scaled_attention(self.query_seed, self.w_q, self.w_k, self.w_v, S, self.transform)
        return E, weights

    def trace(self, S: torch.Tensor) -> Tuple[torch.Tensor, AttentionTrace]:
        E, weights, Q, K, V = scaled_attention(self.query_seed, self.w_q, self.w_k, self.w_v, S, self.transform)
        trace = AttentionTrace(
            Q=Q.detach().cpu().numpy(),
            K=K.detach().cpu().numpy(),
            V=V.detach().cpu().numpy(),
            weights=weights.detach().cpu().numpy(),
        )
        return E, trace


def _set_tensor(S: Union[StyleEmbeddingSet, np.ndarray, torch.Tensor], like: Optional[nn.Module] = None) -> torch.Tensor:
    if isinstance(S, StyleEmbeddingSet):
        S = S.matrix()
    S = torch.as_tensor(S)
    if like is not None:
        S = S.to(next(like.parameters()).dtype)
    return S


def aggregate(
    S: Union[StyleEmbeddingSet, np.ndarray, torch.Tensor],
    attention: MultiRefAttention,
    debug: bool = False,
) -> FinalStyleEmbedding:
    matrix = _set_tensor(S, attention)
    if matrix.dim() != 2:
        raise DimensionMismatch(f"expected an (N, D) style set, got {tuple(matrix.shape)}")
    with torch.no_grad():
        E, trace = attention.trace(matrix)
    return FinalStyleEmbedding(
        vector=E.cpu().numpy(),
        weights=trace.weights,
        trace=trace if debug else None,
    )


def aggregate_mean(S: Union[StyleEmbeddingSet, np.ndarray, torch.Tensor]) -> FinalStyleEmbedding:
    matrix = _set_tensor(S)
    if matrix.dim() != 2:
        raise DimensionMismatch(f"expected an (N, D) style set, got {tuple(matrix.shape)}")
    n = matrix.shape[0]
    return FinalStyleEmbedding(
        vector=mean_aggregate(matrix).cpu().numpy(),
        weights=np.full(n, 1.0 / n),
    )


def format_trace_line(target_id: str, reference_ids: Sequence[str], weights: Sequence[float]) -> str:
    if len(reference_ids) != len(weights):
        raise DimensionMismatch(f"{len(reference_ids)} reference ids for {len(weights)} weights")
    return "|".join([target_id] + [f"{r}:{float(w)!r}" for r, w in zip(reference_ids, weights)])
