"""
acoustic/engine.py - 桌面规模的序列到序列声学模型

字符 → Embedding → Conv1d+BN+ReLU → BiLSTM（编码器输出 L × d_enc）
      → 风格向量 E 复制到每个位置后拼接（conditioning = concat_broadcast）
      → 自回归解码：Prenet → LSTMCell → 加性内容注意力 → 每步 r 帧 mel + 停止标记

训练时 teacher forcing 与推理时自由运行走同一条逐步计算路径：
第 k 步的输入是第 k−1 组的最后一帧（k = 0 时为全零帧）。
另含 TPSE 基线用的文本风格预测头。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DimensionMismatch, ShapeMismatch, VocabularyError
from settings import AcousticConfig, DEFAULT_CHARSET

logger = logging.getLogger(__name__)

PAD_ID = 0


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

class Conditioning(str, Enum):
    NONE = "none"
    CONCAT_BROADCAST = "concat_broadcast"


@dataclass
class TextSequence:
    ids: np.ndarray  # (L,) int64，0 保留给 padding
    text: str = ""

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class DecoderOutput:
    mel: torch.Tensor          # (B, S*r, n_mels)
    stop_logits: torch.Tensor  # (B, S)
    alignments: torch.Tensor   # (B, S, L)


@dataclass
class SynthesisResult:
    mel: np.ndarray                 # (T, n_mels)
    stop_step: int
    alignment: np.ndarray           # (steps, L)，每行是注意力单纯形
    waveform: Optional[np.ndarray] = None
    max_steps_exceeded: bool = False
    reference_ids: List[str] = field(default_factory=list)
    attention_weights: Optional[np.ndarray] = None


def text_to_sequence(text: str, charset: str = DEFAULT_CHARSET) -> TextSequence:
    if not text:
        raise VocabularyError("cannot encode an empty character sequence")
    lookup = {ch: i + 1 for i, ch in enumerate(charset)}
    unknown = sorted({ch for ch in text if ch not in lookup})
    if unknown:
        raise VocabularyError(f"characters outside the vocabulary: {''.join(unknown)!r}")
    return TextSequence(ids=np.array([lookup[ch] for ch in text], dtype=np.int64), text=text)


def get_mask_from_lengths(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """True 表示有效位置。"""
    max_len = max_len if max_len is not None else int(lengths.max())
    ids = torch.arange(max_len, device=lengths.device)
    return ids.unsqueeze(0) < lengths.unsqueeze(1)


# ---------------------------------------------------------------------------
# 编码器 / 条件 / 注意力
# ---------------------------------------------------------------------------

class TextEncoder(nn.Module):
    def __init__(self, n_symbols: int, cfg: AcousticConfig) -> None:
        super().__init__()
        self.embedding = nn.Embedding(n_symbols, cfg.embed_dim, padding_idx=PAD_ID)
        self.conv = nn.Conv1d(cfg.embed_dim, cfg.encoder_dim, cfg.encoder_kernel, padding=cfg.encoder_kernel // 2)
        self.norm = nn.BatchNorm1d(cfg.encoder_dim)
        self.lstm = nn.LSTM(cfg.encoder_dim, cfg.encoder_dim // 2, batch_first=True, bidirectional=True)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids).transpose(1, 2)
        x = F.relu(self.norm(self.conv(x))).transpose(1, 2)
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        self.lstm.flatten_parameters()
        outputs, _ = self.lstm(packed)
        outputs, _ = nn.utils.rnn.pad_packed_sequence(outputs, batch_first=True, total_length=ids.shape[1])
        return outputs


def condition_tensor(encoder_outputs: torch.Tensor, E: Optional[torch.Tensor]) -> torch.Tensor:
    """(B, L, d_enc) 与 (B, D) → (B, L, d_enc + D)；E 为 None 时原样返回。"""
    if E is None:
        return encoder_outputs
    if E.dim() != 2 or E.shape[0] != encoder_outputs.shape[0]:
        raise DimensionMismatch(f"style batch {tuple(E.shape)} does not match encoder batch {encoder_outputs.shape[0]}")
    broadcast = E.unsqueeze(1).expand(-1, encoder_outputs.shape[1], -1)
    return torch.cat([encoder_outputs, broadcast], dim=-1)


class ContentAttention(nn.Module):
    """加性注意力：e_j = vᵀ tanh(W h + U m_j)。"""

    def __init__(self, query_dim: int, memory_dim: int, attention_dim: int) -> None:
        super().__init__()
        self.query = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory = nn.Linear(memory_dim, attention_dim)
        self.v = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, h: torch.Tensor, processed_memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        energies = self.v(torch.tanh(self.query(h).unsqueeze(1) + processed_memory)).squeeze(-1)
        energies = energies.masked_fill(~mask, float("-inf"))
        return torch.softmax(energies, dim=-1)


class Prenet(nn.Module):
    def __init__(self, in_dim: int, sizes: List[int], dropout: float) -> None:
        super().__init__()
        dims = [in_dim] + list(sizes)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for linear in self.layers:
            x = F.dropout(F.relu(linear(x)), p=self.dropout, training=self.training)
        return x


# ---------------------------------------------------------------------------
# 声学模型
# ---------------------------------------------------------------------------

class AcousticModel(nn.Module):
    def __init__(
        self,
        n_mels: int,
        cfg: Optional[AcousticConfig] = None,
        charset: str = DEFAULT_CHARSET,
        style_dim: int = 256,
        conditioning: Conditioning = Conditioning.CONCAT_BROADCAST,
    ) -> None:
        super().__init__()
        self.cfg = cfg or AcousticConfig()
        self.n_mels = n_mels
        self.charset = charset
        self.style_dim = style_dim
        self.conditioning = Conditioning(conditioning)
        self.r = self.cfg.reduction_factor

        memory_dim = self.cfg.encoder_dim + (style_dim if self.conditioning is Conditioning.CONCAT_BROADCAST else 0)
        self.memory_dim = memory_dim
        self.encoder = TextEncoder(len(charset) + 1, self.cfg)
        self.prenet = Prenet(n_mels, self.cfg.prenet_dims, self.cfg.prenet_dropout)
        self.cell = nn.LSTMCell(self.cfg.prenet_dims[-1] + memory_dim, self.cfg.decoder_dim)
        self.attention = ContentAttention(self.cfg.decoder_dim, memory_dim, self.cfg.attention_dim)
        self.frame_proj = nn.Linear(self.cfg.decoder_dim + memory_dim, n_mels * self.r)
        self.stop_proj = nn.Linear(self.cfg.decoder_dim + memory_dim, 1)

    @property
    def encoder_dim(self) -> int:
        return self.cfg.encoder_dim

    def encode(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if ids.numel() == 0 or int(lengths.min()) < 1:
            raise VocabularyError("text sequences must be non-empty")
        if int(ids.max()) > len(self.charset) or int(ids.min()) < 0:
            raise VocabularyError("character id outside the vocabulary")
        return self.encoder(ids, lengths)

    def condition(self, encoder_outputs: torch.Tensor, E: Optional[torch.Tensor]) -> torch.Tensor:
        if self.conditioning is Conditioning.NONE:
            return encoder_outputs
        if E is None or E.shape[-1] != self.style_dim:
            raise DimensionMismatch(f"conditioning needs a {self.style_dim}-dim style embedding")
        return condition_tensor(encoder_outputs, E)

    # -- 逐步解码 --------------------------------------------------------

    def _init_state(self, memory: torch.Tensor):
        b = memory.shape[0]
        zeros = memory.new_zeros
        return (zeros(b, self.cfg.decoder_dim), zeros(b, self.cfg.decoder_dim), zeros(b, self.memory_dim))

    def _step(self, prev_frame, state, memory, processed_memory, mask):
        h, c, context = state
        h, c = self.cell(torch.cat([self.prenet(prev_frame), context], dim=-1), (h, c))
        alignment = self.attention(h, processed_memory, mask)
        context = torch.bmm(alignment.unsqueeze(1), memory).squeeze(1)
        hidden = torch.cat([h, context], dim=-1)
        frames = self.frame_proj(hidden).view(-1, self.r, self.n_mels)
        return frames, self.stop_proj(hidden).squeeze(-1), alignment, (h, c, context)

    def decode_teacher_forced(
        self,
        memory: torch.Tensor,
        memory_lengths: torch.Tensor,
        target: torch.Tensor,
    ) -> DecoderOutput:
        b, t, n = target.shape
        if n != self.n_mels:
            raise ShapeMismatch(f"target has {n} mel channels, model expects {self.n_mels}")
        steps = math.ceil(t / self.r)
        padded = F.pad(target, (0, 0, 0, steps * self.r - t))
        mask = get_mask_from_lengths(memory_lengths, memory.shape[1])
        processed = self.attention.memory(memory)

        state = self._init_state(memory)
        prev = memory.new_zeros(b, self.n_mels)
        frames, stops, aligns = [], [], []
        for k in range(steps):
            out, stop, align, state = self._step(prev, state, memory, processed, mask)
            frames.append(out)
            stops.append(stop)
            aligns.append(align)
            prev = padded[:, (k + 1) * self.r - 1, :]
        return DecoderOutput(
            mel=torch.cat(frames, dim=1)[:, :t],
            stop_logits=torch.stack(stops, dim=1),
            alignments=torch.stack(aligns, dim=1),
        )

    def decode_free_running(
        self,
        memory: torch.Tensor,
        memory_lengths: torch.Tensor,
        max_decoder_steps: Optional[int] = None,
    ) -> Tuple[DecoderOutput, bool]:
        """返回 (输出, 是否触达步数上限)。上限按帧数计，步数 = 上限 // r。"""
        max_frames = max_decoder_steps or self.cfg.max_decoder_steps
        max_steps = max(1, max_frames // self.r)
        b = memory.shape[0]
        mask = get_mask_from_lengths(memory_lengths, memory.shape[1])
        processed = self.attention.memory(memory)

        state = self._init_state(memory)
        prev = memory.new_zeros(b, self.n_mels)
        frames, stops, aligns = [], [], []
        finished = torch.zeros(b, dtype=torch.bool)
        for _ in range(max_steps):
            out, stop, align, state = self._step(prev, state, memory, processed, mask)
            frames.append(out)
            stops.append(stop)
            aligns.append(align)
            prev = out[:, -1, :]
            finished |= torch.sigmoid(stop) > self.cfg.stop_threshold
            if bool(finished.all()):
                break
        output = DecoderOutput(
            mel=torch.cat(frames, dim=1),
            stop_logits=torch.stack(stops, dim=1),
            alignments=torch.stack(aligns, dim=1),
        )
        return output, not bool(finished.all())

    def forward(
        self,
        ids: torch.Tensor,
        lengths: torch.Tensor,
        target: torch.Tensor,
        style: Optional[torch.Tensor] = None,
    ) -> DecoderOutput:
        memory = self.condition(self.encode(ids, lengths), style)
        return self.decode_teacher_forced(memory, lengths, target)


class StylePredictionHead(nn.Module):
    """TPSE：编码器输出按有效长度取均值 → 两层 MLP → 风格向量。"""

    def __init__(self, encoder_dim: int, hidden: int = 256, style_dim: int = 256) -> None:
        super().__init__()
        self.encoder_dim = encoder_dim
        self.hidden = nn.Linear(encoder_dim, hidden)
        self.out = nn.Linear(hidden, style_dim)

    def forward(self, encoder_outputs: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        if encoder_outputs.shape[-1] != self.encoder_dim or encoder_outputs.shape[1] < 1:
            raise DimensionMismatch(f"expected (B, L>=1, {self.encoder_dim}) encoder outputs, got {tuple(encoder_outputs.shape)}")
        if lengths is None:
            pooled = encoder_outputs.mean(dim=1)
        else:
            mask = get_mask_from_lengths(lengths, encoder_outputs.shape[1]).unsqueeze(-1).to(encoder_outputs.dtype)
            pooled = (encoder_outputs * mask).sum(dim=1) / lengths.unsqueeze(-1).to(encoder_outputs.dtype)
        return self.out(torch.tanh(self.hidden(pooled)))


# ---------------------------------------------------------------------------
# 损失
# ---------------------------------------------------------------------------

def mel_loss(predicted: torch.Tensor, target: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """有效帧上的均方误差。"""
    if predicted.shape != target.shape:
        raise ShapeMismatch(f"predicted {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    mask = get_mask_from_lengths(lengths, target.shape[1]).unsqueeze(-1).to(predicted.dtype)
    return (((predicted - target) ** 2) * mask).sum() / (mask.sum() * target.shape[-1])


def stop_targets(mel_lengths: torch.Tensor, steps: int, r: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """(targets, mask)：含最后一帧的那一步及之后为 1；有效步到最后一帧所在步为止。"""
    last_step = torch.div(mel_lengths + r - 1, r, rounding_mode="floor") - 1
    ids = torch.arange(steps).unsqueeze(0)
    targets = (ids >= last_step.unsqueeze(1)).float()
    mask = ids <= last_step.unsqueeze(1)
    return targets, mask


def stop_loss(stop_logits: torch.Tensor, mel_lengths: torch.Tensor, r: int) -> torch.Tensor:
    targets, mask = stop_targets(mel_lengths, stop_logits.shape[1], r)
    losses = F.binary_cross_entropy_with_logits(stop_logits, targets.to(stop_logits.dtype), reduction="none")
    return (losses * mask).sum() / mask.sum()


# ---------------------------------------------------------------------------
# 单条接口（eval 模式）
# ---------------------------------------------------------------------------

def _ids_tensor(x: Union[TextSequence, np.ndarray]) -> Tuple[torch.Tensor, torch.Tensor]:
    ids = x.ids if isinstance(x, TextSequence) else np.asarray(x, dtype=np.int64)
    if ids.size == 0:
        raise VocabularyError("cannot encode an empty character sequence")
    t = torch.as_tensor(ids, dtype=torch.long).unsqueeze(0)
    return t, torch.tensor([t.shape[1]])


def encode_text(x: TextSequence, model: AcousticModel) -> np.ndarray:
    ids, lengths = _ids_tensor(x)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model.encode(ids, lengths)[0].cpu().numpy()
    finally:
        model.train(was_training)


def condition(encoder_outputs, E) -> np.ndarray:
    enc = torch.as_tensor(np.asarray(encoder_outputs))
    style = torch.as_tensor(np.asarray(E), dtype=enc.dtype)
    if style.dim() != 1:
        raise DimensionMismatch(f"expected a style vector, got shape {tuple(style.shape)}")
    return condition_tensor(enc.unsqueeze(0), style.unsqueeze(0))[0].numpy()


def decode(
    conditioned,
    model: AcousticModel,
    target_mel: Optional[np.ndarray] = None,
    max_decoder_steps: Optional[int] = None,
) -> Tuple[SynthesisResult, Optional[float]]:
    """有 target 时 teacher forcing 并返回 L_mel；否则自由运行，L_mel 为 None。"""
    param = next(model.parameters())
    memory = torch.as_tensor(np.asarray(conditioned), dtype=param.dtype).unsqueeze(0)
    if memory.shape[1] < 1 or memory.shape[2] != model.memory_dim:
        raise ShapeMismatch(f"conditioned input must be (L>=1, {model.memory_dim}), got {tuple(memory.shape[1:])}")
    lengths = torch.tensor([memory.shape[1]])

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if target_mel is not None:
                target = torch.as_tensor(np.asarray(target_mel), dtype=param.dtype).unsqueeze(0)
                out = model.decode_teacher_forced(memory, lengths, target)
                l_mel = float(mel_loss(out.mel, target, torch.tensor([target.shape[1]])))
                exceeded = False
            else:
                out, exceeded = model.decode_free_running(memory, lengths, max_decoder_steps)
                l_mel = None
    finally:
        model.train(was_training)

    if exceeded:
        logger.warning("decoder hit max_decoder_steps without a stop token")
    steps = out.stop_logits.shape[1]
    return (
        SynthesisResult(
            mel=out.mel[0].cpu().numpy(),
            stop_step=steps,
            alignment=out.alignments[0].cpu().numpy(),
            max_steps_exceeded=exceeded,
        ),
        l_mel,
    )


def predict_style_from_text(encoder_outputs, head: StylePredictionHead) -> np.ndarray:
    enc = torch.as_tensor(np.asarray(encoder_outputs), dtype=next(head.parameters()).dtype)
    if enc.dim() != 2:
        raise DimensionMismatch(f"expected (L, d_enc) encoder outputs, got {tuple(enc.shape)}")
    with torch.no_grad():
        return head(enc.unsqueeze(0))[0].cpu().numpy()
