"""
pipeline/engine.py - 训练与合成编排

两阶段训练：
  1. pretrain_style_system：目标音频即参考的单参考 GST 系统，得到预训练风格编码器；
  2. train_system：按消融矩阵中的一行训练，多参考输入 + 可选 MSE / MI 约束，
     E′ 由冻结的预训练编码器在目标音频上计算。

运行目录布局：
  config.txt  manifest.txt  wavs/  mels/<id>.mel
  embeddings.txt  selection_index.txt
  checkpoints/pretrain.pt  checkpoints/<system>.pt
  pretrain_records.log  records.log  mi_trajectory.log  attention.log
  samples/<name>.wav|.mel|.align.txt  samples/index.txt
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel

from acoustic.engine import (
    AcousticModel,
    Conditioning,
    StylePredictionHead,
    SynthesisResult,
    mel_loss,
    stop_loss,
    text_to_sequence,
)
from acoustic.vocoder import invert_mel
from corpus.engine import (
    Manifest,
    MelSpectrogram,
    Utterance,
    extract_manifest_features,
    load_manifest,
    load_manifest_features,
    mel_cache_path,
    normalize_text,
    save_manifest,
    save_wav,
    silence_level,
    write_mel,
)
from corpus.toy import generate_toy_corpus
from errors import ConfigMismatch, DataError, DivergenceDetected, MissingFile, UnknownConfig
from mi_constraint.engine import LossBreakdown, MIEstimator, style_constraint_loss
from multiref_attention.engine import MultiRefAttention, format_trace_line, mean_aggregate
from pipeline.checkpoint import Checkpoint, load_checkpoint, save_checkpoint, snapshot
from pipeline.systems import PRETRAIN_SYSTEM_ID, needs_pretrained, resolve_system, uses_references, uses_style
from semantics.engine import (
    EmbeddingCache,
    ReferenceSet,
    build_selection_index,
    embed_manifest,
    embedder_from_name,
    load_embedding_cache,
    load_selection_index,
    save_embedding_cache,
    save_selection_index,
    select_for_text,
)
from settings import Architecture, ExperimentConfig, build_config, config_hash, read_pairs, write_config
from style_encoder.engine import FrozenStyleEncoder, StyleEncoder, freeze

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
MANIFEST_FILE = "manifest.txt"
EMBEDDINGS_FILE = "embeddings.txt"
INDEX_FILE = "selection_index.txt"
CHECKPOINT_DIR = "checkpoints"
PRETRAIN_CHECKPOINT = "pretrain.pt"
PRETRAIN_RECORDS = "pretrain_records.log"
RECORDS_FILE = "records.log"
MI_TRAJECTORY_FILE = "mi_trajectory.log"
ATTENTION_FILE = "attention.log"
SAMPLES_DIR = "samples"
SAMPLES_INDEX = "index.txt"
LOSS_TAIL = 20
RECORD_FIELDS = ("l_mel", "mse_term", "mi_term", "l_s", "l_total", "l_mi_estimator", "l_stop")


# ---------------------------------------------------------------------------
# 记录
# ---------------------------------------------------------------------------

class TrainStepRecord(BaseModel):
    step: int
    losses: LossBreakdown
    attention: Optional[List[float]] = None
    timing: Optional[float] = None  # 只进日志，不写入 records.log

    def to_line(self) -> str:
        parts = [f"step={self.step}"]
        parts += [f"{name}={getattr(self.losses, name)!r}" for name in RECORD_FIELDS]
        attn = ",".join(repr(w) for w in self.attention) if self.attention else "-"
        parts.append(f"attn={attn}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "TrainStepRecord":
        fields = dict(item.split("=", 1) for item in line.split())
        losses = LossBreakdown(**{name: float(fields[name]) for name in RECORD_FIELDS})
        attn = fields.get("attn", "-")
        return cls(
            step=int(fields["step"]),
            losses=losses,
            attention=None if attn == "-" else [float(w) for w in attn.split(",")],
        )


def read_records(path: Path) -> List[TrainStepRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    return [TrainStepRecord.from_line(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# 随机性
# ---------------------------------------------------------------------------

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------------------
# 模型容器
# ---------------------------------------------------------------------------

class StyleSystem(nn.Module):
    """一个系统的全部可训练模块；不存在的模块为 None。"""

    def __init__(self, cfg: ExperimentConfig) -> None:
        super().__init__()
        system = cfg.system
        n_mels = cfg.features.n_mels
        style_dim = cfg.style.output_dim
        arch = system.architecture

        conditioning = Conditioning.NONE if arch is Architecture.TACOTRON2 else Conditioning.CONCAT_BROADCAST
        self.architecture = arch
        self.system = system
        self.acoustic = AcousticModel(n_mels, cfg.acoustic, cfg.features.charset, style_dim, conditioning)

        self.style_encoder: Optional[StyleEncoder] = None
        self.attention: Optional[MultiRefAttention] = None
        self.head: Optional[StylePredictionHead] = None
        if arch in (Architecture.GST, Architecture.U_MRTTS, Architecture.C_MRTTS):
            self.style_encoder = StyleEncoder(n_mels, cfg.style)
        if arch in (Architecture.U_MRTTS, Architecture.C_MRTTS) and system.use_attention:
            if cfg.attention.d_v != style_dim:
                raise ConfigMismatch(f"attention.d_v={cfg.attention.d_v} must equal style.output_dim={style_dim}")
            self.attention = MultiRefAttention(style_dim, cfg.attention)
        if arch is Architecture.TPSE_GST:
            self.head = StylePredictionHead(cfg.acoustic.encoder_dim, cfg.acoustic.head_hidden, style_dim)

    def modules_by_name(self) -> Dict[str, Optional[nn.Module]]:
        return {
            "acoustic": self.acoustic,
            "style_encoder": self.style_encoder,
            "attention": self.attention,
            "head": self.head,
        }

    def load_modules(self, ckpt: Checkpoint) -> None:
        for name, module in self.modules_by_name().items():
            if module is None:
                continue
            if not ckpt.has(name):
                raise UnknownConfig(f"checkpoint {ckpt.system_id} has no {name} weights")
            try:
                module.load_state_dict(ckpt.modules[name])
            except RuntimeError as e:
                raise UnknownConfig(f"checkpoint {ckpt.system_id} is incompatible with {name}: {e}")

    def style(
        self,
        encoder_outputs: torch.Tensor,
        text_lengths: torch.Tensor,
        target_ref: torch.Tensor,
        refs: Optional[torch.Tensor],
    ) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """返回 (E, 参考注意力权重)。refs 形状 (B, N, T, n_mels)。"""
        arch = self.architecture
        if arch is Architecture.TACOTRON2:
            return None, None
        if arch is Architecture.TPSE_GST:
            return self.head(encoder_outputs, text_lengths), None
        if arch is Architecture.GST:
            return self.style_encoder(target_ref)[0], None

        b, n, t, m = refs.shape
        S = self.style_encoder(refs.reshape(b * n, t, m))[0].view(b, n, -1)
        if self.attention is not None:
            return self.attention(S)
        return mean_aggregate(S), None


# ---------------------------------------------------------------------------
# 数据
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: List[str]
    text_ids: torch.Tensor     # (B, L)
    text_lengths: torch.Tensor
    mels: torch.Tensor         # (B, T, n_mels)
    mel_lengths: torch.Tensor
    target_ref: torch.Tensor   # (B, T_ref, n_mels)
    refs: Optional[torch.Tensor] = None  # (B, N, T_ref, n_mels)
    reference_ids: List[List[str]] = field(default_factory=list)


def fit_frames(frames: np.ndarray, length: int, pad_value: float) -> np.ndarray:
    """截断或用静音电平补齐到 length 帧。"""
    if frames.shape[0] >= length:
        return frames[:length]
    pad = np.full((length - frames.shape[0], frames.shape[1]), pad_value, dtype=np.float32)
    return np.concatenate([frames, pad], axis=0)


class TrainingData:
    def __init__(
        self,
        manifest: Manifest,
        cfg: ExperimentConfig,
        selection_index: Optional[Mapping[str, ReferenceSet]] = None,
    ) -> None:
        missing = [u.id for u in manifest if u.mel is None]
        if missing:
            raise DataError(f"{len(missing)} utterances have no mel spectrogram (first: {missing[0]})")
        self.manifest = manifest
        self.cfg = cfg
        self.index = selection_index or {}
        self.pad_value = silence_level(cfg.features)
        self.sequences = {u.id: text_to_sequence(u.text, cfg.features.charset).ids for u in manifest}

        system = cfg.system
        if uses_references(system):
            for utt in manifest:
                refs = self.index.get(utt.id)
                if refs is None:
                    raise DataError(f"selection index has no entry for {utt.id}")
                if len(refs.references) < system.n_references:
                    raise DataError(f"{utt.id}: index holds {len(refs.references)} references, system needs {system.n_references}")
                for ref_id in refs.reference_ids[: system.n_references]:
                    if ref_id not in manifest:
                        raise DataError(f"reference {ref_id} of {utt.id} is not in the manifest")

    def ref_frames(self, utterance_id: str) -> np.ndarray:
        mel = self.manifest.get(utterance_id).mel
        return fit_frames(mel.frames, self.cfg.system.max_ref_frames, self.pad_value)

    def collate(self, ids: Sequence[str]) -> Batch:
        system = self.cfg.system
        utts = [self.manifest.get(i) for i in ids]
        seqs = [self.sequences[i] for i in ids]
        max_l = max(len(s) for s in seqs)
        text_ids = np.zeros((len(ids), max_l), dtype=np.int64)
        for row, seq in enumerate(seqs):
            text_ids[row, : len(seq)] = seq

        max_t = max(u.mel.n_frames for u in utts)
        mels = np.stack([fit_frames(u.mel.frames, max_t, self.pad_value) for u in utts])
        target_ref = np.stack([self.ref_frames(i) for i in ids])

        refs = None
        reference_ids: List[List[str]] = []
        if uses_references(system):
            reference_ids = [self.index[i].reference_ids[: system.n_references] for i in ids]
            refs = torch.from_numpy(np.stack([np.stack([self.ref_frames(r) for r in row]) for row in reference_ids]))

        return Batch(
            ids=list(ids),
            text_ids=torch.from_numpy(text_ids),
            text_lengths=torch.tensor([len(s) for s in seqs]),
            mels=torch.from_numpy(mels),
            mel_lengths=torch.tensor([u.mel.n_frames for u in utts]),
            target_ref=torch.from_numpy(target_ref),
            refs=refs,
            reference_ids=reference_ids,
        )

    def batches(self, batch_size: int, seed: int) -> Iterator[Batch]:
        """按种子打乱、循环不止的 batch 流；顺序只取决于 seed。"""
        rng = np.random.default_rng(seed)
        ids = self.manifest.ids()
        batch_size = min(batch_size, len(ids))
        while True:
            order = [ids[i] for i in rng.permutation(len(ids))]
            for start in range(0, len(order) - batch_size + 1, batch_size):
                yield self.collate(order[start:start + batch_size])


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: List[TrainStepRecord]
    model: StyleSystem
    frozen: Optional[FrozenStyleEncoder] = None
    estimator: Optional[MIEstimator] = None


class _RunLogs:
    """records.log / mi_trajectory.log / attention.log 的追加写。"""

    def __init__(self, run_dir: Optional[Path], records_name: str, trajectory: bool, attention: bool) -> None:
        self.files = {}
        if run_dir is None:
            return
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.files["records"] = (run_dir / records_name).open("w", encoding="utf-8")
        if trajectory:
            f = (run_dir / MI_TRAJECTORY_FILE).open("w", encoding="utf-8")
            f.write("# step\tl_mi_estimator\tmi_term\n")
            self.files["trajectory"] = f
        if attention:
            self.files["attention"] = (run_dir / ATTENTION_FILE).open("w", encoding="utf-8")

    def write(self, name: str, line: str) -> None:
        f = self.files.get(name)
        if f is not None:
            f.write(line + "\n")

    def close(self) -> None:
        for f in self.files.values():
            f.close()


def _check_finite(step: int, **values: torch.Tensor) -> None:
    for name, value in values.items():
        if not torch.isfinite(value).all():
            raise DivergenceDetected(step, f"({name})")


def train_system(
    manifest: Manifest,
    selection_index: Optional[Mapping[str, ReferenceSet]],
    pretrained: Optional[Checkpoint],
    cfg: ExperimentConfig,
    run_dir: Optional[Path] = None,
    records_name: str = RECORDS_FILE,
    on_record: Optional[Callable[[TrainStepRecord], None]] = None,
) -> TrainResult:
    system = resolve_system(cfg.system.system_id, cfg.system)
    cfg = cfg.model_copy(update={"system": system})
    if needs_pretrained(system) and pretrained is None:
        raise ConfigMismatch(f"{system.system_id} uses a style constraint and needs a pre-trained encoder")
    if system.use_mi and system.batch_size < 2:
        raise ConfigMismatch("the MI constraint needs batch_size >= 2")

    data = TrainingData(manifest, cfg, selection_index)
    seed_everything(system.seed)
    model = StyleSystem(cfg)

    frozen: Optional[FrozenStyleEncoder] = None
    if pretrained is not None and uses_style(system) and system.architecture is not Architecture.GST:
        pre_encoder = StyleEncoder(cfg.features.n_mels, cfg.style)
        try:
            pre_encoder.load_state_dict(pretrained.modules["style_encoder"])
        except (KeyError, RuntimeError) as e:
            raise ConfigMismatch(f"pre-trained checkpoint has no compatible style encoder: {e}")
        frozen = freeze(pre_encoder)
        if system.init_from_pretrained and model.style_encoder is not None:
            model.style_encoder.load_state_dict(pretrained.modules["style_encoder"])

    estimator: Optional[MIEstimator] = None
    if frozen is not None and min(system.batch_size, len(manifest)) >= 2:
        estimator = MIEstimator(cfg.style.output_dim, cfg.style.output_dim, cfg.mi)

    optimizer = torch.optim.Adam(model.parameters(), lr=system.lr)
    logs = _RunLogs(run_dir, records_name, trajectory=estimator is not None, attention=system.debug_trace)
    stream = data.batches(system.batch_size, system.seed)
    records: List[TrainStepRecord] = []
    r = cfg.acoustic.reduction_factor

    logger.info(
        "training %s (%s) for %d steps: attention=%s mse=%s mi=%s N=%d",
        system.system_id, system.architecture.value, system.steps,
        system.use_attention, system.use_mse, system.use_mi, system.n_references,
    )
    try:
        for step in range(1, system.steps + 1):
            started = time.perf_counter()
            batch = next(stream)
            model.train()

            enc = model.acoustic.encode(batch.text_ids, batch.text_lengths)
            E, weights = model.style(enc, batch.text_lengths, batch.target_ref, batch.refs)
            memory = model.acoustic.condition(enc, E)
            out = model.acoustic.decode_teacher_forced(memory, batch.text_lengths, batch.mels)
            l_mel = mel_loss(out.mel, batch.mels, batch.mel_lengths)
            l_stop = stop_loss(out.stop_logits, batch.mel_lengths, r)

            l_s = l_mel.new_zeros(())
            mse_term = mi_term = l_mi_estimator = 0.0
            if frozen is not None and E is not None:
                E_prime = frozen(batch.target_ref)
                if estimator is not None:
                    l_mi_estimator = estimator.update(E.detach(), E_prime)
                    monitored = estimator.estimate(E.detach(), E_prime).value
                    logs.write("trajectory", f"{step}\t{l_mi_estimator!r}\t{monitored!r}")
                terms = style_constraint_loss(
                    E, E_prime, estimator, system.use_mse, system.use_mi, system.mse_weight, system.mi_weight
                )
                l_s, mse_term, mi_term = terms.l_s, terms.mse_term, terms.mi_term

            total = l_mel + l_s + system.stop_weight * l_stop
            _check_finite(step, l_mel=l_mel, l_s=l_s, l_stop=l_stop)

            optimizer.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), system.grad_clip)
            optimizer.step()

            attention_summary = None
            if weights is not None:
                w = weights.detach()
                attention_summary = [float(v) for v in w.mean(dim=0)]
                if system.debug_trace:
                    for row, target_id in enumerate(batch.ids):
                        logs.write("attention", format_trace_line(target_id, batch.reference_ids[row], w[row].tolist()))

            record = TrainStepRecord(
                step=step,
                losses=LossBreakdown.compose(
                    l_mel=float(l_mel),
                    mse_term=mse_term,
                    mi_term=mi_term,
                    l_mi_estimator=l_mi_estimator,
                    l_stop=float(l_stop),
                ),
                attention=attention_summary,
                timing=time.perf_counter() - started,
            )
            records.append(record)
            logs.write("records", record.to_line())
            if on_record is not None:
                on_record(record)
            if step % system.log_every == 0 or step == system.steps:
                logger.info(
                    "[%s] step %d/%d l_mel=%.4f l_s=%.4f l_stop=%.4f (%.3fs)",
                    system.system_id, step, system.steps, record.losses.l_mel,
                    record.losses.l_s, record.losses.l_stop, record.timing,
                )
    except DivergenceDetected:
        logger.warning("%s diverged; stopping", system.system_id)
        raise
    finally:
        logs.close()

    tail = [rec.losses.l_mel for rec in records[-LOSS_TAIL:]]
    ckpt = snapshot(model.modules_by_name(), system.steps, cfg, config_hash(cfg), tail)
    return TrainResult(checkpoint=ckpt, records=records, model=model, frozen=frozen, estimator=estimator)


def pretrain_style_system(
    manifest: Manifest,
    cfg: ExperimentConfig,
    run_dir: Optional[Path] = None,
) -> Checkpoint:
    """单参考 GST（目标音频作参考）在成对数据上训练；其风格编码器即冻结 E′ 的来源。"""
    system = resolve_system(PRETRAIN_SYSTEM_ID, cfg.system)
    pre_cfg = cfg.model_copy(update={"system": system})
    result = train_system(manifest, None, None, pre_cfg, run_dir=run_dir, records_name=PRETRAIN_RECORDS)
    return result.checkpoint


# ---------------------------------------------------------------------------
# 模型重建 / 风格向量导出
# ---------------------------------------------------------------------------

def load_system(ckpt: Checkpoint, cfg: Optional[ExperimentConfig] = None) -> Tuple[StyleSystem, ExperimentConfig]:
    ckpt_cfg = ckpt.config
    if cfg is not None and config_hash(cfg) != ckpt.config_hash:
        raise UnknownConfig(
            f"checkpoint {ckpt.system_id} was trained with config {ckpt.config_hash}, got {config_hash(cfg)}"
        )
    model = StyleSystem(ckpt_cfg)
    model.load_modules(ckpt)
    model.eval()
    return model, ckpt_cfg


def load_frozen(pretrained: Checkpoint, cfg: ExperimentConfig) -> FrozenStyleEncoder:
    encoder = StyleEncoder(cfg.features.n_mels, cfg.style)
    encoder.load_state_dict(pretrained.modules["style_encoder"])
    return freeze(encoder)


def style_pairs(
    model: StyleSystem,
    frozen: FrozenStyleEncoder,
    manifest: Manifest,
    cfg: ExperimentConfig,
    selection_index: Optional[Mapping[str, ReferenceSet]] = None,
    batch_size: int = 16,
) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """对清单中每条语句导出 (E, E′)，eval 模式，按清单顺序。"""
    data = TrainingData(manifest, cfg, selection_index)
    ids = manifest.ids()
    E_rows, E_prime_rows = [], []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            batch = data.collate(ids[start:start + batch_size])
            enc = model.acoustic.encode(batch.text_ids, batch.text_lengths)
            E, _ = model.style(enc, batch.text_lengths, batch.target_ref, batch.refs)
            if E is None:
                raise ConfigMismatch(f"{cfg.system.system_id} has no style embedding")
            E_rows.append(E.numpy())
            E_prime_rows.append(frozen(batch.target_ref).numpy())
    return ids, np.concatenate(E_rows), np.concatenate(E_prime_rows)


# ---------------------------------------------------------------------------
# 合成
# ---------------------------------------------------------------------------

def synthesize(
    text: str,
    checkpoint: Checkpoint,
    manifest: Manifest,
    selection_index: Optional[Mapping[str, ReferenceSet]] = None,
    embedder_cache: Optional[EmbeddingCache] = None,
    cfg: Optional[ExperimentConfig] = None,
    seed: int = 0,
    griffin_lim_iters: int = 32,
) -> SynthesisResult:
    model, ckpt_cfg = load_system(checkpoint, cfg)
    system = ckpt_cfg.system
    normalized = normalize_text(text, ckpt_cfg.features.charset)
    sequence = text_to_sequence(normalized, ckpt_cfg.features.charset)
    seed_everything(seed)

    reference_ids: List[str] = []
    refs = None
    target_ref = None
    if uses_references(system) or system.architecture is Architecture.GST:
        n_refs = max(1, system.n_references)
        matching = [u.id for u in manifest if u.text == normalized]
        if matching and selection_index and matching[0] in selection_index and uses_references(system):
            reference_ids = selection_index[matching[0]].reference_ids[:n_refs]
        else:
            if embedder_cache is None:
                raise ConfigMismatch("selecting references for new text needs the embedding cache")
            embedder = embedder_from_name(embedder_cache.embedder_name)
            selection = ckpt_cfg.selection.model_copy(update={"n_references": n_refs})
            reference_ids = select_for_text(
                normalized, embedder, embedder_cache, selection, manifest.texts_by_id(), ckpt_cfg.features.charset
            ).reference_ids
        pad_value = silence_level(ckpt_cfg.features)
        frames = []
        for ref_id in reference_ids:
            mel = manifest.get(ref_id).mel
            if mel is None:
                raise DataError(f"reference {ref_id} has no mel spectrogram")
            frames.append(fit_frames(mel.frames, system.max_ref_frames, pad_value))
        frames = np.stack(frames)
        refs = torch.from_numpy(frames).unsqueeze(0)
        target_ref = refs[:, 0]

    ids = torch.as_tensor(sequence.ids).unsqueeze(0)
    lengths = torch.tensor([len(sequence)])
    with torch.no_grad():
        enc = model.acoustic.encode(ids, lengths)
        E, weights = model.style(enc, lengths, target_ref, refs)
        memory = model.acoustic.condition(enc, E)
        out, exceeded = model.acoustic.decode_free_running(memory, lengths)

    if exceeded:
        logger.warning("synthesis of %r hit max_decoder_steps", normalized)
    mel = out.mel[0].numpy()
    result = SynthesisResult(
        mel=mel,
        stop_step=int(out.stop_logits.shape[1]),
        alignment=out.alignments[0].numpy(),
        max_steps_exceeded=exceeded,
        reference_ids=reference_ids,
        attention_weights=None if weights is None else weights[0].numpy(),
    )
    result.waveform = invert_mel(mel, ckpt_cfg.features, iterations=griffin_lim_iters, seed=seed)
    return result


def write_synthesis(result: SynthesisResult, out_dir: Path, name: str, text: str, cfg: ExperimentConfig) -> Path:
    """写出 <name>.wav / <name>.mel / <name>.align.txt，并在 index.txt 中登记（同名覆盖）。"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wav_path = out_dir / f"{name}.wav"
    save_wav(wav_path, result.waveform, cfg.features.sample_rate)
    write_mel(
        out_dir / f"{name}.mel",
        MelSpectrogram(result.mel.astype(np.float32), cfg.features.sample_rate, cfg.features.hop_length, cfg.features.n_fft),
    )
    np.savetxt(out_dir / f"{name}.align.txt", result.alignment, fmt="%.6f")

    index_path = out_dir / SAMPLES_INDEX
    entries = {}
    if index_path.exists():
        for line in index_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, _, rest = line.partition("|")
                entries[key] = rest
    entries[name] = f"{wav_path.name}|{text}"
    index_path.write_text("".join(f"{k}|{v}\n" for k, v in sorted(entries.items())), encoding="utf-8")
    return wav_path


def read_samples_index(samples_dir: Path) -> List[Tuple[str, Path, str]]:
    path = Path(samples_dir) / SAMPLES_INDEX
    if not path.exists():
        raise MissingFile(path)
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, wav, text = line.split("|", 2)
            rows.append((name, Path(samples_dir) / wav, text))
    return rows


# ---------------------------------------------------------------------------
# 运行目录
# ---------------------------------------------------------------------------

def run_config(run_dir: Path, overrides: Optional[Dict[str, str]] = None, config_path: Optional[Path] = None) -> ExperimentConfig:
    """运行目录里的 config.txt 为基准；显式配置文件与命令行覆盖项依次叠加。"""
    pairs: Dict[str, str] = {}
    stored = Path(run_dir) / CONFIG_FILE
    if stored.exists():
        pairs.update(read_pairs(stored))
    if config_path is not None:
        pairs.update(read_pairs(config_path))
    pairs.update(overrides or {})
    return build_config(pairs)


def prepare_run(
    run_dir: Path,
    cfg: ExperimentConfig,
    manifest_path: Optional[Path] = None,
    toy: Optional[int] = None,
    seed: int = 0,
    force: bool = False,
    workers: int = 1,
) -> Manifest:
    run_dir = Path(run_dir)
    manifest_out = run_dir / MANIFEST_FILE
    if manifest_out.exists() and not force:
        manifest = load_manifest(manifest_out, cfg.features.charset)
        if all(mel_cache_path(run_dir, u.id).exists() for u in manifest):
            logger.info("%s is already prepared; use --force to regenerate", run_dir)
            load_manifest_features(manifest, run_dir)
            return manifest

    run_dir.mkdir(parents=True, exist_ok=True)
    if toy is not None:
        manifest = generate_toy_corpus(toy, seed, run_dir, cfg.features)
    else:
        if manifest_path is None:
            raise MissingFile("<no manifest given>")
        source = load_manifest(Path(manifest_path), cfg.features.charset)
        entries = []
        for utt in source:
            audio = source.resolve_audio(utt)
            entries.append(Utterance(id=utt.id, text=utt.text, audio_path=str(audio.resolve()) if audio else None))
        manifest = Manifest(entries=entries, source_path=manifest_out)
        save_manifest(manifest, manifest_out)

    write_config(cfg, run_dir / CONFIG_FILE)
    extract_manifest_features(manifest, cfg.features, out_dir=run_dir, workers=workers)
    return manifest


def load_run(run_dir: Path, cfg: ExperimentConfig) -> Manifest:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir / MANIFEST_FILE, cfg.features.charset)
    load_manifest_features(manifest, run_dir)
    return manifest


def select_run(
    run_dir: Path,
    cfg: ExperimentConfig,
    embedder_name: str = "toy-hash:d=32:layers=3:seed=0",
    embedder_root: Optional[Path] = None,
    workers: int = 1,
) -> Dict[str, ReferenceSet]:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir / MANIFEST_FILE, cfg.features.charset)
    embedder = embedder_from_name(embedder_name, embedder_root)
    cache = embed_manifest(manifest, embedder)
    index = build_selection_index(manifest, cache, cfg.selection, workers=workers)
    save_embedding_cache(cache, run_dir / EMBEDDINGS_FILE)
    save_selection_index(index, run_dir / INDEX_FILE)
    logger.info("selection index: %d targets x %d references", len(index), cfg.selection.n_references)
    return index


def load_run_selection(run_dir: Path) -> Tuple[Optional[Dict[str, ReferenceSet]], Optional[EmbeddingCache]]:
    run_dir = Path(run_dir)
    index = load_selection_index(run_dir / INDEX_FILE) if (run_dir / INDEX_FILE).exists() else None
    cache = load_embedding_cache(run_dir / EMBEDDINGS_FILE) if (run_dir / EMBEDDINGS_FILE).exists() else None
    return index, cache


def checkpoint_path(run_dir: Path, system_id: str) -> Path:
    name = PRETRAIN_CHECKPOINT if system_id == PRETRAIN_SYSTEM_ID else f"{system_id}.pt"
    return Path(run_dir) / CHECKPOINT_DIR / name


def pretrain_run(run_dir: Path, cfg: ExperimentConfig, force: bool = False) -> Checkpoint:
    path = checkpoint_path(run_dir, PRETRAIN_SYSTEM_ID)
    if path.exists() and not force:
        logger.info("pre-trained checkpoint %s exists; use --force to retrain", path)
        return load_checkpoint(path)
    manifest = load_run(run_dir, cfg)
    ckpt = pretrain_style_system(manifest, cfg, run_dir=run_dir)
    save_checkpoint(ckpt, path)
    return ckpt


def train_run(
    run_dir: Path,
    cfg: ExperimentConfig,
    data_dir: Optional[Path] = None,
    pretrained_path: Optional[Path] = None,
    force: bool = False,
) -> Checkpoint:
    """run_dir 存放本系统的产物；data_dir（默认同 run_dir）提供语料、选参考索引与预训练检查点。"""
    run_dir = Path(run_dir)
    data_dir = Path(data_dir) if data_dir else run_dir
    system = resolve_system(cfg.system.system_id, cfg.system)
    cfg = cfg.model_copy(update={"system": system})

    path = checkpoint_path(run_dir, system.system_id)
    if path.exists() and not force:
        logger.info("checkpoint %s exists; use --force to retrain", path)
        return load_checkpoint(path)

    manifest = load_run(data_dir, cfg)
    index = None
    if uses_references(system):
        index, _ = load_run_selection(data_dir)
        if index is None:
            raise MissingFile(data_dir / INDEX_FILE)

    pretrained = None
    pre_path = Path(pretrained_path) if pretrained_path else checkpoint_path(data_dir, PRETRAIN_SYSTEM_ID)
    if pre_path.exists():
        pretrained = load_checkpoint(pre_path)
    elif needs_pretrained(system):
        raise MissingFile(pre_path)

    run_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / CONFIG_FILE)
    result = train_system(manifest, index, pretrained, cfg, run_dir=run_dir)
    save_checkpoint(result.checkpoint, path)
    return result.checkpoint


def load_run_system(run_dir: Path, system_id: Optional[str] = None) -> Checkpoint:
    """按系统 id 取检查点；未指定时取 checkpoints/ 下唯一的非预训练检查点。"""
    ckpt_dir = Path(run_dir) / CHECKPOINT_DIR
    if system_id:
        return load_checkpoint(checkpoint_path(run_dir, system_id))
    candidates = sorted(p for p in ckpt_dir.glob("*.pt") if p.name != PRETRAIN_CHECKPOINT)
    if len(candidates) != 1:
        raise UnknownConfig(f"{ckpt_dir} holds {len(candidates)} system checkpoints; pass --system")
    return load_checkpoint(candidates[0])

