"""
corpus/engine.py - 语料业务引擎层

清单 (manifest) 读写、文本规范化、WAV 读写、对数梅尔谱提取与梅尔缓存格式。
纯逻辑，不依赖 FastAPI 或数据库。

清单格式：每行一条记录，UTF-8，字段以 "|" 分隔，顺序为 id|audio_path|text。
audio_path 可为空；相对路径相对于清单所在目录解析。

梅尔缓存格式：一行 ASCII 头
    #mel T=<帧数> n_mels=<通道数> sample_rate=<Hz> hop=<样本> n_fft=<样本> dtype=float32
之后紧跟 T × n_mels 个小端 float32（行优先）。
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import librosa
import numpy as np
import soundfile as sf

from errors import (
    DuplicateId,
    EmptyAudio,
    IoError,
    MalformedRecord,
    MissingFile,
    SampleRateMismatch,
    ShapeMismatch,
)
from settings import FeatureConfig

logger = logging.getLogger(__name__)

_WHITESPACE = re.compile(r"\s+")


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels) float32, log 幅度
    sample_rate: int = 22050
    hop_length: int = 256
    n_fft: int = 1024

    def __post_init__(self) -> None:
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeMismatch(f"mel must be T x n_mels with T >= 1, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_mels(self) -> int:
        return int(self.frames.shape[1])


@dataclass
class Utterance:
    id: str
    text: str
    audio_path: Optional[str] = None
    mel: Optional[MelSpectrogram] = None
    embedding_id: Optional[str] = None


@dataclass
class Manifest:
    entries: List[Utterance]
    source_path: Optional[Path] = None
    _index: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._index = {u.id: i for i, u in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.entries)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._index

    def ids(self) -> List[str]:
        return [u.id for u in self.entries]

    def get(self, utterance_id: str) -> Utterance:
        return self.entries[self._index[utterance_id]]

    def texts_by_id(self) -> Dict[str, str]:
        return {u.id: u.text for u in self.entries}

    def resolve_audio(self, utterance: Utterance) -> Optional[Path]:
        if not utterance.audio_path:
            return None
        path = Path(utterance.audio_path)
        if not path.is_absolute() and self.source_path is not None:
            path = Path(self.source_path).parent / path
        return path


# ---------------------------------------------------------------------------
# 文本规范化
# ---------------------------------------------------------------------------

def normalize_text(text: str, charset: str) -> str:
    """小写、去掉字符集外的字符、合并空白。幂等。"""
    lowered = text.lower()
    allowed = set(charset)
    kept = "".join(ch if ch in allowed else (" " if ch.isspace() else "") for ch in lowered)
    return _WHITESPACE.sub(" ", kept).strip()


# ---------------------------------------------------------------------------
# 清单读写
# ---------------------------------------------------------------------------

def load_manifest(path: Path, charset: Optional[str] = None) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    charset = charset or FeatureConfig().charset

    entries: List[Utterance] = []
    seen = set()
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("|", 2)
            if len(parts) != 3:
                raise MalformedRecord(lineno, "expected id|audio_path|text")
            utt_id, audio_path, text = (p.strip() for p in parts)
            if not utt_id:
                raise MalformedRecord(lineno, "empty id")
            text = normalize_text(text, charset)
            if not text:
                raise MalformedRecord(lineno, "empty text after normalization")
            if utt_id in seen:
                raise DuplicateId(utt_id)
            seen.add(utt_id)
            entries.append(Utterance(id=utt_id, text=text, audio_path=audio_path or None))

    if not entries:
        raise MalformedRecord(0, f"{path} contains no records")
    return Manifest(entries=entries, source_path=path)


def save_manifest(manifest: Manifest, path: Path) -> None:
    path = Path(path)
    lines = [f"{u.id}|{u.audio_path or ''}|{u.text}" for u in manifest.entries]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write manifest {path}: {e}")


# ---------------------------------------------------------------------------
# WAV 读写
# ---------------------------------------------------------------------------

def load_wav(path: Path, cfg: FeatureConfig, resample: bool = False) -> np.ndarray:
    """读取单声道 PCM WAV。多声道取平均；采样率不符时只允许 librosa polyphase 重采样。"""
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    try:
        audio, sr = sf.read(str(path), dtype="float32", always_2d=False)
    except RuntimeError as e:
        raise IoError(f"cannot read {path}: {e}")
    if audio.ndim == 2:
        audio = audio.mean(axis=1)
    if sr != cfg.sample_rate:
        if not resample:
            raise SampleRateMismatch(sr, cfg.sample_rate)
        audio = librosa.resample(audio, orig_sr=sr, target_sr=cfg.sample_rate, res_type="polyphase")
    return audio.astype(np.float32)


def save_wav(path: Path, waveform: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), np.clip(waveform, -1.0, 1.0), sample_rate, subtype="PCM_16")
    except (OSError, RuntimeError) as e:
        raise IoError(f"cannot write {path}: {e}")


# ---------------------------------------------------------------------------
# 梅尔谱
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: Optional[float]) -> np.ndarray:
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)


def mel_basis(cfg: FeatureConfig) -> np.ndarray:
    return _mel_basis(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)


def extract_mel(audio: np.ndarray, cfg: FeatureConfig, sample_rate: Optional[int] = None) -> MelSpectrogram:
    """
    对数梅尔谱：|STFT| → 梅尔滤波器组 → log(max(x, clip_floor))。
    居中分帧时帧数 T = floor(len / hop) + 1。
    """
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 1 or audio.size == 0:
        raise EmptyAudio("waveform is empty")
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise SampleRateMismatch(sample_rate, cfg.sample_rate)

    spec = np.abs(
        librosa.stft(
            audio,
            n_fft=cfg.n_fft,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            center=cfg.center,
            pad_mode="constant",
        )
    )
    mel = mel_basis(cfg) @ spec
    log_mel = np.log(np.maximum(mel, cfg.clip_floor)).T.astype(np.float32)
    return MelSpectrogram(
        frames=np.ascontiguousarray(log_mel),
        sample_rate=cfg.sample_rate,
        hop_length=cfg.hop_length,
        n_fft=cfg.n_fft,
    )


def silence_level(cfg: FeatureConfig) -> float:
    """静音帧的取值，也用作参考梅尔谱的填充值。"""
    return float(np.log(np.float32(cfg.clip_floor)))


# ---------------------------------------------------------------------------
# 梅尔缓存
# ---------------------------------------------------------------------------

def write_mel(path: Path, mel: MelSpectrogram) -> None:
    path = Path(path)
    header = (
        f"#mel T={mel.n_frames} n_mels={mel.n_mels} sample_rate={mel.sample_rate} "
        f"hop={mel.hop_length} n_fft={mel.n_fft} dtype=float32\n"
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as f:
            f.write(header.encode("ascii"))
            f.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())
    except OSError as e:
        raise IoError(f"cannot write mel cache {path}: {e}")


def read_mel(path: Path) -> MelSpectrogram:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    data = path.read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise MalformedRecord(1, f"{path} has no mel header line")
    try:
        header = data[:newline].decode("ascii")
    except UnicodeDecodeError:
        raise MalformedRecord(1, f"{path} is not a mel cache file")
    if not header.startswith("#mel "):
        raise MalformedRecord(1, f"{path} is not a mel cache file")
    try:
        meta = dict(item.split("=", 1) for item in header[5:].split())
        n_frames, n_mels = int(meta["T"]), int(meta["n_mels"])
        sample_rate, hop, n_fft = int(meta["sample_rate"]), int(meta["hop"]), int(meta["n_fft"])
    except (KeyError, ValueError) as e:
        raise MalformedRecord(1, f"{path}: bad mel header field {e}")
    frames = np.frombuffer(data[newline + 1:], dtype="<f4")
    if frames.size != n_frames * n_mels:
        raise MalformedRecord(1, f"{path}: payload does not match header shape")
    return MelSpectrogram(
        frames=frames.reshape(n_frames, n_mels).astype(np.float32),
        sample_rate=sample_rate,
        hop_length=hop,
        n_fft=n_fft,
    )


def mel_cache_path(out_dir: Path, utterance_id: str) -> Path:
    return Path(out_dir) / "mels" / f"{utterance_id}.mel"


def extract_manifest_features(
    manifest: Manifest,
    cfg: FeatureConfig,
    out_dir: Optional[Path] = None,
    workers: int = 1,
    resample: bool = False,
) -> Dict[str, MelSpectrogram]:
    """逐条提取梅尔谱；可多线程，结果按清单顺序返回（并可写入缓存）。"""

    def _one(utt: Utterance) -> MelSpectrogram:
        audio_path = manifest.resolve_audio(utt)
        if audio_path is None:
            raise MissingFile(f"<no audio for {utt.id}>")
        mel = extract_mel(load_wav(audio_path, cfg, resample=resample), cfg)
        if out_dir is not None:
            write_mel(mel_cache_path(out_dir, utt.id), mel)
        return mel

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        mels = list(pool.map(_one, manifest.entries))

    for utt, mel in zip(manifest.entries, mels):
        utt.mel = mel
    logger.info("extracted %d mel spectrograms", len(mels))
    return {utt.id: mel for utt, mel in zip(manifest.entries, mels)}


def load_manifest_features(manifest: Manifest, out_dir: Path, ids: Optional[Sequence[str]] = None) -> Dict[str, MelSpectrogram]:
    """从缓存目录读回梅尔谱。"""
    wanted = ids if ids is not None else manifest.ids()
    mels = {}
    for utt_id in wanted:
        mel = read_mel(mel_cache_path(out_dir, utt_id))
        manifest.get(utt_id).mel = mel
        mels[utt_id] = mel
    return mels
