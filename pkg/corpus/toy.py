"""
corpus/toy.py - 合成玩具语料

按 (n, seed) 确定性地生成 n 条短句：文本来自按"风格组"划分的模板，
波形是带音高/能量轮廓的谐波音加少量种子噪声。同一风格组的文本共享词汇，
因此语义选参考时倾向于选中同组（韵律相似）的音频。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from corpus.engine import Manifest, Utterance, normalize_text, save_manifest, save_wav
from errors import InputError, IoError
from settings import FeatureConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
WAV_DIR = "wavs"


@dataclass(frozen=True)
class StyleGroup:
    name: str
    base_pitch: float      # Hz
    pitch_slope: float     # 整句相对变化
    vibrato: float         # 相对深度
    energy: float
    energy_slope: float
    subjects: Tuple[str, ...]
    verbs: Tuple[str, ...]
    endings: Tuple[str, ...]


STYLE_GROUPS: Tuple[StyleGroup, ...] = (
    StyleGroup(
        name="calm",
        base_pitch=120.0, pitch_slope=-0.10, vibrato=0.00,
        energy=0.25, energy_slope=-0.3,
        subjects=("the river", "the old house", "a quiet field", "the evening"),
        verbs=("rests", "waits", "lies still", "sleeps"),
        endings=("under the moon.", "by the slow water.", "in the soft rain."),
    ),
    StyleGroup(
        name="excited",
        base_pitch=220.0, pitch_slope=0.25, vibrato=0.04,
        energy=0.55, energy_slope=0.4,
        subjects=("the crowd", "my brother", "the team", "everyone"),
        verbs=("shouts", "jumps", "runs fast", "cheers"),
        endings=("at the big game!", "into the bright sun!", "right now!"),
    ),
    StyleGroup(
        name="sad",
        base_pitch=100.0, pitch_slope=-0.20, vibrato=0.01,
        energy=0.18, energy_slope=-0.6,
        subjects=("the letter", "her old dog", "the empty chair", "the last train"),
        verbs=("is gone", "never came back", "fades away", "is lost"),
        endings=("and nobody knows.", "in the cold dark.", "forever."),
    ),
    StyleGroup(
        name="question",
        base_pitch=160.0, pitch_slope=0.45, vibrato=0.02,
        energy=0.35, energy_slope=0.1,
        subjects=("did you", "will they", "could we", "should i"),
        verbs=("see", "find", "open", "take"),
        endings=("the door?", "the key?", "the map?"),
    ),
)


def _toy_text(group: StyleGroup, rng: np.random.Generator, charset: str) -> str:
    subject = group.subjects[rng.integers(len(group.subjects))]
    verb = group.verbs[rng.integers(len(group.verbs))]
    ending = group.endings[rng.integers(len(group.endings))]
    return normalize_text(f"{subject} {verb} {ending}", charset)


def _toy_waveform(
    group: StyleGroup,
    rng: np.random.Generator,
    n_samples: int,
    sample_rate: int,
    n_harmonics: int = 4,
) -> np.ndarray:
    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    progress = np.linspace(0.0, 1.0, n_samples)
    jitter = 1.0 + 0.05 * rng.standard_normal()

    f0 = group.base_pitch * jitter * (1.0 + group.pitch_slope * progress)
    f0 *= 1.0 + group.vibrato * np.sin(2 * np.pi * 5.0 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    wave = np.zeros(n_samples, dtype=np.float64)
    for k in range(1, n_harmonics + 1):
        wave += np.sin(k * phase) / k

    envelope = group.energy * np.clip(1.0 + group.energy_slope * (progress - 0.5), 0.05, None)
    ramp = min(n_samples // 10, int(0.02 * sample_rate))
    if ramp > 0:
        fade = np.linspace(0.0, 1.0, ramp)
        envelope[:ramp] *= fade
        envelope[-ramp:] *= fade[::-1]

    wave = wave / n_harmonics * 2.0 * envelope
    wave += 0.003 * rng.standard_normal(n_samples)
    return np.clip(wave, -1.0, 1.0).astype(np.float32)


def generate_toy_corpus(
    n: int,
    seed: int,
    out_dir: Path,
    cfg: Optional[FeatureConfig] = None,
    min_seconds: float = 0.5,
    max_seconds: float = 1.0,
) -> Manifest:
    """写出 wavs/<id>.wav 与 manifest.txt；结果只取决于 (n, seed) 和前端配置。"""
    if n < 2:
        raise InputError(f"toy corpus needs n >= 2, got {n}")
    if not 0 < min_seconds <= max_seconds:
        raise InputError("toy corpus durations must satisfy 0 < min_seconds <= max_seconds")
    cfg = cfg or FeatureConfig()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)

    try:
        (out_dir / WAV_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}")

    entries: List[Utterance] = []
    for i in range(n):
        group = STYLE_GROUPS[i % len(STYLE_GROUPS)]
        utt_id = f"toy_{i:04d}"
        text = _toy_text(group, rng, cfg.charset)
        seconds = rng.uniform(min_seconds, max_seconds)
        n_samples = int(round(seconds * cfg.sample_rate))
        wave = _toy_waveform(group, rng, n_samples, cfg.sample_rate)

        rel_path = f"{WAV_DIR}/{utt_id}.wav"
        save_wav(out_dir / rel_path, wave, cfg.sample_rate)
        entries.append(Utterance(id=utt_id, text=text, audio_path=rel_path))

    manifest_path = out_dir / MANIFEST_NAME
    manifest = Manifest(entries=entries, source_path=manifest_path)
    save_manifest(manifest, manifest_path)
    logger.info("generated toy corpus: %d utterances, seed=%d -> %s", n, seed, out_dir)
    return manifest
