"""
acoustic/vocoder.py - mel 反演（试听用）

log mel → exp → 梅尔滤波器组伪逆 → 截断为非负幅度谱 → Griffin-Lim（固定种子初相位）。
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Union

import librosa
import numpy as np

from corpus.engine import MelSpectrogram, mel_basis
from errors import InputError, ShapeMismatch
from settings import FeatureConfig


@lru_cache(maxsize=8)
def _pinv_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: Optional[float]) -> np.ndarray:
    cfg = FeatureConfig(sample_rate=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)
    return np.linalg.pinv(mel_basis(cfg))


def invert_mel(
    mel: Union[MelSpectrogram, np.ndarray],
    cfg: Optional[FeatureConfig] = None,
    iterations: int = 32,
    seed: int = 0,
) -> np.ndarray:
    cfg = cfg or FeatureConfig()
    if iterations < 1:
        raise InputError(f"iterations must be >= 1, got {iterations}")
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] != cfg.n_mels:
        raise ShapeMismatch(f"expected a T x {cfg.n_mels} mel, got {frames.shape}")

    mel_magnitude = np.exp(frames.astype(np.float64)).T             # (n_mels, T)
    inverse = _pinv_basis(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    magnitude = np.maximum(inverse @ mel_magnitude, 0.0)             # (1 + n_fft/2, T)

    wave = librosa.griffinlim(
        magnitude,
        n_iter=iterations,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        n_fft=cfg.n_fft,
        center=cfg.center,
        pad_mode="constant",
        init="random",
        random_state=seed,
    )
    peak = np.max(np.abs(wave)) if wave.size else 0.0
    if peak > 1.0:
        wave = wave / peak
    return wave.astype(np.float32)
