import librosa
import numpy as np
import pytest

from acoustic.vocoder import invert_mel
from corpus.engine import extract_mel, silence_level
from errors import InputError, ShapeMismatch
from settings import FeatureConfig

CFG = FeatureConfig(sample_rate=8000, n_fft=512, win_length=512, hop_length=128, n_mels=128, fmax=4000.0)


def _tone(freq=440.0, seconds=1.0):
    t = np.arange(int(CFG.sample_rate * seconds)) / CFG.sample_rate
    return (0.5 * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def test_tone_survives_inversion():
    mel = extract_mel(_tone(), CFG)
    wave = invert_mel(mel, CFG, iterations=32, seed=0)
    assert wave.dtype == np.float32
    assert np.max(np.abs(wave)) <= 1.0

    spectrum = np.abs(librosa.stft(wave, n_fft=CFG.n_fft, hop_length=CFG.hop_length)).mean(axis=1)
    expected_bin = round(440.0 / (CFG.sample_rate / CFG.n_fft))
    assert abs(int(np.argmax(spectrum)) - expected_bin) <= 2


def test_silence_inverts_to_near_silence():
    frames = np.full((20, CFG.n_mels), silence_level(CFG), dtype=np.float32)
    wave = invert_mel(frames, CFG, iterations=4)
    assert np.max(np.abs(wave)) < 1e-2


def test_inversion_is_deterministic_per_seed():
    mel = extract_mel(_tone(seconds=0.25), CFG)
    assert np.array_equal(invert_mel(mel, CFG, seed=3), invert_mel(mel, CFG, seed=3))


def test_inversion_errors():
    with pytest.raises(InputError):
        invert_mel(np.zeros((4, CFG.n_mels)), CFG, iterations=0)
    with pytest.raises(ShapeMismatch):
        invert_mel(np.zeros((4, CFG.n_mels + 1)), CFG)
    with pytest.raises(ShapeMismatch):
        invert_mel(np.zeros((0, CFG.n_mels)), CFG)
