from pathlib import Path

import pytest

from pipeline import engine as pipeline
from settings import ExperimentConfig, FeatureConfig, build_config

# 桌面规模的小模型：8 kHz、20 维 mel、16 维风格向量
TINY_PAIRS = {
    "features.sample_rate": "8000",
    "features.n_fft": "256",
    "features.win_length": "256",
    "features.hop_length": "128",
    "features.n_mels": "20",
    "selection.n_references": "3",
    "style.conv_channels": "8,8,16",
    "style.gru_units": "16",
    "style.n_tokens": "4",
    "style.n_heads": "2",
    "style.output_dim": "16",
    "attention.d_q": "16",
    "attention.d_m": "16",
    "attention.d_v": "16",
    "mi.hidden_sizes": "32,32",
    "mi.lr": "0.001",
    "acoustic.embed_dim": "16",
    "acoustic.encoder_kernel": "3",
    "acoustic.encoder_dim": "16",
    "acoustic.prenet_dims": "16,16",
    "acoustic.attention_dim": "16",
    "acoustic.decoder_dim": "32",
    "acoustic.reduction_factor": "4",
    "acoustic.max_decoder_steps": "40",
    "acoustic.head_hidden": "16",
    "steps": "4",
    "batch_size": "4",
    "n_references": "2",
    "max_ref_frames": "32",
    "log_every": "2",
}

TOY_N = 8
TOY_SEED = 7


def tiny_config(**overrides: str) -> ExperimentConfig:
    pairs = dict(TINY_PAIRS)
    pairs.update(overrides)
    return build_config(pairs)


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def tiny_features() -> FeatureConfig:
    return tiny_config().features


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> Path:
    """准备好的运行目录：玩具语料、mel 缓存、选参考索引（N=3）。只读使用。"""
    run_dir = tmp_path_factory.mktemp("toy_run")
    cfg = tiny_config()
    pipeline.prepare_run(run_dir, cfg, toy=TOY_N, seed=TOY_SEED)
    pipeline.select_run(run_dir, cfg)
    return run_dir


@pytest.fixture(scope="session")
def pretrained(toy_run):
    cfg = tiny_config(steps="3")
    manifest = pipeline.load_run(toy_run, cfg)
    return pipeline.pretrain_style_system(manifest, cfg)


@pytest.fixture
def toy_manifest(toy_run, tiny_cfg):
    return pipeline.load_run(toy_run, tiny_cfg)


@pytest.fixture
def toy_index(toy_run):
    index, _ = pipeline.load_run_selection(toy_run)
    return index


@pytest.fixture
def toy_cache(toy_run):
    _, cache = pipeline.load_run_selection(toy_run)
    return cache


# 收敛类慢测试用的 20 条玩具语料
CONVERGENCE_N = 20
CONVERGENCE_PAIRS = {"steps": "300", "batch_size": "8", "log_every": "50"}


@pytest.fixture(scope="session")
def convergence_run(tmp_path_factory) -> Path:
    run_dir = tmp_path_factory.mktemp("convergence_run")
    cfg = tiny_config(**CONVERGENCE_PAIRS)
    pipeline.prepare_run(run_dir, cfg, toy=CONVERGENCE_N, seed=TOY_SEED)
    pipeline.select_run(run_dir, cfg)
    return run_dir


@pytest.fixture(scope="session")
def convergence_pretrained(convergence_run):
    """300 步预训练；pretrain_records.log 写在 convergence_run 下。"""
    cfg = tiny_config(**CONVERGENCE_PAIRS)
    manifest = pipeline.load_run(convergence_run, cfg)
    return pipeline.pretrain_style_system(manifest, cfg, run_dir=convergence_run)
