"""
pipeline/systems.py - 消融矩阵注册表

每个命名系统（B1-B4、P1-P10）固定一组架构与开关；
另附原始实验报告的 MOS / WER 作为不可复现的参考值，供排行榜对照。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

from errors import ConfigMismatch, UnknownSystem
from settings import Architecture, SystemConfig

PRETRAIN_SYSTEM_ID = "GST"
CUSTOM_SYSTEM_ID = "custom"


@dataclass(frozen=True)
class SystemFlags:
    architecture: Architecture
    use_attention: bool
    use_mse: bool
    use_mi: bool
    n_references: int


@dataclass(frozen=True)
class PublishedResult:
    architecture: str
    mos: float
    mos_ci: float
    wer: float  # 百分比


A = Architecture

SYSTEM_TABLE: Dict[str, SystemFlags] = {
    "B1": SystemFlags(A.TACOTRON2, False, False, False, 0),
    "B2": SystemFlags(A.TPSE_GST, False, True, False, 0),
    "B3": SystemFlags(A.TPSE_GST, False, False, True, 0),
    "B4": SystemFlags(A.TPSE_GST, False, True, True, 0),
    "P1": SystemFlags(A.U_MRTTS, False, False, False, 3),
    "P2": SystemFlags(A.U_MRTTS, True, False, False, 1),
    "P3": SystemFlags(A.U_MRTTS, True, False, False, 3),
    "P4": SystemFlags(A.C_MRTTS, False, True, False, 3),
    "P5": SystemFlags(A.C_MRTTS, False, False, True, 3),
    "P6": SystemFlags(A.C_MRTTS, False, True, True, 3),
    "P7": SystemFlags(A.C_MRTTS, True, True, False, 3),
    "P8": SystemFlags(A.C_MRTTS, True, False, True, 3),
    "P9": SystemFlags(A.C_MRTTS, True, True, True, 1),
    "P10": SystemFlags(A.C_MRTTS, True, True, True, 3),
}

# 单参考（目标音频即参考）的 GST 预训练系统
PRETRAIN_FLAGS = SystemFlags(A.GST, False, False, False, 1)

PUBLISHED_RESULTS: Dict[str, PublishedResult] = {
    "B1": PublishedResult("Tacotron2", 4.015, 0.023, 28.2),
    "B2": PublishedResult("TPSE-GST", 4.175, 0.016, 26.7),
    "B3": PublishedResult("TPSE-GST", 4.177, 0.022, 26.3),
    "B4": PublishedResult("TPSE-GST", 4.183, 0.063, 26.6),
    "P1": PublishedResult("U-MRTTS", 4.011, 0.074, 27.1),
    "P2": PublishedResult("U-MRTTS", 4.103, 0.105, 21.2),
    "P3": PublishedResult("U-MRTTS", 4.292, 0.035, 18.2),
    "P4": PublishedResult("C-MRTTS", 3.911, 0.025, 30.2),
    "P5": PublishedResult("C-MRTTS", 3.985, 0.025, 29.3),
    "P6": PublishedResult("C-MRTTS", 3.997, 0.031, 29.5),
    "P7": PublishedResult("C-MRTTS", 4.123, 0.015, 18.7),
    "P8": PublishedResult("C-MRTTS", 4.285, 0.103, 18.4),
    "P9": PublishedResult("C-MRTTS", 4.109, 0.127, 19.1),
    "P10": PublishedResult("C-MRTTS", 4.313, 0.024, 17.9),
    "GT": PublishedResult("N/A", 4.674, 0.013, 15.6),
}


def valid_system_ids():
    return list(SYSTEM_TABLE) + [PRETRAIN_SYSTEM_ID, CUSTOM_SYSTEM_ID]


def _apply(cfg: SystemConfig, system_id: str, flags: SystemFlags) -> SystemConfig:
    return cfg.model_copy(
        update={
            "system_id": system_id,
            "architecture": flags.architecture,
            "use_attention": flags.use_attention,
            "use_mse": flags.use_mse,
            "use_mi": flags.use_mi,
            "n_references": flags.n_references,
        }
    )


def validate_system(cfg: SystemConfig) -> SystemConfig:
    arch = cfg.architecture
    if arch is A.U_MRTTS and (cfg.use_mse or cfg.use_mi):
        raise ConfigMismatch(f"{cfg.system_id}: U-MRTTS systems carry no style constraint")
    if arch is A.TACOTRON2 and (cfg.use_mse or cfg.use_mi or cfg.use_attention or cfg.n_references):
        raise ConfigMismatch(f"{cfg.system_id}: the Tacotron2 baseline has no style pathway")
    if arch is A.TPSE_GST and (cfg.use_attention or cfg.n_references):
        raise ConfigMismatch(f"{cfg.system_id}: TPSE-GST predicts style from text and uses no references")
    if arch is A.TPSE_GST and not (cfg.use_mse or cfg.use_mi):
        raise ConfigMismatch(f"{cfg.system_id}: TPSE-GST needs at least one constraint to learn its head")
    if arch is A.C_MRTTS and not (cfg.use_mse or cfg.use_mi):
        raise ConfigMismatch(f"{cfg.system_id}: C-MRTTS systems need at least one constraint")
    if arch in (A.U_MRTTS, A.C_MRTTS) and cfg.n_references < 1:
        raise ConfigMismatch(f"{cfg.system_id}: multi-reference systems need n_references >= 1")
    if arch is A.GST and cfg.n_references != 1:
        raise ConfigMismatch(f"{cfg.system_id}: GST pre-training uses exactly one reference (the target)")
    return cfg


def resolve_system(system_id: Optional[str], base: Optional[SystemConfig] = None) -> SystemConfig:
    """命名系统强制使用注册表中的开关；custom 保留配置里的开关，只做一致性校验。"""
    base = base or SystemConfig()
    system_id = system_id or base.system_id
    if system_id in SYSTEM_TABLE:
        return validate_system(_apply(base, system_id, SYSTEM_TABLE[system_id]))
    if system_id == PRETRAIN_SYSTEM_ID:
        return validate_system(_apply(base, system_id, PRETRAIN_FLAGS))
    if system_id == CUSTOM_SYSTEM_ID:
        return validate_system(base.model_copy(update={"system_id": system_id}))
    raise UnknownSystem(system_id, valid_system_ids())


def uses_references(cfg: SystemConfig) -> bool:
    return cfg.architecture in (A.U_MRTTS, A.C_MRTTS)


def uses_style(cfg: SystemConfig) -> bool:
    return cfg.architecture is not A.TACOTRON2


def needs_pretrained(cfg: SystemConfig) -> bool:
    return cfg.use_mse or cfg.use_mi
