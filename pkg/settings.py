"""
settings.py - 实验配置层

所有数值默认值集中在这里；实验配置文件是扁平的 key=value 文本：

    # 注释
    steps=300                 # 不带前缀 → system 段
    features.n_mels=80        # section.field
    style.conv_channels=32,32,64,64,128,128

配置文件解析后由 pydantic 校验并做类型转换，未知键直接报错。
config_hash 基于规范化后的 dump，写入运行目录与检查点，保证实验可溯源。
"""

from __future__ import annotations

import hashlib
import re
import typing
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Type

from pydantic import BaseModel, Field, ValidationError

from errors import MissingFile, UnknownConfig

DEFAULT_CHARSET = "abcdefghijklmnopqrstuvwxyz '.,?!-"


# ---------------------------------------------------------------------------
# 各模块配置
# ---------------------------------------------------------------------------

class FeatureConfig(BaseModel):
    """文本与音频前端。"""

    sample_rate: int = Field(22050, gt=0)
    n_fft: int = Field(1024, gt=0)
    hop_length: int = Field(256, gt=0)
    win_length: int = Field(1024, gt=0)
    n_mels: int = Field(80, gt=0)
    fmin: float = 0.0
    fmax: Optional[float] = None
    clip_floor: float = Field(1e-5, gt=0)
    center: bool = True
    charset: str = DEFAULT_CHARSET


class SelectionConfig(BaseModel):
    n_references: int = Field(3, ge=1)
    exclude_target: bool = True
    # None = 整个训练集
    pool: Optional[List[str]] = None


class StyleEncoderConfig(BaseModel):
    conv_channels: List[int] = [32, 32, 64, 64, 128, 128]
    kernel_size: int = 3
    stride: int = 2
    gru_units: int = 128
    n_tokens: int = Field(10, ge=1)
    n_heads: int = Field(4, ge=1)
    output_dim: int = 256


class AttentionConfig(BaseModel):
    d_q: int = Field(256, ge=1)
    d_m: int = Field(256, ge=1)
    d_v: int = Field(256, ge=1)
    score_transform: Literal["identity", "tanh"] = "identity"


class MIConfig(BaseModel):
    batch_size: int = Field(256, ge=2)
    lr: float = Field(1e-3, gt=0)
    inner_steps: int = Field(1, ge=1)
    hidden_sizes: List[int] = [256, 256]
    seed: int = 0
    ema_decay: Optional[float] = None
    zero_init_output: bool = True


class AcousticConfig(BaseModel):
    embed_dim: int = 128
    encoder_kernel: int = 5
    encoder_dim: int = 128
    prenet_dims: List[int] = [128, 128]
    prenet_dropout: float = 0.5
    attention_dim: int = 128
    decoder_dim: int = 256
    reduction_factor: int = Field(2, ge=1)
    max_decoder_steps: int = Field(400, ge=1)
    stop_threshold: float = 0.5
    head_hidden: int = 256


class Architecture(str, Enum):
    TACOTRON2 = "tacotron2"
    TPSE_GST = "tpse_gst"
    U_MRTTS = "u_mrtts"
    C_MRTTS = "c_mrtts"
    GST = "gst"


class SystemConfig(BaseModel):
    """一个训练系统（消融矩阵中的一行）加上优化器与步数预算。"""

    system_id: str = "P10"
    architecture: Architecture = Architecture.C_MRTTS
    use_attention: bool = True
    use_mse: bool = True
    use_mi: bool = True
    n_references: int = Field(3, ge=0)
    seed: int = 1234
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    grad_clip: float = 1.0
    steps: int = Field(300, ge=1)
    mse_weight: float = 1.0
    mi_weight: float = 1.0
    stop_weight: float = 1.0
    init_from_pretrained: bool = False
    max_ref_frames: int = Field(128, ge=1)
    log_every: int = Field(10, ge=1)
    debug_trace: bool = False


class ExperimentConfig(BaseModel):
    features: FeatureConfig = FeatureConfig()
    selection: SelectionConfig = SelectionConfig()
    style: StyleEncoderConfig = StyleEncoderConfig()
    attention: AttentionConfig = AttentionConfig()
    mi: MIConfig = MIConfig()
    acoustic: AcousticConfig = AcousticConfig()
    system: SystemConfig = SystemConfig()


SECTIONS: Dict[str, Type[BaseModel]] = {
    name: field.annotation for name, field in ExperimentConfig.model_fields.items()
}


# ---------------------------------------------------------------------------
# key=value 解析 / 输出
# ---------------------------------------------------------------------------

def _is_list_field(model: Type[BaseModel], field: str) -> bool:
    annotation = model.model_fields[field].annotation
    if typing.get_origin(annotation) is typing.Union:
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    return typing.get_origin(annotation) in (list, List)


def _coerce(model: Type[BaseModel], field: str, raw: str):
    stripped = raw.strip()
    if stripped.lower() in ("none", "null"):
        return None
    if _is_list_field(model, field):
        return [item.strip() for item in stripped.split(",") if item.strip()]
    # 字符串字段原样保留（字符集可以含边缘空格）
    if model.model_fields[field].annotation is str:
        return raw
    return stripped


def parse_overrides(pairs: Dict[str, str]) -> Dict[str, Dict[str, object]]:
    """把扁平键值对拆分到各配置段。"""
    sections: Dict[str, Dict[str, object]] = {}
    for key, raw in pairs.items():
        section, _, field = key.rpartition(".")
        section = section or "system"
        model = SECTIONS.get(section)
        if model is None or field not in model.model_fields:
            raise UnknownConfig(f"unknown config key: {key}")
        sections.setdefault(section, {})[field] = _coerce(model, field, raw)
    return sections


def build_config(pairs: Optional[Dict[str, str]] = None, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    merged = base.model_dump()
    for section, values in parse_overrides(pairs or {}).items():
        merged[section].update(values)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise UnknownConfig(f"invalid config: {e.errors()[0]['loc']} {e.errors()[0]['msg']}")


# 行首或空白之后的 # 才是注释；值两端有空格或含 " #" 时用双引号括起
_COMMENT = re.compile(r"\s#.*$")


def _needs_quotes(value: str) -> bool:
    return value != value.strip() or value.startswith('"') or _COMMENT.search(value) is not None


def parse_pairs(text: str, source: str = "<config>") -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise UnknownConfig(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        if value.lstrip().startswith('"'):
            value = value.lstrip()
            end = value.find('"', 1)
            if end < 0 or _COMMENT.sub("", value[end + 1:]).strip():
                raise UnknownConfig(f"{source}:{lineno}: unterminated quoted value")
            value = value[1:end]
        else:
            value = _COMMENT.sub("", value).strip()
        pairs[key.strip()] = value
    return pairs


def read_pairs(path: Path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    return parse_pairs(path.read_text(encoding="utf-8"), str(path))


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """配置文件优先级低于命令行覆盖项。"""
    pairs = read_pairs(path) if path else {}
    pairs.update(overrides or {})
    return build_config(pairs)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, str) and _needs_quotes(value):
        return f'"{value}"'
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in sorted(SECTIONS):
        model = getattr(cfg, section)
        for field in sorted(type(model).model_fields):
            lines.append(f"{section}.{field}={_format_value(getattr(model, field))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def write_config(cfg: ExperimentConfig, path: Path) -> str:
    digest = config_hash(cfg)
    Path(path).write_text(dump_config(cfg) + f"# config_hash={digest}\n", encoding="utf-8")
    return digest
