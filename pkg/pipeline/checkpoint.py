"""
pipeline/checkpoint.py - 检查点读写

检查点是一个只含张量与基本类型的字典，可用 torch.load(weights_only=True) 安全读回：
各模块 state_dict、步数、config_hash、完整配置文本、loss 尾部、风格编码器元数据。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch

from errors import IoError, MissingFile, UnknownConfig
from settings import ExperimentConfig, build_config, dump_config, parse_pairs

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mrtts-checkpoint-1"


@dataclass
class Checkpoint:
    modules: Dict[str, Dict[str, torch.Tensor]]
    step: int
    config_hash: str
    config_text: str
    system_id: str
    loss_tail: List[float] = field(default_factory=list)
    metadata: Dict[str, int] = field(default_factory=dict)

    @property
    def config(self) -> ExperimentConfig:
        return build_config(parse_pairs(self.config_text, f"checkpoint:{self.system_id}"))

    def has(self, module: str) -> bool:
        return module in self.modules


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "modules": ckpt.modules,
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "config_text": ckpt.config_text,
        "system_id": ckpt.system_id,
        "loss_tail": list(ckpt.loss_tail),
        "metadata": dict(ckpt.metadata),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, str(path))
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}")
    logger.info("saved checkpoint %s (system=%s step=%d)", path, ckpt.system_id, ckpt.step)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise UnknownConfig(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
    return Checkpoint(
        modules=payload["modules"],
        step=int(payload["step"]),
        config_hash=payload["config_hash"],
        config_text=payload["config_text"],
        system_id=payload["system_id"],
        loss_tail=[float(v) for v in payload["loss_tail"]],
        metadata={k: int(v) for k, v in payload["metadata"].items()},
    )


def snapshot(
    modules: Dict[str, Optional[torch.nn.Module]],
    step: int,
    cfg: ExperimentConfig,
    config_hash: str,
    loss_tail: List[float],
) -> Checkpoint:
    states = {
        name: {k: v.detach().clone() for k, v in module.state_dict().items()}
        for name, module in modules.items()
        if module is not None
    }
    return Checkpoint(
        modules=states,
        step=step,
        config_hash=config_hash,
        config_text=dump_config(cfg),
        system_id=cfg.system.system_id,
        loss_tail=list(loss_tail),
        metadata={
            "n_tokens": cfg.style.n_tokens,
            "n_heads": cfg.style.n_heads,
            "output_dim": cfg.style.output_dim,
        },
    )
