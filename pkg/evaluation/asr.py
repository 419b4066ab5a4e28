"""
evaluation/asr.py - ASR 适配器

  - MockAsrAdapter：按 utterance id 查表返回转写；echo 模式直接回显参考文本。
  - HttpAsrAdapter：把原始 WAV 字节 POST 到通用转写端点，
        请求头 X-Utterance-Id / Authorization: Bearer <token>，
        响应 JSON {"transcript": "..."}。
    端点与凭证默认取环境变量 ASR_ENDPOINT / ASR_TOKEN。

失败一律抛 AsrFailure，绝不以空字符串代替。
"""

from __future__ import annotations

import logging
import os
from abc import ABC, abstractmethod
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import httpx

from errors import AsrFailure, InputError

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "ASR_ENDPOINT"
ENV_TOKEN = "ASR_TOKEN"
UTTERANCE_HEADER = "X-Utterance-Id"


class AdapterKind(str, Enum):
    MOCK_LOOKUP = "mock_lookup"
    EXTERNAL_HTTP = "external_http"


class AsrAdapter(ABC):
    kind: AdapterKind

    @abstractmethod
    def transcribe(self, utterance_id: str, wav_path: Path) -> str:
        ...

    def close(self) -> None:
        pass


class MockAsrAdapter(AsrAdapter):
    kind = AdapterKind.MOCK_LOOKUP

    def __init__(self, transcripts: Dict[str, str]) -> None:
        self.transcripts = dict(transcripts)

    @classmethod
    def echo(cls, samples: Iterable[Tuple[str, Path, str]]) -> "MockAsrAdapter":
        """完美识别：转写即参考文本。"""
        return cls({utterance_id: reference for utterance_id, _, reference in samples})

    def transcribe(self, utterance_id: str, wav_path: Path) -> str:
        if utterance_id not in self.transcripts:
            raise AsrFailure(utterance_id, "no transcript configured")
        return self.transcripts[utterance_id]


class HttpAsrAdapter(AsrAdapter):
    kind = AdapterKind.EXTERNAL_HTTP

    def __init__(
        self,
        endpoint: Optional[str] = None,
        token: Optional[str] = None,
        timeout: float = 30.0,
        client: Optional[httpx.Client] = None,
    ) -> None:
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        if not self.endpoint:
            raise InputError(f"HTTP ASR adapter needs an endpoint (set {ENV_ENDPOINT})")
        self.token = token if token is not None else os.environ.get(ENV_TOKEN)
        self.timeout = timeout
        self._owns_client = client is None
        self._client = client or httpx.Client(timeout=timeout)

    def _headers(self, utterance_id: str) -> Dict[str, str]:
        headers = {"Content-Type": "audio/wav", UTTERANCE_HEADER: utterance_id}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def transcribe(self, utterance_id: str, wav_path: Path) -> str:
        try:
            audio = Path(wav_path).read_bytes()
        except OSError as e:
            raise AsrFailure(utterance_id, f"cannot read {wav_path}: {e}")
        try:
            response = self._client.post(
                self.endpoint, content=audio, headers=self._headers(utterance_id), timeout=self.timeout
            )
            response.raise_for_status()
            payload = response.json()
        except httpx.HTTPError as e:
            raise AsrFailure(utterance_id, str(e) or type(e).__name__)
        except ValueError as e:
            raise AsrFailure(utterance_id, f"response is not JSON: {e}")

        transcript = payload.get("transcript") if isinstance(payload, dict) else None
        if not isinstance(transcript, str):
            raise AsrFailure(utterance_id, "response has no transcript field")
        return transcript

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


def make_adapter(kind: str, samples: Optional[Iterable[Tuple[str, Path, str]]] = None, **kwargs) -> AsrAdapter:
    """CLI 用：mock（回显参考）或 http。"""
    if kind in ("mock", AdapterKind.MOCK_LOOKUP.value):
        return MockAsrAdapter.echo(samples or [])
    if kind in ("http", AdapterKind.EXTERNAL_HTTP.value):
        return HttpAsrAdapter(**kwargs)
    raise InputError(f"unknown ASR adapter {kind!r} (expected mock or http)")
