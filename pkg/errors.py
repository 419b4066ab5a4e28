"""
errors.py - 统一异常层

引擎层只负责抛出异常；接入层（cli.py / FastAPI 路由）负责把异常翻译成
退出码或 HTTP 状态码。

  - MRTTSError  → 退出码 3（运行期失败）
  - InputError  → 退出码 2（用法 / 校验失败）
"""

from typing import Optional


class MRTTSError(Exception):
    """所有领域异常的基类。"""

    exit_code = 3

    def __init__(self, msg: str = "") -> None:
        super().__init__(msg or self.__class__.__name__)
        self.msg = msg or self.__class__.__name__


class InputError(MRTTSError):
    """用法或输入校验错误。"""

    exit_code = 2


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

class MissingFile(InputError):
    def __init__(self, path) -> None:
        super().__init__(f"file not found: {path}")
        self.path = str(path)


class MalformedRecord(InputError):
    def __init__(self, line: int, detail: str = "") -> None:
        msg = f"malformed record at line {line}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.line = line


class DuplicateId(InputError):
    def __init__(self, utterance_id: str) -> None:
        super().__init__(f"duplicate utterance id: {utterance_id}")
        self.utterance_id = utterance_id


class EmptyAudio(InputError):
    pass


class SampleRateMismatch(InputError):
    def __init__(self, got: int, expected: int) -> None:
        super().__init__(f"sample rate {got} Hz does not match configured {expected} Hz")
        self.got = got
        self.expected = expected


class IoError(MRTTSError):
    pass


# ---------------------------------------------------------------------------
# semantics
# ---------------------------------------------------------------------------

class EmbedderFailure(MRTTSError):
    def __init__(self, text: str, detail: str = "") -> None:
        msg = f"embedder failed on {text!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.text = text


class EmptyText(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class ZeroVector(InputError):
    pass


class UnknownId(InputError):
    def __init__(self, utterance_id: str) -> None:
        super().__init__(f"unknown utterance id: {utterance_id}")
        self.utterance_id = utterance_id


class PoolTooSmall(InputError):
    def __init__(self, available: int, required: int) -> None:
        super().__init__(f"PoolTooSmall: {available} candidates, {required} required")
        self.available = available
        self.required = required


# ---------------------------------------------------------------------------
# 神经网络相关
# ---------------------------------------------------------------------------

class ShapeMismatch(InputError):
    pass


class NonFiniteActivation(MRTTSError):
    pass


class NonFiniteScore(MRTTSError):
    pass


class BatchTooSmall(InputError):
    def __init__(self, size: int) -> None:
        super().__init__(f"batch of {size} is too small, need at least 2")
        self.size = size


class VocabularyError(InputError):
    pass


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class DataError(InputError):
    pass


class DivergenceDetected(MRTTSError):
    def __init__(self, step: int, detail: str = "") -> None:
        super().__init__(f"loss became non-finite at step {step} {detail}".strip())
        self.step = step


class ConfigMismatch(InputError):
    pass


class UnknownConfig(InputError):
    pass


class UnknownSystem(InputError):
    def __init__(self, system_id: str, valid) -> None:
        super().__init__(f"unknown system id {system_id!r}; valid ids: {', '.join(valid)}")
        self.system_id = system_id


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

class EmptyReference(InputError):
    pass


class AsrFailure(MRTTSError):
    def __init__(self, utterance_id: str, detail: str = "") -> None:
        msg = f"ASR failed for {utterance_id}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.utterance_id = utterance_id


class MissingLog(InputError):
    def __init__(self, path, detail: str = "") -> None:
        msg = f"missing MI trajectory log: {path}"
        if detail:
            msg = f"{path}: {detail}"
        super().__init__(msg)
        self.path = str(path)


class CorruptLog(MissingLog):
    def __init__(self, path, line: int, detail: Optional[str] = None) -> None:
        super().__init__(path, f"corrupt entry at line {line}" + (f" ({detail})" if detail else ""))
        self.line = line
