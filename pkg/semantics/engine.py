"""
semantics/engine.py - 语义选参考引擎层

句向量：上下文编码器倒数第二层隐状态在 token 上取平均（不含分类哨兵 token）。
选参考：以余弦相似度在训练池中取 Top-N，相似度相同时按 utterance id 升序。

支持两种编码器后端：
  - FileEmbedder：读取离线导出的逐 token 隐状态（<sha1(text)>.npz）
  - ToyHashEmbedder：按 token 哈希生成确定性向量，测试与玩具语料用

不依赖 FastAPI 或数据库。
"""

from __future__ import annotations

import hashlib
import logging
import re
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from corpus.engine import Manifest, normalize_text
from errors import (
    DimensionMismatch,
    EmbedderFailure,
    EmptyText,
    MalformedRecord,
    MissingFile,
    PoolTooSmall,
    UnknownConfig,
    UnknownId,
    ZeroVector,
)
from settings import DEFAULT_CHARSET, SelectionConfig

logger = logging.getLogger(__name__)

CLS_TOKEN = "[CLS]"
INPUT_TARGET = "<input>"

_TOKEN = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")
# 分词器的特殊 token 拼写，不算内容
_SPECIAL = re.compile(r"\[(?:cls|sep|pad|mask|unk)\]", re.IGNORECASE)
_HEADER = re.compile(r"^#embeddings embedder=(?P<embedder>.*) dimension=(?P<dimension>\d+) count=(?P<count>\d+)$")


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SentenceEmbedding:
    utterance_id: str
    vector: np.ndarray


@dataclass(frozen=True)
class EmbeddingCache:
    embeddings: Dict[str, SentenceEmbedding]
    embedder_name: str
    dimension: int

    def __len__(self) -> int:
        return len(self.embeddings)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self.embeddings

    def __iter__(self) -> Iterator[str]:
        return iter(self.embeddings)

    def ids(self) -> List[str]:
        return list(self.embeddings)

    def vector(self, utterance_id: str) -> np.ndarray:
        if utterance_id not in self.embeddings:
            raise UnknownId(utterance_id)
        return self.embeddings[utterance_id].vector

    def scaled(self, factor: float) -> "EmbeddingCache":
        return EmbeddingCache(
            embeddings={k: SentenceEmbedding(k, e.vector * factor) for k, e in self.embeddings.items()},
            embedder_name=self.embedder_name,
            dimension=self.dimension,
        )


class ReferenceSet(BaseModel):
    target_id: str
    references: List[Tuple[str, float]]

    @model_validator(mode="after")
    def _check(self) -> "ReferenceSet":
        sims = [s for _, s in self.references]
        ids = [r for r, _ in self.references]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate reference ids")
        if any(not -1.0 <= s <= 1.0 for s in sims):
            raise ValueError("similarity outside [-1, 1]")
        if any(a < b for a, b in zip(sims, sims[1:])):
            raise ValueError("similarities must be non-increasing")
        return self

    @property
    def reference_ids(self) -> List[str]:
        return [r for r, _ in self.references]


# ---------------------------------------------------------------------------
# 编码器接口
# ---------------------------------------------------------------------------

class ContextualSentenceEmbedder(ABC):
    """逐 token、逐层隐状态的来源。"""

    cls_token: str = CLS_TOKEN

    @property
    @abstractmethod
    def name(self) -> str:
        """可由 embedder_from_name 还原的来源名。"""
        ...

    @abstractmethod
    def hidden_states(self, text: str) -> Tuple[List[str], np.ndarray]:
        """返回 (tokens, hidden)，hidden 形状为 [n_layers, n_tokens, d]。"""
        ...


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


class ToyHashEmbedder(ContextualSentenceEmbedder):
    """每个 (层, token) 的向量由 blake2b 哈希播种，与上下文无关，完全确定。"""

    def __init__(self, dimension: int = 32, n_layers: int = 3, seed: int = 0) -> None:
        if n_layers < 2:
            raise UnknownConfig("toy embedder needs at least two layers")
        self.dimension = dimension
        self.n_layers = n_layers
        self.seed = seed

    @property
    def name(self) -> str:
        return f"toy-hash:d={self.dimension}:layers={self.n_layers}:seed={self.seed}"

    def _token_vector(self, token: str, layer: int) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}|{layer}|{token}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dimension)

    def hidden_states(self, text: str) -> Tuple[List[str], np.ndarray]:
        tokens = [self.cls_token] + tokenize(_SPECIAL.sub(" ", text))
        hidden = np.stack(
            [np.stack([self._token_vector(tok, layer) for tok in tokens]) for layer in range(self.n_layers)]
        )
        return tokens, hidden


class FileEmbedder(ContextualSentenceEmbedder):
    """
    读取离线导出的隐状态：root/<sha1(text)>.npz，包含
      tokens: 字符串数组 (n_tokens,)
      hidden: float 数组 (n_layers, n_tokens, d)
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    @property
    def name(self) -> str:
        return f"file:{self.root}"

    @staticmethod
    def key(text: str) -> str:
        return hashlib.sha1(text.encode("utf-8")).hexdigest()

    def hidden_states(self, text: str) -> Tuple[List[str], np.ndarray]:
        path = self.root / f"{self.key(text)}.npz"
        if not path.exists():
            raise MissingFile(path)
        with np.load(path, allow_pickle=False) as data:
            return [str(t) for t in data["tokens"]], np.asarray(data["hidden"], dtype=np.float64)


def embedder_from_name(name: str, root: Optional[Path] = None) -> ContextualSentenceEmbedder:
    kind, _, rest = name.partition(":")
    if kind == "toy-hash":
        params = dict(item.split("=", 1) for item in rest.split(":") if item)
        return ToyHashEmbedder(
            dimension=int(params.get("d", 32)),
            n_layers=int(params.get("layers", 3)),
            seed=int(params.get("seed", 0)),
        )
    if kind == "file":
        return FileEmbedder(Path(root) if root else Path(rest))
    if kind == "toy":
        return ToyHashEmbedder()
    raise UnknownConfig(f"unknown embedder: {name!r} (expected toy-hash:... or file:<dir>)")


# ---------------------------------------------------------------------------
# 句向量
# ---------------------------------------------------------------------------

def sentence_vector(text: str, embedder: ContextualSentenceEmbedder) -> np.ndarray:
    """倒数第二层、去掉分类哨兵后的 token 平均。"""
    try:
        tokens, hidden = embedder.hidden_states(text)
    except (MissingFile, OSError, KeyError, ValueError) as e:
        raise EmbedderFailure(text, str(e))

    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 3 or hidden.shape[0] < 2 or hidden.shape[1] != len(tokens):
        raise EmbedderFailure(text, f"expected [n_layers>=2, {len(tokens)}, d] hidden states, got {hidden.shape}")

    keep = [i for i, tok in enumerate(tokens) if tok != embedder.cls_token]
    if not keep:
        raise EmptyText(f"no content tokens in {text!r}")
    vector = hidden[-2, keep, :].mean(axis=0)
    if not np.all(np.isfinite(vector)):
        raise EmbedderFailure(text, "non-finite hidden states")
    return vector


def embed_sentences(
    texts: Sequence[str],
    embedder: ContextualSentenceEmbedder,
    ids: Optional[Sequence[str]] = None,
) -> EmbeddingCache:
    ids = list(ids) if ids is not None else [str(i) for i in range(len(texts))]
    if len(ids) != len(texts):
        raise DimensionMismatch(f"{len(ids)} ids for {len(texts)} texts")

    embeddings: Dict[str, SentenceEmbedding] = {}
    dimension: Optional[int] = None
    for utt_id, text in zip(ids, texts):
        vector = sentence_vector(text, embedder)
        if dimension is None:
            dimension = int(vector.shape[0])
        elif vector.shape[0] != dimension:
            raise DimensionMismatch(f"embedding of {utt_id} has dimension {vector.shape[0]}, expected {dimension}")
        embeddings[utt_id] = SentenceEmbedding(utt_id, vector)

    return EmbeddingCache(embeddings=embeddings, embedder_name=embedder.name, dimension=dimension or 0)


def embed_manifest(manifest: Manifest, embedder: ContextualSentenceEmbedder) -> EmbeddingCache:
    cache = embed_sentences([u.text for u in manifest], embedder, ids=manifest.ids())
    for utt in manifest:
        utt.embedding_id = utt.id
    logger.info("embedded %d sentences with %s (d=%d)", len(cache), cache.embedder_name, cache.dimension)
    return cache


# ---------------------------------------------------------------------------
# 相似度与选参考
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    sim = float(np.dot(a, b)) / float(np.sqrt(aa * bb))
    return min(1.0, max(-1.0, sim))


def _rank(query: np.ndarray, candidates: Sequence[str], cache: EmbeddingCache, n: int) -> List[Tuple[str, float]]:
    scored = [(cand, cosine_similarity(query, cache.vector(cand))) for cand in candidates]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:n]


def _pool(cache: EmbeddingCache, cfg: SelectionConfig) -> List[str]:
    pool = list(cfg.pool) if cfg.pool is not None else cache.ids()
    for utt_id in pool:
        if utt_id not in cache:
            raise UnknownId(utt_id)
    return pool


def select_references(target_id: str, cache: EmbeddingCache, cfg: SelectionConfig) -> ReferenceSet:
    query = cache.vector(target_id)
    candidates = _pool(cache, cfg)
    if cfg.exclude_target:
        candidates = [c for c in candidates if c != target_id]
    if len(candidates) < cfg.n_references:
        raise PoolTooSmall(len(candidates), cfg.n_references)
    return ReferenceSet(target_id=target_id, references=_rank(query, candidates, cache, cfg.n_references))


def select_for_text(
    text: str,
    embedder: ContextualSentenceEmbedder,
    cache: EmbeddingCache,
    cfg: SelectionConfig,
    texts_by_id: Optional[Mapping[str, str]] = None,
    charset: str = DEFAULT_CHARSET,
) -> ReferenceSet:
    """推理期选参考：对任意文本编码后在训练池中检索；排除转写相同的池内语句。"""
    normalized = normalize_text(text, charset)
    if not normalized:
        raise EmptyText("input text is empty after normalization")
    query = sentence_vector(normalized, embedder)
    if query.shape[0] != cache.dimension:
        raise DimensionMismatch(f"input embedding has dimension {query.shape[0]}, cache has {cache.dimension}")

    candidates = _pool(cache, cfg)
    if cfg.exclude_target and texts_by_id:
        candidates = [c for c in candidates if texts_by_id.get(c) != normalized]
    if len(candidates) < cfg.n_references:
        raise PoolTooSmall(len(candidates), cfg.n_references)
    return ReferenceSet(target_id=INPUT_TARGET, references=_rank(query, candidates, cache, cfg.n_references))


def build_selection_index(
    manifest: Manifest,
    cache: EmbeddingCache,
    cfg: SelectionConfig,
    workers: int = 1,
) -> Dict[str, ReferenceSet]:
    ids = manifest.ids()
    for utt_id in ids:
        if utt_id not in cache:
            raise UnknownId(utt_id)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sets = list(pool.map(lambda t: select_references(t, cache, cfg), ids))
    return dict(zip(ids, sets))


# ---------------------------------------------------------------------------
# 持久化
# ---------------------------------------------------------------------------

def save_embedding_cache(cache: EmbeddingCache, path: Path) -> None:
    lines = [f"#embeddings embedder={cache.embedder_name} dimension={cache.dimension} count={len(cache)}"]
    for utt_id, emb in cache.embeddings.items():
        lines.append(f"{utt_id}|" + ",".join(repr(float(v)) for v in emb.vector))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embedding_cache(path: Path) -> EmbeddingCache:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = _HEADER.match(lines[0]) if lines else None
    if header is None:
        raise MalformedRecord(1, "expected #embeddings embedder=<name> dimension=<d> count=<n>")
    dimension, count = int(header["dimension"]), int(header["count"])

    embeddings: Dict[str, SentenceEmbedding] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        utt_id, sep, values = line.partition("|")
        if not sep:
            raise MalformedRecord(lineno, "expected id|v1,...,vd")
        vector = np.array([float(v) for v in values.split(",")], dtype=np.float64)
        if vector.shape[0] != dimension:
            raise MalformedRecord(lineno, f"expected {dimension} values, got {vector.shape[0]}")
        embeddings[utt_id] = SentenceEmbedding(utt_id, vector)
    if len(embeddings) != count:
        raise MalformedRecord(len(lines), f"header count {count} != {len(embeddings)} records")
    return EmbeddingCache(embeddings=embeddings, embedder_name=header["embedder"], dimension=dimension)


def save_selection_index(index: Mapping[str, ReferenceSet], path: Path) -> None:
    lines = []
    for target_id, refs in index.items():
        lines.append("|".join([target_id] + [f"{r}:{s!r}" for r, s in refs.references]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_selection_index(path: Path) -> Dict[str, ReferenceSet]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    index: Dict[str, ReferenceSet] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        target_id, *fields = line.split("|")
        try:
            refs = [(r, float(s)) for r, _, s in (f.rpartition(":") for f in fields)]
            index[target_id] = ReferenceSet(target_id=target_id, references=refs)
        except ValueError as e:
            raise MalformedRecord(lineno, str(e))
    return index
