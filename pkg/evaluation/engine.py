"""
evaluation/engine.py - 客观评测引擎层

  - WER：词级最小编辑距离对齐，语料级 WER 按 (ΣS+ΣD+ΣI)/Σ参考词数 汇总；
  - MI 轨迹：读取各运行目录的 mi_trajectory.log，比较尾部窗口均值；
  - 风格向量距离：逐条统计 ‖E − E′‖ 与余弦相似度。

纯逻辑，不依赖 FastAPI 或数据库。
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from errors import AsrFailure, CorruptLog, EmptyReference, IoError, MissingLog
from evaluation.asr import AsrAdapter
from pipeline.checkpoint import Checkpoint
from pipeline.engine import load_system, style_pairs
from style_encoder.engine import FrozenStyleEncoder

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "mi_trajectory.log"
TAIL_FRACTION = 0.2

_NON_WORD = re.compile(r"[^a-z0-9'\s]")


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------

class UtteranceWer(BaseModel):
    utterance_id: str
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    hypothesis: str = ""

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words


class WerReport(BaseModel):
    rows: List[UtteranceWer] = []
    excluded: List[str] = []

    @property
    def total_errors(self) -> int:
        return sum(r.errors for r in self.rows)

    @property
    def total_ref_words(self) -> int:
        return sum(r.ref_words for r in self.rows)

    @property
    def aggregate(self) -> Optional[float]:
        """池化 WER；全部被排除时为 None。"""
        if not self.rows:
            return None
        return self.total_errors / self.total_ref_words

    def to_text(self) -> str:
        lines = ["# utterance_id\tS\tD\tI\tN\twer"]
        for r in self.rows:
            lines.append(f"{r.utterance_id}\t{r.substitutions}\t{r.deletions}\t{r.insertions}\t{r.ref_words}\t{r.wer:.6f}")
        aggregate = "nan" if self.aggregate is None else f"{self.aggregate:.6f}"
        lines.append(
            f"# aggregate wer={aggregate} S={sum(r.substitutions for r in self.rows)} "
            f"D={sum(r.deletions for r in self.rows)} I={sum(r.insertions for r in self.rows)} "
            f"N={self.total_ref_words} utterances={len(self.rows)} excluded={len(self.excluded)}"
        )
        return "\n".join(lines) + "\n"


def normalize_for_wer(text: str) -> List[str]:
    """小写、去标点（保留词内撇号）、按空白切词。参考与识别结果走同一条路径。"""
    cleaned = _NON_WORD.sub(" ", text.lower())
    return [w.strip("'") for w in cleaned.split() if w.strip("'")]


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> Tuple[int, int, int, float]:
    """
    单位代价的词级 Levenshtein 对齐，返回 (S, D, I, wer)。

    回溯时同代价路径按 对角线（匹配/替换）> 删除 > 插入 的顺序取，结果确定。
    """
    ref, hyp = list(reference), list(hypothesis)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise EmptyReference("reference has no words")

    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diag, dist[i - 1, j] + 1, dist[i, j - 1] + 1)

    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins, (s + d + ins) / n


def score_utterance(utterance_id: str, reference: str, hypothesis: str) -> UtteranceWer:
    ref_words = normalize_for_wer(reference)
    if not ref_words:
        raise EmptyReference(f"{utterance_id}: reference is empty after normalization")
    s, d, i, _ = wer(ref_words, normalize_for_wer(hypothesis))
    return UtteranceWer(
        utterance_id=utterance_id,
        substitutions=s,
        deletions=d,
        insertions=i,
        ref_words=len(ref_words),
        hypothesis=hypothesis,
    )


def evaluate_content_quality(
    samples: Sequence[Tuple[str, Path, str]],
    asr: AsrAdapter,
    workers: int = 4,
) -> WerReport:
    """
    samples 为 (utterance_id, wav, 参考文本)。ASR 请求按 workers 并发，
    报告行保持输入顺序；AsrFailure 的语句记入 excluded，不进入汇总。
    """

    def _one(sample: Tuple[str, Path, str]) -> Optional[str]:
        utterance_id, wav_path, _ = sample
        try:
            return asr.transcribe(utterance_id, Path(wav_path))
        except AsrFailure as e:
            logger.warning("excluding %s from WER: %s", utterance_id, e.msg)
            return None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        transcripts = list(pool.map(_one, samples))

    report = WerReport()
    for (utterance_id, _, reference), transcript in zip(samples, transcripts):
        if transcript is None:
            report.excluded.append(utterance_id)
            continue
        report.rows.append(score_utterance(utterance_id, reference, transcript))
    logger.info(
        "WER over %d utterances (%d excluded): %s",
        len(report.rows), len(report.excluded), report.aggregate,
    )
    return report


def write_wer_report(report: WerReport, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_text(), encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}")


# ---------------------------------------------------------------------------
# MI 轨迹
# ---------------------------------------------------------------------------

class MITrajectory(BaseModel):
    label: str
    steps: List[int]
    values: List[float]

    @property
    def tail_mean(self) -> float:
        k = max(1, math.ceil(len(self.values) * TAIL_FRACTION))
        return float(np.mean(self.values[-k:]))


class MIComparison(BaseModel):
    trajectories: List[MITrajectory]

    @property
    def tail_means(self) -> Dict[str, float]:
        return {t.label: t.tail_mean for t in self.trajectories}

    @property
    def ordering(self) -> List[str]:
        """按尾部均值降序；相等时按标签。"""
        means = self.tail_means
        return sorted(means, key=lambda label: (-means[label], label))

    @property
    def leader(self) -> Optional[str]:
        """尾部均值最高的运行；并列第一时为 None。"""
        ordering = self.ordering
        if len(ordering) > 1 and self.tail_means[ordering[0]] == self.tail_means[ordering[1]]:
            return None
        return ordering[0] if ordering else None

    def aligned(self) -> Tuple[List[int], np.ndarray]:
        """所有运行共有的步数，以及 (运行数, 步数) 的数值矩阵。"""
        common = set(self.trajectories[0].steps)
        for t in self.trajectories[1:]:
            common &= set(t.steps)
        steps = sorted(common)
        matrix = np.array([
            [dict(zip(t.steps, t.values))[s] for s in steps] for t in self.trajectories
        ])
        return steps, matrix

    def to_text(self) -> str:
        lines = ["# rank\trun\ttail_mean"]
        for rank, label in enumerate(self.ordering, start=1):
            lines.append(f"{rank}\t{label}\t{self.tail_means[label]!r}")
        leader = self.leader
        lines.append(f"# highest={leader}" if leader else "# highest=tie")
        return "\n".join(lines) + "\n"


def read_mi_trajectory(path: Path, label: Optional[str] = None) -> MITrajectory:
    """读 mi_trajectory.log（step<TAB>l_mi_estimator<TAB>mi_term），取最后一列作为估计值。"""
    path = Path(path)
    if path.is_dir():
        path = path / TRAJECTORY_FILE
    if not path.exists():
        raise MissingLog(path)

    steps: List[int] = []
    values: List[float] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise CorruptLog(path, lineno, "expected step<TAB>...<TAB>value")
        try:
            step, value = int(parts[0]), float(parts[-1])
        except (ValueError, IndexError):
            raise CorruptLog(path, lineno, "expected step<TAB>...<TAB>value")
        if not math.isfinite(value):
            raise CorruptLog(path, lineno, f"non-finite value {parts[-1]!r}")
        steps.append(step)
        values.append(value)
    if not values:
        raise MissingLog(path, "log has no entries")
    return MITrajectory(label=label or path.parent.name, steps=steps, values=values)


def compare_mi_trajectories(run_dirs: Sequence[Path], labels: Optional[Sequence[str]] = None) -> MIComparison:
    labels = list(labels) if labels else [Path(d).name for d in run_dirs]
    if len(set(labels)) != len(labels):
        labels = [str(d) for d in run_dirs]
    return MIComparison(trajectories=[read_mi_trajectory(d, label) for d, label in zip(run_dirs, labels)])


def write_mi_plot(comparison: MIComparison, out: Path) -> Path:
    """.png 结尾输出曲线图，否则输出 (run, step, value) 序列文本。"""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".png":
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 4.5))
        for t in comparison.trajectories:
            ax.plot(t.steps, t.values, label=f"{t.label} (tail {t.tail_mean:.3f})")
        ax.set_xlabel("step")
        ax.set_ylabel("estimated MI (nats)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    else:
        lines = ["# run\tstep\tvalue"]
        for t in comparison.trajectories:
            lines += [f"{t.label}\t{s}\t{v!r}" for s, v in zip(t.steps, t.values)]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# 风格向量距离
# ---------------------------------------------------------------------------

class DistanceRow(BaseModel):
    utterance_id: str
    l2: float
    cosine: float


class DistanceReport(BaseModel):
    rows: List[DistanceRow]

    @property
    def mean_l2(self) -> float:
        return float(np.mean([r.l2 for r in self.rows]))

    @property
    def mean_cosine(self) -> float:
        return float(np.mean([r.cosine for r in self.rows]))

    def to_text(self) -> str:
        lines = ["# utterance_id\tl2\tcosine"]
        lines += [f"{r.utterance_id}\t{r.l2:.6f}\t{r.cosine:.6f}" for r in self.rows]
        lines.append(f"# mean l2={self.mean_l2:.6f} cosine={self.mean_cosine:.6f} n={len(self.rows)}")
        return "\n".join(lines) + "\n"


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def distance_report(ids: Sequence[str], E: np.ndarray, E_prime: np.ndarray) -> DistanceReport:
    E = np.asarray(E, dtype=np.float64)
    E_prime = np.asarray(E_prime, dtype=np.float64)
    rows = [
        DistanceRow(utterance_id=i, l2=float(np.linalg.norm(e - ep)), cosine=_cosine(e, ep))
        for i, e, ep in zip(ids, E, E_prime)
    ]
    return DistanceReport(rows=rows)


def embedding_distance_report(
    checkpoint: Checkpoint,
    frozen: FrozenStyleEncoder,
    manifest,
    selection_index: Optional[Mapping] = None,
) -> DistanceReport:
    """在 eval 模式下导出清单中每条语句的 (E, E′) 并统计距离。"""
    model, cfg = load_system(checkpoint)
    ids, E, E_prime = style_pairs(model, frozen, manifest, cfg, selection_index)
    return distance_report(ids, E, E_prime)
