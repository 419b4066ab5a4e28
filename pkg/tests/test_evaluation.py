from pathlib import Path

import jiwer
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import AsrFailure, CorruptLog, EmptyReference, MissingLog
from evaluation.asr import MockAsrAdapter
from evaluation.engine import (
    MIComparison,
    MITrajectory,
    compare_mi_trajectories,
    distance_report,
    embedding_distance_report,
    evaluate_content_quality,
    normalize_for_wer,
    read_mi_trajectory,
    score_utterance,
    wer,
    write_mi_plot,
    write_wer_report,
)
from pipeline import engine as pipeline
from tests.conftest import CONVERGENCE_PAIRS, TOY_N, tiny_config

WORDS = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=8)


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------

def test_normalize_for_wer():
    assert normalize_for_wer("Hello, World!  It's 'fine'.") == ["hello", "world", "it's", "fine"]
    assert normalize_for_wer(" ... ") == []


def test_wer_examples():
    ref = "the cat sat on mat".split()
    assert wer(ref, ref) == (0, 0, 0, 0.0)
    assert wer(ref, "the cat on mat".split()) == (0, 1, 0, 0.2)
    assert wer(ref, "the dog sat on mat".split()) == (1, 0, 0, 0.2)
    assert wer(ref, "the cat sat on the mat".split()) == (0, 0, 1, 0.2)
    assert wer(ref, []) == (0, 5, 0, 1.0)
    with pytest.raises(EmptyReference):
        wer([], ["extra"])


@settings(max_examples=100, deadline=None)
@given(ref=WORDS, hyp=WORDS)
def test_edit_distance_matches_jiwer(ref, hyp):
    s, d, i, rate = wer(ref, hyp)
    expected = jiwer.process_words(" ".join(ref), " ".join(hyp))
    assert s + d + i == expected.substitutions + expected.deletions + expected.insertions
    assert rate == pytest.approx(expected.wer)
    # 替换与删除计数都落在参考词上
    assert s + d <= len(ref)
    assert s + i <= len(hyp)


def test_score_utterance_normalises_both_sides():
    row = score_utterance("u1", "Hello, there!", "hello there")
    assert row.errors == 0 and row.ref_words == 2
    with pytest.raises(EmptyReference):
        score_utterance("u2", "?!", "anything")


def test_corpus_wer_is_pooled(tmp_path):
    samples = [
        ("short", tmp_path / "short.wav", "yes"),
        ("long", tmp_path / "long.wav", "one two three four five six seven eight nine"),
        ("lost", tmp_path / "lost.wav", "never transcribed"),
    ]
    asr = MockAsrAdapter({"short": "no", "long": "one two three four five six seven eight nine"})
    report = evaluate_content_quality(samples, asr, workers=3)

    assert [r.utterance_id for r in report.rows] == ["short", "long"]
    assert report.excluded == ["lost"]
    # 池化：1 个错误 / 10 个参考词，而不是两条 WER 的平均 0.5
    assert report.aggregate == pytest.approx(0.1)

    out = tmp_path / "reports" / "wer.txt"
    write_wer_report(report, out)
    text = out.read_text(encoding="utf-8")
    assert "# aggregate wer=0.100000" in text
    assert "excluded=1" in text


def test_all_excluded_has_no_aggregate(tmp_path):
    report = evaluate_content_quality([("x", tmp_path / "x.wav", "hi")], MockAsrAdapter({}))
    assert report.aggregate is None
    assert "wer=nan" in report.to_text()


def test_echo_adapter_gives_zero_wer(tmp_path):
    samples = [(f"s{i}", tmp_path / f"s{i}.wav", f"sample number {i}") for i in range(4)]
    report = evaluate_content_quality(samples, MockAsrAdapter.echo(samples))
    assert report.aggregate == 0.0
    with pytest.raises(AsrFailure):
        MockAsrAdapter.echo(samples).transcribe("other", tmp_path / "o.wav")


# ---------------------------------------------------------------------------
# MI 轨迹
# ---------------------------------------------------------------------------

def _write_trajectory(run_dir: Path, values, header=True) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# step\tl_mi_estimator\tmi_term"] if header else []
    lines += [f"{step}\t0.0\t{v!r}" for step, v in enumerate(values, start=1)]
    path = run_dir / "mi_trajectory.log"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_tail_mean_uses_last_fifth():
    t = MITrajectory(label="x", steps=list(range(1, 11)), values=[0.0] * 8 + [1.0, 3.0])
    assert t.tail_mean == 2.0
    short = MITrajectory(label="y", steps=[1, 2], values=[4.0, 6.0])
    assert short.tail_mean == 6.0


def test_read_trajectory(tmp_path):
    _write_trajectory(tmp_path / "P10", [0.1, 0.2, 0.3])
    t = read_mi_trajectory(tmp_path / "P10")
    assert t.label == "P10"
    assert t.steps == [1, 2, 3] and t.values == [0.1, 0.2, 0.3]


def test_trajectory_errors(tmp_path):
    with pytest.raises(MissingLog):
        read_mi_trajectory(tmp_path / "absent")
    _write_trajectory(tmp_path / "empty", [])
    with pytest.raises(MissingLog):
        read_mi_trajectory(tmp_path / "empty")

    path = _write_trajectory(tmp_path / "bad", [0.1, 0.2])
    path.write_text(path.read_text(encoding="utf-8") + "garbage\n", encoding="utf-8")
    with pytest.raises(CorruptLog) as excinfo:
        read_mi_trajectory(path)
    assert excinfo.value.line == 4

    path.write_text("1\t0.0\tnan\n", encoding="utf-8")
    with pytest.raises(CorruptLog):
        read_mi_trajectory(path)


def test_compare_runs_and_plot(tmp_path):
    _write_trajectory(tmp_path / "P7", [0.1] * 10)
    _write_trajectory(tmp_path / "P10", [0.1] * 8 + [0.5, 0.7])
    comparison = compare_mi_trajectories([tmp_path / "P7", tmp_path / "P10"])
    assert comparison.ordering == ["P10", "P7"]
    assert comparison.leader == "P10"
    assert comparison.to_text().rstrip().endswith("# highest=P10")

    steps, matrix = comparison.aligned()
    assert steps == list(range(1, 11))
    assert matrix.shape == (2, 10)

    text_plot = write_mi_plot(comparison, tmp_path / "plots" / "mi.tsv")
    assert text_plot.read_text(encoding="utf-8").count("\n") == 21
    png = write_mi_plot(comparison, tmp_path / "plots" / "mi.png")
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_tie_has_no_leader():
    a = MITrajectory(label="a", steps=[1], values=[0.5])
    b = MITrajectory(label="b", steps=[1], values=[0.5])
    comparison = MIComparison(trajectories=[b, a])
    assert comparison.ordering == ["a", "b"]
    assert comparison.leader is None
    assert "# highest=tie" in comparison.to_text()


@pytest.mark.slow
def test_mi_constrained_system_keeps_more_information_than_text_predicted(tmp_path, convergence_run, convergence_pretrained):
    index, _ = pipeline.load_run_selection(convergence_run)
    seeds = [11, 12, 13]
    run_dirs, labels = [], []
    for system_id in ("P10", "B2"):
        for seed in seeds:
            cfg = tiny_config(system_id=system_id, seed=str(seed), **CONVERGENCE_PAIRS)
            manifest = pipeline.load_run(convergence_run, cfg)
            run_dir = tmp_path / f"{system_id}_{seed}"
            pipeline.train_system(manifest, index, convergence_pretrained, cfg, run_dir=run_dir)
            run_dirs.append(run_dir)
            labels.append(f"{system_id}:{seed}")

    comparison = compare_mi_trajectories(run_dirs, labels)
    assert all(len(t.steps) == 300 for t in comparison.trajectories)
    means = comparison.tail_means
    p10 = np.mean([means[f"P10:{s}"] for s in seeds])
    b2 = np.mean([means[f"B2:{s}"] for s in seeds])
    assert p10 > b2, f"tail MI P10={p10:.4f} B2={b2:.4f}"


# ---------------------------------------------------------------------------
# 风格向量距离
# ---------------------------------------------------------------------------

def test_distance_report():
    E = np.array([[1.0, 0.0], [0.0, 2.0]])
    E_prime = np.array([[1.0, 0.0], [0.0, -2.0]])
    report = distance_report(["a", "b"], E, E_prime)
    assert [r.l2 for r in report.rows] == [0.0, 4.0]
    assert [r.cosine for r in report.rows] == [1.0, -1.0]
    assert report.mean_l2 == 2.0 and report.mean_cosine == 0.0
    assert report.to_text().rstrip().endswith("n=2")


def test_embedding_distance_report(toy_manifest, toy_index, pretrained):
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, tiny_config(system_id="P9"))
    frozen = pipeline.load_frozen(pretrained, tiny_config())
    report = embedding_distance_report(result.checkpoint, frozen, toy_manifest, toy_index)
    assert len(report.rows) == TOY_N
    assert all(r.l2 >= 0.0 and -1.0 <= r.cosine <= 1.0 for r in report.rows)
