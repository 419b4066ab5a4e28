import math

import numpy as np
import pytest
import torch

from errors import ConfigMismatch, DataError, MissingFile, UnknownConfig
from pipeline import engine as pipeline
from pipeline.checkpoint import load_checkpoint, save_checkpoint
from pipeline.systems import SYSTEM_TABLE
from settings import build_config
from tests.conftest import CONVERGENCE_PAIRS, TOY_N, tiny_config


def _system_cfg(system_id, **overrides):
    return tiny_config(system_id=system_id, **overrides)


# ---------------------------------------------------------------------------
# 记录
# ---------------------------------------------------------------------------

def test_record_line_survives_parsing():
    record = pipeline.TrainStepRecord(
        step=3,
        losses=pipeline.LossBreakdown.compose(l_mel=0.5, mse_term=0.1, mi_term=0.3, l_stop=0.2),
        attention=[0.25, 0.75],
        timing=1.5,
    )
    line = record.to_line()
    assert "timing" not in line
    back = pipeline.TrainStepRecord.from_line(line)
    assert back.step == 3
    assert back.losses == record.losses
    assert back.attention == [0.25, 0.75]
    assert pipeline.TrainStepRecord.from_line(line.replace("0.25,0.75", "-")).attention is None


def test_fit_frames():
    frames = np.ones((3, 2), dtype=np.float32)
    assert pipeline.fit_frames(frames, 2, -5.0).shape == (2, 2)
    padded = pipeline.fit_frames(frames, 5, -5.0)
    assert padded.shape == (5, 2)
    assert np.all(padded[3:] == -5.0)


# ---------------------------------------------------------------------------
# 数据
# ---------------------------------------------------------------------------

def test_training_data_collates_references(toy_manifest, toy_index):
    data = pipeline.TrainingData(toy_manifest, _system_cfg("P10", n_references="3"), toy_index)
    batch = data.collate(toy_manifest.ids()[:3])
    assert batch.refs.shape == (3, 3, 32, 20)
    assert batch.target_ref.shape == (3, 32, 20)
    assert batch.mels.shape[0] == 3
    assert batch.reference_ids[0] == toy_index[batch.ids[0]].reference_ids
    assert all(batch.ids[i] not in batch.reference_ids[i] for i in range(3))


def test_training_data_batches_are_seeded(toy_manifest):
    data = pipeline.TrainingData(toy_manifest, _system_cfg("B1"))
    first = [b.ids for _, b in zip(range(3), data.batches(4, seed=5))]
    again = [b.ids for _, b in zip(range(3), data.batches(4, seed=5))]
    assert first == again
    assert all(len(ids) == 4 for ids in first)
    assert sorted(first[0] + first[1]) == sorted(toy_manifest.ids())


def test_training_data_errors(toy_manifest, toy_index):
    with pytest.raises(DataError):
        pipeline.TrainingData(toy_manifest, _system_cfg("P10"), None)
    toy_manifest.get(toy_manifest.ids()[0]).mel = None
    with pytest.raises(DataError):
        pipeline.TrainingData(toy_manifest, _system_cfg("B1"), toy_index)


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

def test_full_system_training(tmp_path, toy_manifest, toy_index, pretrained):
    cfg = _system_cfg("P10", debug_trace="true")
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, cfg, run_dir=tmp_path)

    assert len(result.records) == 4
    assert result.checkpoint.system_id == "P10"
    assert set(result.checkpoint.modules) == {"acoustic", "style_encoder", "attention"}

    records = pipeline.read_records(tmp_path / pipeline.RECORDS_FILE)
    assert [r.step for r in records] == [1, 2, 3, 4]
    for rec in records:
        losses = rec.losses
        assert losses.l_s == losses.mse_term - losses.mi_term
        assert losses.l_total == losses.l_mel + losses.l_s
        assert len(rec.attention) == 3
        assert sum(rec.attention) == pytest.approx(1.0)

    trajectory = (tmp_path / pipeline.MI_TRAJECTORY_FILE).read_text(encoding="utf-8").splitlines()
    assert trajectory[0].startswith("#")
    assert len(trajectory) == 5
    attention_lines = (tmp_path / pipeline.ATTENTION_FILE).read_text(encoding="utf-8").splitlines()
    assert len(attention_lines) == 4 * 4


def test_frozen_target_encoder_is_untouched(toy_manifest, toy_index, pretrained):
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, _system_cfg("P6"))
    frozen_state = result.frozen.state_dict()
    for key, value in pretrained.modules["style_encoder"].items():
        assert torch.equal(frozen_state[key], value)
    # 可训练编码器从头初始化并且确实更新了
    trained = result.model.style_encoder.state_dict()
    assert any(not torch.equal(trained[k], v) for k, v in pretrained.modules["style_encoder"].items())


@pytest.mark.parametrize("system_id", list(SYSTEM_TABLE))
def test_loss_bookkeeping_for_every_system(system_id, tmp_path, toy_manifest, toy_index, pretrained):
    flags = SYSTEM_TABLE[system_id]
    cfg = _system_cfg(system_id, steps="20")
    pipeline.train_system(toy_manifest, toy_index, pretrained, cfg, run_dir=tmp_path)

    records = pipeline.read_records(tmp_path / pipeline.RECORDS_FILE)
    assert [r.step for r in records] == list(range(1, 21))
    for rec in records:
        losses = rec.losses
        assert losses.l_s == losses.mse_term - losses.mi_term
        assert losses.l_total == losses.l_mel + losses.l_s
        assert math.isfinite(losses.l_stop) and losses.l_stop >= 0.0
        if not flags.use_mse:
            assert losses.mse_term == 0.0
        if not flags.use_mi:
            assert losses.mi_term == 0.0
        if not (flags.use_mse or flags.use_mi):
            assert losses.l_s == 0.0
    if flags.use_mse:
        assert all(r.losses.mse_term > 0.0 for r in records)


@pytest.mark.slow
def test_frozen_encoder_is_bit_identical_after_long_run(toy_manifest, toy_index, pretrained):
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, _system_cfg("P10", steps="100"))
    assert len(result.records) == 100
    assert all(not p.requires_grad for p in result.frozen.module.parameters())
    frozen_state = result.frozen.state_dict()
    assert set(frozen_state) == set(pretrained.modules["style_encoder"])
    for key, value in pretrained.modules["style_encoder"].items():
        assert torch.equal(frozen_state[key], value)


def test_baseline_has_no_style_pathway(toy_manifest):
    result = pipeline.train_system(toy_manifest, None, None, _system_cfg("B1"))
    assert set(result.checkpoint.modules) == {"acoustic"}
    assert result.frozen is None and result.estimator is None
    for rec in result.records:
        assert rec.losses.mse_term == 0.0 and rec.losses.mi_term == 0.0
        assert rec.attention is None


def test_text_predicted_style_baseline(toy_manifest, pretrained):
    result = pipeline.train_system(toy_manifest, None, pretrained, _system_cfg("B2"))
    assert set(result.checkpoint.modules) == {"acoustic", "head"}
    assert all(rec.losses.mse_term > 0.0 for rec in result.records)
    assert all(rec.losses.mi_term == 0.0 for rec in result.records)


def test_unconstrained_mean_aggregation(toy_manifest, toy_index):
    result = pipeline.train_system(toy_manifest, toy_index, None, _system_cfg("P1"))
    assert result.model.attention is None
    assert all(rec.attention is None and rec.losses.l_s == 0.0 for rec in result.records)


def test_training_is_deterministic(toy_manifest, toy_index, pretrained):
    cfg = _system_cfg("P8")
    a = pipeline.train_system(toy_manifest, toy_index, pretrained, cfg)
    b = pipeline.train_system(toy_manifest, toy_index, pretrained, cfg)
    assert [r.to_line() for r in a.records] == [r.to_line() for r in b.records]


def test_constraint_needs_pretrained_encoder(toy_manifest, toy_index, pretrained):
    with pytest.raises(ConfigMismatch):
        pipeline.train_system(toy_manifest, toy_index, None, _system_cfg("P10"))
    with pytest.raises(ConfigMismatch):
        pipeline.train_system(toy_manifest, toy_index, pretrained, _system_cfg("P5", batch_size="1"))


def test_attention_width_must_match_style(toy_manifest, toy_index, pretrained):
    cfg = _system_cfg("P3", **{"attention.d_v": "8"})
    with pytest.raises(ConfigMismatch):
        pipeline.train_system(toy_manifest, toy_index, pretrained, cfg)


def _l_mel_window(records, last_step, width=10):
    values = [r.losses.l_mel for r in records if last_step - width < r.step <= last_step]
    assert len(values) == width
    return float(np.mean(values))


def _assert_mel_loss_halves(records):
    assert len(records) == 300
    early = _l_mel_window(records, 15)
    late = _l_mel_window(records, 300)
    assert late <= 0.5 * early, f"windowed l_mel {early:.4f} -> {late:.4f}"


@pytest.mark.slow
@pytest.mark.parametrize("system_id", ["P10", "B1"])
def test_training_halves_mel_loss(system_id, convergence_run, convergence_pretrained):
    cfg = tiny_config(system_id=system_id, **CONVERGENCE_PAIRS)
    manifest = pipeline.load_run(convergence_run, cfg)
    index, _ = pipeline.load_run_selection(convergence_run)
    result = pipeline.train_system(manifest, index, convergence_pretrained, cfg)
    _assert_mel_loss_halves(result.records)


@pytest.mark.slow
def test_pretraining_halves_mel_loss(convergence_run, convergence_pretrained):
    assert convergence_pretrained.step == 300
    _assert_mel_loss_halves(pipeline.read_records(convergence_run / pipeline.PRETRAIN_RECORDS))


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

def test_checkpoint_reload_is_bit_exact(tmp_path, toy_manifest, toy_index, pretrained):
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, _system_cfg("P7"))
    path = tmp_path / "P7.pt"
    save_checkpoint(result.checkpoint, path)
    ckpt = load_checkpoint(path)
    assert ckpt.config_hash == result.checkpoint.config_hash
    assert ckpt.loss_tail == [r.losses.l_mel for r in result.records]

    model, cfg = pipeline.load_system(ckpt)
    assert cfg.system.system_id == "P7"
    original = result.model.eval()
    data = pipeline.TrainingData(toy_manifest, cfg, toy_index)
    batch = data.collate(toy_manifest.ids()[:2])
    with torch.no_grad():
        outs = []
        for m in (original, model):
            enc = m.acoustic.encode(batch.text_ids, batch.text_lengths)
            E, _ = m.style(enc, batch.text_lengths, batch.target_ref, batch.refs)
            outs.append(m.acoustic.decode_teacher_forced(m.acoustic.condition(enc, E), batch.text_lengths, batch.mels).mel)
    assert torch.equal(outs[0], outs[1])


def test_checkpoint_config_mismatch(toy_manifest):
    result = pipeline.train_system(toy_manifest, None, None, _system_cfg("B1"))
    with pytest.raises(UnknownConfig):
        pipeline.load_system(result.checkpoint, tiny_config(system_id="B1", steps="99"))
    with pytest.raises(MissingFile):
        load_checkpoint(toy_manifest.source_path.parent / "absent.pt")


# ---------------------------------------------------------------------------
# 风格向量导出 / 合成
# ---------------------------------------------------------------------------

def test_style_pairs(toy_manifest, toy_index, pretrained):
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, _system_cfg("P10"))
    frozen = pipeline.load_frozen(pretrained, tiny_config())
    ids, E, E_prime = pipeline.style_pairs(result.model, frozen, toy_manifest, result.checkpoint.config, toy_index, batch_size=3)
    assert ids == toy_manifest.ids()
    assert E.shape == E_prime.shape == (TOY_N, 16)


def test_synthesis_for_training_and_new_text(tmp_path, toy_manifest, toy_index, toy_cache, pretrained):
    result = pipeline.train_system(toy_manifest, toy_index, pretrained, _system_cfg("P10"))
    ckpt = result.checkpoint
    known = toy_manifest.get(toy_manifest.ids()[0])

    # 相同转写的第一条语句决定参考
    first = next(u.id for u in toy_manifest if u.text == known.text)
    seen = pipeline.synthesize(known.text, ckpt, toy_manifest, toy_index, toy_cache, griffin_lim_iters=2)
    assert seen.reference_ids == toy_index[first].reference_ids
    assert seen.attention_weights.shape == (3,)
    assert seen.waveform is not None and seen.waveform.size > 0
    assert np.allclose(seen.alignment.sum(axis=1), 1.0, atol=1e-5)
    assert seen.mel.shape[0] <= 40

    fresh = pipeline.synthesize("A brand new sentence!", ckpt, toy_manifest, toy_index, toy_cache, griffin_lim_iters=2)
    assert len(fresh.reference_ids) == 3
    with pytest.raises(ConfigMismatch):
        pipeline.synthesize("A brand new sentence!", ckpt, toy_manifest, toy_index, None)

    cfg = ckpt.config
    pipeline.write_synthesis(seen, tmp_path, "b", known.text, cfg)
    pipeline.write_synthesis(fresh, tmp_path, "a", "a brand new sentence!", cfg)
    pipeline.write_synthesis(fresh, tmp_path, "b", "replaced", cfg)
    rows = pipeline.read_samples_index(tmp_path)
    assert [(name, text) for name, _, text in rows] == [("a", "a brand new sentence!"), ("b", "replaced")]
    assert all(wav.exists() for _, wav, _ in rows)
    assert (tmp_path / "a.align.txt").exists() and (tmp_path / "a.mel").exists()


def test_synthesis_deterministic_per_seed(toy_manifest):
    ckpt = pipeline.train_system(toy_manifest, None, None, _system_cfg("B1")).checkpoint
    a = pipeline.synthesize("hello", ckpt, toy_manifest, seed=4, griffin_lim_iters=2)
    b = pipeline.synthesize("hello", ckpt, toy_manifest, seed=4, griffin_lim_iters=2)
    assert np.array_equal(a.mel, b.mel)
    assert np.array_equal(a.waveform, b.waveform)
    assert a.reference_ids == []


# ---------------------------------------------------------------------------
# 运行目录
# ---------------------------------------------------------------------------

def test_run_directory_flow(tmp_path, toy_run):
    cfg = tiny_config(system_id="P4")
    run_dir = tmp_path / "p4"
    with pytest.raises(MissingFile):
        pipeline.train_run(run_dir, cfg, data_dir=toy_run, pretrained_path=tmp_path / "none.pt")

    pre_cfg = tiny_config(steps="2")
    pre_dir = tmp_path / "pre"
    pipeline.prepare_run(pre_dir, pre_cfg, toy=4, seed=1)
    pre_ckpt = pipeline.pretrain_run(pre_dir, pre_cfg)
    pre_path = pipeline.checkpoint_path(pre_dir, "GST")
    assert pre_path.exists()
    assert (pre_dir / pipeline.PRETRAIN_RECORDS).exists()
    assert pipeline.pretrain_run(pre_dir, pre_cfg).config_hash == pre_ckpt.config_hash

    ckpt = pipeline.train_run(run_dir, cfg, data_dir=toy_run, pretrained_path=pre_path)
    assert ckpt.system_id == "P4"
    assert (run_dir / pipeline.CONFIG_FILE).exists()
    assert pipeline.load_run_system(run_dir).config_hash == ckpt.config_hash
    assert pipeline.load_run_system(run_dir, "P4").step == ckpt.step


def test_run_config_layers(tmp_path):
    cfg = build_config({"steps": "5"})
    (tmp_path / pipeline.CONFIG_FILE).write_text("steps=5\nseed=2\n", encoding="utf-8")
    extra = tmp_path / "extra.cfg"
    extra.write_text("seed=3\n", encoding="utf-8")
    layered = pipeline.run_config(tmp_path, {"lr": "0.01"}, extra)
    assert (layered.system.steps, layered.system.seed, layered.system.lr) == (5, 3, 0.01)
    assert cfg.system.steps == 5


def test_prepare_is_idempotent(tmp_path, tiny_cfg):
    first = pipeline.prepare_run(tmp_path, tiny_cfg, toy=3, seed=2)
    again = pipeline.prepare_run(tmp_path, tiny_cfg, toy=3, seed=9)
    assert again.texts_by_id() == first.texts_by_id()
    assert all(u.mel is not None for u in again)
    with pytest.raises(MissingFile):
        pipeline.prepare_run(tmp_path / "fresh", tiny_cfg)
