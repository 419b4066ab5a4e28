import asyncio

import pytest

import database
from database import RunSummary


@pytest.fixture(autouse=True)
def db_file(tmp_path, monkeypatch):
    path = tmp_path / "runs.db"
    monkeypatch.setenv(database.ENV_DB, str(path))
    asyncio.run(database.init_db())
    return path


def _summary(run_id: str, system_id: str, seed: int = 0, **fields) -> RunSummary:
    values = dict(
        run_id=run_id,
        system_id=system_id,
        architecture="c_mrtts",
        n_references=3,
        steps=10,
        seed=seed,
        config_hash="abc",
        final_l_mel=1.0,
    )
    values.update(fields)
    return RunSummary(**values)


def _record(*summaries: RunSummary) -> None:
    async def _write():
        for summary in summaries:
            await database.record_run(summary)

    asyncio.run(_write())


def test_db_path_follows_environment(db_file):
    assert database.db_path() == str(db_file)
    assert db_file.exists()


def test_record_and_fetch_runs():
    _record(_summary("r:P10:1", "P10", seed=1), _summary("r:B1:0", "B1", architecture="tacotron2", n_references=0))
    runs = asyncio.run(database.get_runs())
    assert [r["run_id"] for r in runs] == ["r:B1:0", "r:P10:1"]
    assert runs[0]["mi_tail_mean"] is None and runs[0]["wer"] is None

    run = asyncio.run(database.get_run("r:P10:1"))
    assert run["system_id"] == "P10" and run["seed"] == 1
    assert asyncio.run(database.get_run("missing")) is None


def test_re_registration_replaces_row():
    _record(_summary("r:P7:0", "P7", final_l_mel=2.0))
    _record(_summary("r:P7:0", "P7", final_l_mel=0.5, config_hash="def"))
    runs = asyncio.run(database.get_runs())
    assert len(runs) == 1
    assert runs[0]["final_l_mel"] == 0.5 and runs[0]["config_hash"] == "def"


def test_record_wer_reports_unknown_runs():
    _record(_summary("r:P3:0", "P3"))
    assert asyncio.run(database.record_wer("r:P3:0", 0.25)) is True
    assert asyncio.run(database.get_run("r:P3:0"))["wer"] == 0.25
    assert asyncio.run(database.record_wer("r:P3:9", 0.1)) is False


def test_leaderboard_ordering():
    _record(
        _summary("a:P10:0", "P10", wer=0.25, mi_tail_mean=0.1),
        _summary("a:P10:1", "P10", seed=1, wer=0.5, mi_tail_mean=0.3),
        _summary("a:P8:0", "P8", wer=0.375, mi_tail_mean=0.5),
        _summary("a:P7:0", "P7", wer=0.375, mi_tail_mean=0.9),
        _summary("a:B1:0", "B1", architecture="tacotron2", n_references=0),
        _summary("a:X:0", "custom", mi_tail_mean=0.7),
    )
    board = asyncio.run(database.get_leaderboard())

    # 平均 WER 升序，同 WER 时 MI 尾部均值降序；无 WER 的系统排最后
    assert [row["system_id"] for row in board] == ["P7", "P8", "P10", "custom", "B1"]
    p10 = board[2]
    assert p10["runs"] == 2
    assert p10["mean_wer"] == 0.375
    assert p10["mean_mi_tail"] == pytest.approx(0.2)
    assert p10["published_mos"] == 4.313
    assert p10["published_wer"] == 17.9

    custom = board[3]
    assert custom["published_mos"] is None and custom["published_mos_ci"] is None
