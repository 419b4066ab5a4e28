import asyncio

import pytest
from fastapi.testclient import TestClient

import database
import main
from database import RunSummary


def _trajectory(run_dir, values):
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# step\tl_mi_estimator\tmi_term"] + [f"{i}\t0.0\t{v!r}" for i, v in enumerate(values, start=1)]
    (run_dir / "mi_trajectory.log").write_text("\n".join(lines) + "\n", encoding="utf-8")


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv(database.ENV_DB, str(tmp_path / "portal.db"))
    with TestClient(main.app) as c:
        yield c


@pytest.fixture
def seeded(tmp_path, client):
    traced = tmp_path / "p10"
    _trajectory(traced, [0.5] * 8 + [1.0, 2.0])
    runs = [
        RunSummary(run_id="x:P10:0", system_id="P10", architecture="c_mrtts", n_references=3, steps=10,
                   seed=0, config_hash="h1", final_l_mel=0.8, mi_tail_mean=1.5, wer=0.2, run_dir=str(traced)),
        RunSummary(run_id="x:B1:0", system_id="B1", architecture="tacotron2", n_references=0, steps=10,
                   seed=0, config_hash="h2", final_l_mel=0.9, wer=0.3),
        RunSummary(run_id="x:P3:0", system_id="P3", architecture="u_mrtts", n_references=3, steps=10,
                   seed=0, config_hash="h3", final_l_mel=0.7, run_dir=str(tmp_path / "gone")),
    ]

    async def _write():
        for run in runs:
            await database.record_run(run)

    asyncio.run(_write())
    return client


def test_portal_root(client):
    r = client.get("/")
    assert r.status_code == 200
    body = r.json()
    assert body["service"] == "mrtts"
    assert set(body["loaded_apps"]) == {"runs", "asr"}
    assert body["leaderboard"] == []
    assert client.get("/favicon.ico").status_code == 204


def test_systems_table(client):
    systems = client.get("/runs/api/systems").json()
    assert len(systems) == 14
    assert systems["P10"]["use_mi"] is True and systems["P10"]["n_references"] == 3
    assert systems["B1"]["architecture"] == "tacotron2"
    assert systems["P3"]["published"]["wer"] == 18.2


def test_runs_and_leaderboard(seeded):
    runs = seeded.get("/runs/api/list").json()
    assert [r["run_id"] for r in runs] == ["x:B1:0", "x:P10:0", "x:P3:0"]

    board = seeded.get("/runs/api/leaderboard").json()
    assert [row["system_id"] for row in board] == ["P10", "B1", "P3"]
    assert seeded.get("/api/leaderboard").json() == board

    run = seeded.get("/runs/api/x:P10:0").json()
    assert run["config_hash"] == "h1"
    assert seeded.get("/runs/api/nope").status_code == 404


def test_mi_trajectory_endpoint(seeded):
    body = seeded.get("/runs/api/x:P10:0/mi").json()
    assert body["steps"] == list(range(1, 11))
    assert body["tail_mean"] == 1.5

    assert seeded.get("/runs/api/x:B1:0/mi").status_code == 404
    assert seeded.get("/runs/api/x:P3:0/mi").status_code == 400
    assert seeded.get("/runs/api/nope/mi").status_code == 404
