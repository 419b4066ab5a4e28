from pathlib import Path

from fastapi import APIRouter, HTTPException

import database
from errors import InputError
from evaluation.engine import read_mi_trajectory
from pipeline.systems import PUBLISHED_RESULTS, SYSTEM_TABLE

router = APIRouter(prefix="/runs", tags=["Runs"])

# ---------------------------------------------------------------------------
# API 端点：接入层
# ---------------------------------------------------------------------------

@router.get("/api/list")
async def list_runs():
    return await database.get_runs()


@router.get("/api/leaderboard")
async def leaderboard():
    return await database.get_leaderboard()


@router.get("/api/systems")
async def systems():
    return {
        system_id: {
            "architecture": flags.architecture.value,
            "use_attention": flags.use_attention,
            "use_mse": flags.use_mse,
            "use_mi": flags.use_mi,
            "n_references": flags.n_references,
            "published": vars(PUBLISHED_RESULTS[system_id]),
        }
        for system_id, flags in SYSTEM_TABLE.items()
    }


@router.get("/api/{run_id}")
async def get_run(run_id: str):
    run = await database.get_run(run_id)
    if run is None:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
    return run


@router.get("/api/{run_id}/mi")
async def mi_trajectory(run_id: str):
    run = await database.get_run(run_id)
    if run is None:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
    if not run.get("run_dir"):
        raise HTTPException(status_code=404, detail=f"run {run_id} has no run directory on record")
    try:
        trajectory = read_mi_trajectory(Path(run["run_dir"]), label=run_id)
    except InputError as e:
        raise HTTPException(status_code=400, detail=e.msg)
    return {
        "run_id": run_id,
        "steps": trajectory.steps,
        "values": trajectory.values,
        "tail_mean": trajectory.tail_mean,
    }
