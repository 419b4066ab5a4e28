import importlib
import logging
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI, Response

import database

logger = logging.getLogger(__name__)

APPS_CONFIG = {
    "runs": "pipeline.app",
    "asr": "evaluation.app",
}


@asynccontextmanager
async def lifespan(app: FastAPI):
    await database.init_db()
    yield


app = FastAPI(title="MRTTS Results Portal", lifespan=lifespan)


@app.get("/favicon.ico", include_in_schema=False)
async def favicon():
    return Response(status_code=204)


loaded_apps = []

for mount_path, module_name in APPS_CONFIG.items():
    try:
        mod = importlib.import_module(module_name)
        app.include_router(getattr(mod, "router"))
        loaded_apps.append(mount_path)
    except Exception as e:
        logger.error("error importing %s: %s", mount_path, e)


@app.get("/")
async def index():
    return {
        "service": "mrtts",
        "loaded_apps": loaded_apps,
        "leaderboard": await database.get_leaderboard(),
    }


@app.get("/api/leaderboard")
async def get_leaderboard_api():
    return await database.get_leaderboard()


def serve(host: str = "127.0.0.1", port: int = 8000, reload: bool = False) -> None:
    uvicorn.run("main:app", host=host, port=port, reload=reload)


if __name__ == "__main__":
    serve(reload=True)
