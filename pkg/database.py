"""
database.py - 运行登记表与消融排行榜

每次训练完成登记一行运行摘要；WER 评测完成后回填。
排行榜按系统聚合（跨种子取均值）：平均 WER 升序（无 WER 的排在最后），
再按 MI 尾部均值降序；并附上原始实验报告的 MOS / WER 参考值。
"""

import os
from contextlib import asynccontextmanager
from typing import AsyncIterator, Dict, List, Optional

import aiosqlite
from pydantic import BaseModel

from pipeline.systems import PUBLISHED_RESULTS

ENV_DB = "MRTTS_DB"
DEFAULT_DB = "runs.db"


def db_path() -> str:
    return os.environ.get(ENV_DB, DEFAULT_DB)


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

class RunSummary(BaseModel):
    run_id: str
    system_id: str
    architecture: str
    n_references: int
    steps: int
    seed: int
    config_hash: str
    final_l_mel: float
    mi_tail_mean: Optional[float] = None
    wer: Optional[float] = None
    run_dir: Optional[str] = None


@asynccontextmanager
async def _get_db() -> AsyncIterator[aiosqlite.Connection]:
    """统一的数据库连接获取入口。业务层应始终通过此函数获取连接。"""
    async with aiosqlite.connect(db_path()) as db:
        await db.execute("PRAGMA journal_mode=WAL")
        await db.execute("PRAGMA synchronous=NORMAL")
        db.row_factory = aiosqlite.Row
        yield db


async def init_db():
    async with _get_db() as db:
        await db.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                system_id TEXT NOT NULL,
                architecture TEXT NOT NULL,
                n_references INTEGER NOT NULL,
                steps INTEGER NOT NULL,
                seed INTEGER NOT NULL,
                config_hash TEXT NOT NULL,
                final_l_mel REAL NOT NULL,
                mi_tail_mean REAL,
                wer REAL,
                run_dir TEXT,
                timestamp DATETIME DEFAULT CURRENT_TIMESTAMP
            )
            """
        )
        await db.execute("CREATE INDEX IF NOT EXISTS idx_runs_system ON runs(system_id)")
        await db.commit()


async def record_run(summary: RunSummary):
    """同一 run_id 重复登记时覆盖（--force 重训）。"""
    async with _get_db() as db:
        await db.execute(
            """
            INSERT OR REPLACE INTO runs
                (run_id, system_id, architecture, n_references, steps, seed,
                 config_hash, final_l_mel, mi_tail_mean, wer, run_dir)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (
                summary.run_id, summary.system_id, summary.architecture, summary.n_references,
                summary.steps, summary.seed, summary.config_hash, summary.final_l_mel,
                summary.mi_tail_mean, summary.wer, summary.run_dir,
            ),
        )
        await db.commit()


async def record_wer(run_id: str, wer: float) -> bool:
    async with _get_db() as db:
        cursor = await db.execute("UPDATE runs SET wer = ? WHERE run_id = ?", (wer, run_id))
        await db.commit()
        return cursor.rowcount > 0


async def get_runs() -> List[Dict]:
    async with _get_db() as db:
        async with db.execute(
            """
            SELECT run_id, system_id, architecture, n_references, steps, seed,
                   config_hash, final_l_mel, mi_tail_mean, wer, run_dir, timestamp
            FROM runs ORDER BY system_id, seed, run_id
            """
        ) as cursor:
            return [dict(row) for row in await cursor.fetchall()]


async def get_run(run_id: str) -> Optional[Dict]:
    async with _get_db() as db:
        async with db.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)) as cursor:
            row = await cursor.fetchone()
            return dict(row) if row else None


async def get_leaderboard() -> List[Dict]:
    async with _get_db() as db:
        async with db.execute(
            """
            SELECT system_id,
                   MIN(architecture) AS architecture,
                   COUNT(*) AS runs,
                   AVG(final_l_mel) AS mean_l_mel,
                   AVG(mi_tail_mean) AS mean_mi_tail,
                   AVG(wer) AS mean_wer
            FROM runs
            GROUP BY system_id
            ORDER BY (AVG(wer) IS NULL), AVG(wer) ASC,
                     (AVG(mi_tail_mean) IS NULL), AVG(mi_tail_mean) DESC,
                     system_id ASC
            """
        ) as cursor:
            rows = [dict(row) for row in await cursor.fetchall()]

    for row in rows:
        published = PUBLISHED_RESULTS.get(row["system_id"])
        row["published_mos"] = published.mos if published else None
        row["published_mos_ci"] = published.mos_ci if published else None
        row["published_wer"] = published.wer if published else None
    return rows
