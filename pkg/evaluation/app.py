import asyncio
import io
import os
from typing import Dict, Optional

import soundfile as sf
from fastapi import APIRouter, Header, HTTPException, Request
from pydantic import BaseModel

from evaluation.asr import ENV_TOKEN

router = APIRouter(prefix="/asr", tags=["ASR"])

# ---------------------------------------------------------------------------
# 状态：本地转写桩，按 utterance id 查表
# ---------------------------------------------------------------------------
transcripts: Dict[str, str] = {}
global_lock = asyncio.Lock()

# ---------------------------------------------------------------------------
# 请求模型
# ---------------------------------------------------------------------------

class RegisterRequest(BaseModel):
    transcripts: Dict[str, str]

# ---------------------------------------------------------------------------
# API 端点：接入层
# ---------------------------------------------------------------------------

def _check_token(authorization: Optional[str]) -> None:
    token = os.environ.get(ENV_TOKEN)
    if token and authorization != f"Bearer {token}":
        raise HTTPException(status_code=401, detail="invalid or missing bearer token")


@router.post("/transcripts")
async def register_transcripts(req: RegisterRequest, authorization: Optional[str] = Header(None)):
    _check_token(authorization)
    async with global_lock:
        transcripts.update(req.transcripts)
        return {"status": "ok", "count": len(transcripts)}


@router.post("/reset")
async def reset_transcripts(authorization: Optional[str] = Header(None)):
    _check_token(authorization)
    async with global_lock:
        transcripts.clear()
    return {"status": "ok"}


@router.post("/transcribe")
async def transcribe(
    request: Request,
    x_utterance_id: Optional[str] = Header(None),
    authorization: Optional[str] = Header(None),
):
    _check_token(authorization)
    if not x_utterance_id:
        raise HTTPException(status_code=400, detail="missing X-Utterance-Id header")
    body = await request.body()
    try:
        sf.info(io.BytesIO(body))
    except RuntimeError as e:
        raise HTTPException(status_code=400, detail=f"body is not a readable WAV file: {e}")
    async with global_lock:
        transcript = transcripts.get(x_utterance_id)
    if transcript is None:
        raise HTTPException(status_code=404, detail=f"no transcript for {x_utterance_id}")
    return {"utterance_id": x_utterance_id, "transcript": transcript}
