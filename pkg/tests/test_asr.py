import httpx
import numpy as np
import pytest
from fastapi import FastAPI
from fastapi.testclient import TestClient

from corpus.engine import save_wav
from errors import AsrFailure, InputError
from evaluation import app as asr_app
from evaluation.asr import (
    ENV_ENDPOINT,
    ENV_TOKEN,
    UTTERANCE_HEADER,
    AdapterKind,
    HttpAsrAdapter,
    MockAsrAdapter,
    make_adapter,
)
from evaluation.engine import evaluate_content_quality


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(ENV_ENDPOINT, raising=False)
    monkeypatch.delenv(ENV_TOKEN, raising=False)
    asr_app.transcripts.clear()
    yield
    asr_app.transcripts.clear()


@pytest.fixture
def wav(tmp_path):
    path = tmp_path / "u1.wav"
    save_wav(path, np.zeros(800, dtype=np.float32), 8000)
    return path


def _mock_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler), base_url="http://asr.test")


# ---------------------------------------------------------------------------
# 适配器
# ---------------------------------------------------------------------------

def test_http_adapter_sends_raw_wav(wav):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["headers"] = request.headers
        seen["body"] = request.content
        return httpx.Response(200, json={"transcript": "hello"})

    adapter = HttpAsrAdapter("http://asr.test/transcribe", token="secret", client=_mock_client(handler))
    assert adapter.transcribe("u1", wav) == "hello"
    assert seen["headers"][UTTERANCE_HEADER] == "u1"
    assert seen["headers"]["authorization"] == "Bearer secret"
    assert seen["headers"]["content-type"] == "audio/wav"
    assert seen["body"] == wav.read_bytes()
    assert adapter.kind is AdapterKind.EXTERNAL_HTTP


@pytest.mark.parametrize(
    "response",
    [
        httpx.Response(500, text="boom"),
        httpx.Response(200, text="not json"),
        httpx.Response(200, json={"text": "wrong field"}),
        httpx.Response(200, json={"transcript": None}),
    ],
)
def test_http_adapter_failures(wav, response):
    adapter = HttpAsrAdapter("http://asr.test/transcribe", client=_mock_client(lambda request: response))
    with pytest.raises(AsrFailure):
        adapter.transcribe("u1", wav)


def test_http_adapter_transport_error(wav):
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    adapter = HttpAsrAdapter("http://asr.test/transcribe", client=_mock_client(handler))
    with pytest.raises(AsrFailure):
        adapter.transcribe("u1", wav)
    with pytest.raises(AsrFailure):
        adapter.transcribe("u1", wav.parent / "missing.wav")


def test_http_adapter_reads_environment(monkeypatch):
    with pytest.raises(InputError):
        HttpAsrAdapter()
    monkeypatch.setenv(ENV_ENDPOINT, "http://asr.test/transcribe")
    monkeypatch.setenv(ENV_TOKEN, "from-env")
    adapter = HttpAsrAdapter()
    assert adapter.endpoint == "http://asr.test/transcribe"
    assert adapter.token == "from-env"
    adapter.close()


def test_make_adapter():
    assert isinstance(make_adapter("mock", [("a", None, "text")]), MockAsrAdapter)
    assert make_adapter("mock_lookup").kind is AdapterKind.MOCK_LOOKUP
    with pytest.raises(InputError):
        make_adapter("whisper")


# ---------------------------------------------------------------------------
# 本地转写桩
# ---------------------------------------------------------------------------

@pytest.fixture
def stub_client():
    app = FastAPI()
    app.include_router(asr_app.router)
    return TestClient(app)


def test_stub_round_trip_through_adapter(stub_client, wav):
    r = stub_client.post("/asr/transcripts", json={"transcripts": {"u1": "the cat sat"}})
    assert r.status_code == 200 and r.json()["count"] == 1

    adapter = HttpAsrAdapter("/asr/transcribe", client=stub_client)
    report = evaluate_content_quality([("u1", wav, "the cat sat"), ("u2", wav, "unknown")], adapter, workers=1)
    assert report.aggregate == 0.0
    assert report.excluded == ["u2"]


def test_stub_rejects_bad_requests(stub_client, wav):
    stub_client.post("/asr/transcripts", json={"transcripts": {"u1": "x"}})
    assert stub_client.post("/asr/transcribe", content=wav.read_bytes()).status_code == 400
    r = stub_client.post("/asr/transcribe", content=b"not audio", headers={UTTERANCE_HEADER: "u1"})
    assert r.status_code == 400
    r = stub_client.post("/asr/transcribe", content=wav.read_bytes(), headers={UTTERANCE_HEADER: "u9"})
    assert r.status_code == 404

    assert stub_client.post("/asr/reset").json() == {"status": "ok"}
    r = stub_client.post("/asr/transcribe", content=wav.read_bytes(), headers={UTTERANCE_HEADER: "u1"})
    assert r.status_code == 404


def test_stub_checks_bearer_token(monkeypatch, stub_client, wav):
    monkeypatch.setenv(ENV_TOKEN, "tok")
    body = {"transcripts": {"u1": "x"}}
    assert stub_client.post("/asr/transcripts", json=body).status_code == 401
    assert stub_client.post("/asr/transcripts", json=body, headers={"Authorization": "Bearer wrong"}).status_code == 401
    assert stub_client.post("/asr/transcripts", json=body, headers={"Authorization": "Bearer tok"}).status_code == 200
    adapter = HttpAsrAdapter("/asr/transcribe", token="tok", client=stub_client)
    assert adapter.transcribe("u1", wav) == "x"
