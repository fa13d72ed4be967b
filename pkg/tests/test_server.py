from __future__ import annotations

import json
import socket
import threading
import time
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from discussd.server import DiscussdServer
from discussd.service import SessionStore


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class MockModelHandler(BaseHTTPRequestHandler):
    """One process-wide mock serving both wire contracts:

    POST /classify           -> {"probability": <server.probability>}
    POST /chat/completions   -> OpenAI-style completion with fixed text
    """

    def log_message(self, fmt, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = json.loads(self.rfile.read(length) or b"{}")
        if self.path == "/classify":
            payload = {"probability": self.server.probability}
        elif self.path == "/chat/completions":
            payload = {
                "choices": [{"message": {"role": "assistant", "content": self.server.completion}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 5},
            }
        else:
            self.send_response(404)
            self.end_headers()
            return
        self.server.requests.append((self.path, body))
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class MockModelServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, port):
        super().__init__(("127.0.0.1", port), MockModelHandler)
        self.probability = 0.1
        self.completion = "Nexus: a crisp correction."
        self.requests = []


@pytest.fixture
def mock_model():
    port = free_port()
    server = MockModelServer(port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, f"http://127.0.0.1:{port}"
    server.shutdown()


@pytest.fixture
def api(tmp_path):
    store = SessionStore(data_dir=tmp_path)
    server = DiscussdServer(("127.0.0.1", free_port()), store)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base
    server.shutdown()
    store.close()


def call(method: str, url: str, body: dict | None = None, timeout: float = 5.0):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method)
    if data:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read() or b"{}"), dict(resp.headers)
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"{}"), dict(exc.headers)


def _mk_session(api, mock_url, threshold=0.5):
    status, body, _ = call(
        "POST",
        f"{api}/sessions",
        {
            "policy": "decoupled",
            "threshold": threshold,
            "classifier_url": f"{mock_url}/classify",
            "backend_url": mock_url,
        },
    )
    assert status == 201, body
    return body["session_id"]


def test_healthz(api):
    status, body, _ = call("GET", f"{api}/healthz")
    assert status == 200 and body == {"ok": True}


def test_create_session_validates_config(api):
    status, body, _ = call("POST", f"{api}/sessions", {"policy": "decoupled", "threshold": 1.5})
    assert status == 400
    status, body, _ = call("POST", f"{api}/sessions", {"policy": "mystery"})
    assert status == 400


def test_silent_turn_flow(api, mock_model):
    server, url = mock_model
    server.probability = 0.1
    sid = _mk_session(api, url)
    status, body, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "hi all"})
    assert status == 200
    assert body["decision"] == "SILENT"
    assert body["probability"] == 0.1
    assert body["turn_index"] == 0
    assert "latency_ms" in body


def test_speak_turn_appends_nexus_over_http(api, mock_model):
    server, url = mock_model
    server.probability = 0.9
    sid = _mk_session(api, url)
    status, body, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "the moon is cheese"})
    assert status == 200 and body["decision"] == "SPEAK"
    status, state, _ = call("GET", f"{api}/sessions/{sid}")
    speakers = [t["speaker"] for t in state["turns"]]
    assert speakers == ["Ada", "Nexus"]
    assert state["turns"][1]["text"] == "a crisp correction."
    # the classifier saw the rendered context
    classify_calls = [b for path, b in server.requests if path == "/classify"]
    assert classify_calls and classify_calls[0]["context"].startswith("Ada:")


def test_reserved_speaker_rejected(api, mock_model):
    _, url = mock_model
    sid = _mk_session(api, url)
    status, body, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Nexus", "text": "hello"})
    assert status == 400
    assert "reserved" in body["error"]


def test_patch_threshold_flips_next_decision(api, mock_model):
    server, url = mock_model
    server.probability = 0.7
    sid = _mk_session(api, url, threshold=0.5)
    _, body, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "one"})
    assert body["decision"] == "SPEAK"
    status, body, _ = call("PATCH", f"{api}/sessions/{sid}/policy", {"threshold": 0.9})
    assert status == 200 and body["policy_config"]["threshold"] == 0.9
    _, body, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "two"})
    assert body["decision"] == "SILENT"


def test_events_json_endpoint(api, mock_model):
    _, url = mock_model
    sid = _mk_session(api, url)
    call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "one"})
    status, body, _ = call("GET", f"{api}/sessions/{sid}/events?follow=0&from=0")
    assert status == 200
    seqs = [e["seq"] for e in body["events"]]
    assert seqs == list(range(len(seqs)))
    kinds = [e["kind"] for e in body["events"]]
    assert kinds[0] == "SessionCreated" and "DecisionMade" in kinds
    # resume from mid-stream
    status, body, _ = call("GET", f"{api}/sessions/{sid}/events?follow=0&from=2")
    assert [e["seq"] for e in body["events"]] == seqs[2:]


def test_sse_stream_delivers_live_events(api, mock_model):
    _, url = mock_model
    sid = _mk_session(api, url)
    got: list[dict] = []
    ready = threading.Event()

    def consume():
        req = urllib.request.Request(f"{api}/sessions/{sid}/events?from=0")
        req.add_header("Accept", "text/event-stream")
        with urllib.request.urlopen(req, timeout=10) as resp:
            assert resp.headers["Content-Type"].startswith("text/event-stream")
            ready.set()
            for raw in resp:
                line = raw.decode().strip()
                if line.startswith("data: "):
                    got.append(json.loads(line[6:]))
                    if got[-1]["kind"] == "SessionClosed":
                        return

    t = threading.Thread(target=consume, daemon=True)
    t.start()
    assert ready.wait(timeout=5)
    call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "one"})
    call("POST", f"{api}/sessions/{sid}/close")
    t.join(timeout=10)
    assert not t.is_alive()
    seqs = [e["seq"] for e in got]
    assert seqs == list(range(len(seqs)))
    assert got[-1]["kind"] == "SessionClosed"


def test_transcript_endpoint(api, mock_model):
    server, url = mock_model
    server.probability = 0.9
    sid = _mk_session(api, url)
    call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "the moon is cheese"})
    server.probability = 0.1
    call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ben", "text": "good to know"})

    req = urllib.request.Request(f"{api}/sessions/{sid}/transcript")
    with urllib.request.urlopen(req, timeout=5) as resp:
        text = resp.read().decode()
        assert resp.headers["X-Transcript-Valid"] == "true"
    assert "[AI_APPEARED]" in text
    assert "Ada: the moon is cheese" in text


def test_unknown_session_404(api):
    status, _, _ = call("GET", f"{api}/sessions/abcdef123456")
    assert status == 404
    status, _, _ = call("POST", f"{api}/sessions/abcdef123456/turns", {"speaker": "A", "text": "x"})
    assert status == 404


def test_closed_session_409(api, mock_model):
    _, url = mock_model
    sid = _mk_session(api, url)
    call("POST", f"{api}/sessions/{sid}/close")
    status, _, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "hello"})
    assert status == 409


def test_backend_outage_degrades_to_silent(api, mock_model):
    server, url = mock_model
    sid = _mk_session(api, url)
    server.shutdown()  # classifier goes dark
    server.server_close()  # and its port refuses connections
    time.sleep(0.05)
    status, body, _ = call("POST", f"{api}/sessions/{sid}/turns", {"speaker": "Ada", "text": "anyone"})
    assert status == 200
    assert body["decision"] == "SILENT"
    assert "error" in body
