"""HTTP front for the session service: JSON endpoints plus SSE event streams.

Routes:
    POST  /sessions                       {policy, threshold?, *_url?} -> {session_id}
    POST  /sessions/{id}/turns            {speaker, text} -> {turn_index, decision, ...}
    PATCH /sessions/{id}/policy           {threshold} -> updated config
    POST  /sessions/{id}/close
    GET   /sessions/{id}                  session state snapshot
    GET   /sessions/{id}/events?from=N    SSE stream (JSON array with ?follow=0)
    GET   /sessions/{id}/transcript       canonical text (X-Transcript-Valid header)
    GET   /healthz
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from discussd.service import (
    InvalidPolicyConfigError,
    ReservedSpeakerNameError,
    SessionClosedError,
    SessionStore,
    UnknownSessionError,
)

_SESSION_ROUTE = re.compile(r"^/sessions/([0-9a-f]+)(/(?:turns|events|transcript|policy|close))?$")


class DiscussdServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], store: SessionStore):
        super().__init__(address, _Handler)
        self.store = store


class _Handler(BaseHTTPRequestHandler):
    server: DiscussdServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default; tests capture stderr
        pass

    # -- helpers ------------------------------------------------------------

    def _json_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            obj = json.loads(raw.decode("utf-8") or "{}")
        except json.JSONDecodeError:
            raise _HttpError(400, "request body is not valid JSON") from None
        if not isinstance(obj, dict):
            raise _HttpError(400, "request body must be a JSON object")
        return obj

    def _send_json(self, status: int, payload: dict, headers: dict | None = None) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _query(self) -> dict[str, str]:
        if "?" not in self.path:
            return {}
        out = {}
        for pair in self.path.split("?", 1)[1].split("&"):
            if "=" in pair:
                key, value = pair.split("=", 1)
                out[key] = value
        return out

    def _route(self):
        path = self.path.split("?", 1)[0]
        m = _SESSION_ROUTE.match(path)
        if not m:
            return path, None, None
        return path, m.group(1), (m.group(2) or "").lstrip("/")

    # -- methods --------------------------------------------------------------

    def do_GET(self):  # noqa: N802 - http.server naming
        path, session_id, tail = self._route()
        try:
            if path == "/healthz":
                self._send_json(200, {"ok": True})
            elif session_id and tail == "events":
                self._get_events(session_id)
            elif session_id and tail == "transcript":
                self._get_transcript(session_id)
            elif session_id and not tail:
                self._send_json(200, self.server.store.get_state(session_id).to_dict())
            else:
                self._send_json(404, {"error": f"no route for GET {path}"})
        except _HttpError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except UnknownSessionError as exc:
            self._send_json(404, {"error": f"unknown session {exc}"})
        except (BrokenPipeError, ConnectionResetError):
            pass

    def do_POST(self):  # noqa: N802
        path, session_id, tail = self._route()
        try:
            if path == "/sessions":
                config = self._json_body()
                sid = self.server.store.create_session(config)
                self._send_json(201, {"session_id": sid})
            elif session_id and tail == "turns":
                body = self._json_body()
                speaker = body.get("speaker", "")
                text = body.get("text", "")
                _, record = self.server.store.post_turn(session_id, speaker, text)
                self._send_json(200, record.to_dict())
            elif session_id and tail == "close":
                self.server.store.close_session(session_id)
                self._send_json(200, {"closed": True})
            else:
                self._send_json(404, {"error": f"no route for POST {path}"})
        except _HttpError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except UnknownSessionError as exc:
            self._send_json(404, {"error": f"unknown session {exc}"})
        except InvalidPolicyConfigError as exc:
            self._send_json(400, {"error": str(exc)})
        except (ReservedSpeakerNameError, ValueError) as exc:
            self._send_json(400, {"error": str(exc)})
        except SessionClosedError as exc:
            self._send_json(409, {"error": f"session {exc} is closed"})
        except (BrokenPipeError, ConnectionResetError):
            pass

    def do_OPTIONS(self):  # noqa: N802 - browser preflight for the room UI
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type, Accept, Authorization")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_PATCH(self):  # noqa: N802
        path, session_id, tail = self._route()
        try:
            if session_id and tail == "policy":
                body = self._json_body()
                if "threshold" not in body:
                    raise _HttpError(400, "missing field: threshold")
                config = self.server.store.update_policy(session_id, body["threshold"])
                self._send_json(200, {"policy_config": config})
            else:
                self._send_json(404, {"error": f"no route for PATCH {path}"})
        except _HttpError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except UnknownSessionError as exc:
            self._send_json(404, {"error": f"unknown session {exc}"})
        except InvalidPolicyConfigError as exc:
            self._send_json(400, {"error": str(exc)})
        except SessionClosedError as exc:
            self._send_json(409, {"error": f"session {exc} is closed"})
        except (BrokenPipeError, ConnectionResetError):
            pass

    # -- endpoint bodies ------------------------------------------------------

    def _get_transcript(self, session_id: str) -> None:
        text, report = self.server.store.export_session(session_id)
        body = text.encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("X-Transcript-Valid", "true" if report.ok else "false")
        if not report.ok:
            self.send_header("X-Transcript-Violations", ",".join(c.value for c in report.codes()))
        self.end_headers()
        self.wfile.write(body)

    def _get_events(self, session_id: str) -> None:
        query = self._query()
        try:
            from_seq = int(query.get("from", "0"))
        except ValueError:
            raise _HttpError(400, "from must be an integer") from None
        follow = query.get("follow", "1") not in ("0", "false")
        accept = self.headers.get("Accept", "")
        wants_json = not follow or ("application/json" in accept and "text/event-stream" not in accept)

        if wants_json:
            events = [e.to_dict() for e in self.server.store.events_since(session_id, from_seq)]
            self._send_json(200, {"events": events})
            return

        self.close_connection = True  # stream has no Content-Length; socket is not reused
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        try:
            for event in self.server.store.stream_events(session_id, from_seq):
                if event is None:
                    self.wfile.write(b": keep-alive\n\n")
                    self.wfile.flush()
                    continue
                data = json.dumps(event.to_dict())
                self.wfile.write(f"id: {event.seq}\ndata: {data}\n\n".encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            return


class _HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def serve(port: int, data_dir: str | Path, host: str = "127.0.0.1") -> DiscussdServer:
    """Start the service in a daemon thread; returns the (running) server."""
    store = SessionStore(data_dir=data_dir)
    server = DiscussdServer((host, port), store)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def serve_forever(port: int, data_dir: str | Path, host: str = "127.0.0.1") -> None:
    store = SessionStore(data_dir=data_dir)
    server = DiscussdServer((host, port), store)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        store.close()
        server.server_close()
