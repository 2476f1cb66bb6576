"""HTTP surface of the management server.

Endpoints (bearer-token auth, NDJSON event bodies):

    POST /v1/events                      mediator   publish one event (raw or normalized)
    POST /v1/tokens                      admin      mint a token
    GET  /v1/events/stream?class=&kind=&min_severity=
                                         consumer   chunked NDJSON live stream
    GET  /v1/status?class=&kind=&min_severity=
                                         consumer   status snapshot as NDJSON
    GET  /v1/topology                    consumer   nodes and edges
    GET  /v1/availability?component=&start=&end=
                                         consumer   availability window record
    GET  /v1/rca?start=&end=             consumer   root-cause result for the window

Errors are JSON bodies {"error": ..., "code": ...}; streams carry a
"# heartbeat" comment line after each quiet interval.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .bus import EventFilter, Role
from .errors import (
    AuthError,
    CloudbusError,
    InvalidComponent,
    MalformedLine,
    MissingField,
    NoMatchingRule,
    SchemaViolation,
    SubscriptionClosed,
    Timeout,
    UnknownComponent,
    ValidationError,
)
from .events import RawEvent, Severity, decode_ndjson, encode_ndjson, normalize
from .pipeline import ManagementService

log = logging.getLogger(__name__)

_UNPROCESSABLE = (
    MalformedLine,
    SchemaViolation,
    NoMatchingRule,
    MissingField,
    InvalidComponent,
    ValidationError,
)


class GatewayServer(ThreadingHTTPServer):
    """Threaded HTTP server bound to one ManagementService."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], service: ManagementService, heartbeat_ms: int = 15_000):
        super().__init__(addr, _Handler)
        self.service = service
        self.heartbeat_ms = heartbeat_ms

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="cloudbus-gateway", daemon=True)
        thread.start()
        return thread


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: GatewayServer

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    # -- plumbing ---------------------------------------------------------------

    def _send_json(self, code: int, obj) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_ndjson(self, code: int, lines: list[str], headers: dict[str, str] | None = None) -> None:
        body = ("".join(line + "\n" for line in lines)).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/x-ndjson; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, code: int, error_code: str, message: str) -> None:
        self._send_json(code, {"error": message, "code": error_code})

    def _auth(self, *roles: Role):
        header = self.headers.get("Authorization", "")
        if not header.startswith("Bearer ") or not header[7:].strip():
            self._send_error_json(401, "unauthenticated", "missing bearer token")
            return None
        token = self.server.service.bus.resolve_token(header[7:].strip())
        if token is None:
            self._send_error_json(401, "unauthenticated", "unknown token")
            return None
        if not any(r in token.roles for r in roles):
            wanted = " or ".join(r.value for r in roles)
            self._send_error_json(403, "forbidden", f"token lacks role {wanted}")
            return None
        return token

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0) or 0)
        return self.rfile.read(length) if length else b""

    def _query(self) -> dict[str, str]:
        parsed = parse_qs(urlsplit(self.path).query)
        return {k: v[-1] for k, v in parsed.items()}

    def _filter_from_query(self, q: dict[str, str]) -> EventFilter:
        kinds = q.get("kind")
        return EventFilter(
            component_kinds=frozenset(kinds.split(",")) if kinds else None,
            class_glob=q.get("class") or None,
            min_severity=Severity.parse(q["min_severity"]) if q.get("min_severity") else None,
        )

    def _window_from_query(self, q: dict[str, str]) -> tuple[int, int] | None:
        try:
            start, end = int(q["start"]), int(q["end"])
        except (KeyError, ValueError):
            self._send_error_json(400, "bad_window", "start and end must be integer milliseconds")
            return None
        if end < start:
            self._send_error_json(400, "bad_window", "end must be >= start")
            return None
        return start, end

    # -- dispatch -----------------------------------------------------------------

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        path = urlsplit(self.path).path
        if path == "/v1/events":
            self._post_events()
        elif path == "/v1/tokens":
            self._post_tokens()
        else:
            self._send_error_json(404, "not_found", f"no such endpoint: {path}")

    def do_GET(self) -> None:  # noqa: N802
        path = urlsplit(self.path).path
        if path == "/v1/events/stream":
            self._get_stream()
        elif path == "/v1/status":
            self._get_status()
        elif path == "/v1/topology":
            self._get_topology()
        elif path == "/v1/availability":
            self._get_availability()
        elif path == "/v1/rca":
            self._get_rca()
        else:
            self._send_error_json(404, "not_found", f"no such endpoint: {path}")

    # -- endpoints -------------------------------------------------------------------

    def _post_events(self) -> None:
        token = self._auth(Role.MEDIATOR)
        if token is None:
            return
        service = self.server.service
        body = self._body().decode("utf-8", errors="replace").strip()
        try:
            if not body:
                raise MalformedLine("empty body")
            probe = None
            try:
                probe = json.loads(body)
            except json.JSONDecodeError:
                pass
            if isinstance(probe, dict) and "source_kind" in probe and "payload" in probe:
                raw = RawEvent(
                    source_kind=str(probe["source_kind"]),
                    received_at=int(probe.get("received_at", service.clock.now_ms())),
                    payload=probe["payload"],
                )
                ev = normalize(raw, service.ruleset)
            else:
                ev = decode_ndjson(body)
            seq = service.bus.publish(token, ev)
        except AuthError as exc:
            self._send_error_json(403, "forbidden", str(exc))
            return
        except _UNPROCESSABLE as exc:
            self._send_error_json(422, "unprocessable", str(exc))
            return
        self._send_json(200, {"seq_no": seq})

    def _post_tokens(self) -> None:
        token = self._auth(Role.ADMIN)
        if token is None:
            return
        try:
            body = json.loads(self._body().decode("utf-8") or "{}")
            roles = frozenset(Role(r) for r in body["roles"])
            label = str(body.get("label", ""))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            self._send_error_json(422, "unprocessable", f"body must carry roles[]: {exc}")
            return
        try:
            minted = self.server.service.bus.mint_token(token, roles, label)
        except (AuthError, ValidationError) as exc:
            self._send_error_json(403, "forbidden", str(exc))
            return
        self._send_json(
            200,
            {"token": minted.token, "roles": sorted(r.value for r in minted.roles), "label": minted.label},
        )

    def _get_stream(self) -> None:
        token = self._auth(Role.CONSUMER)
        if token is None:
            return
        service = self.server.service
        try:
            filt = self._filter_from_query(self._query())
        except (ValidationError, ValueError) as exc:
            self._send_error_json(400, "bad_filter", str(exc))
            return
        try:
            sub = service.bus.subscribe(token, filt, capacity=4096)
        except AuthError as exc:
            self._send_error_json(403, "forbidden", str(exc))
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson; charset=utf-8")
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()
        try:
            while True:
                try:
                    ev = sub.next(timeout_ms=self.server.heartbeat_ms)
                    self._write_chunk(encode_ndjson(ev) + "\n")
                except Timeout:
                    self._write_chunk("# heartbeat\n")
                except SubscriptionClosed:
                    break
            self._write_chunk("")
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            service.bus.close_subscription(sub)

    def _write_chunk(self, text: str) -> None:
        data = text.encode("utf-8")
        self.wfile.write(f"{len(data):x}\r\n".encode("ascii") + data + b"\r\n")
        self.wfile.flush()

    def _get_status(self) -> None:
        token = self._auth(Role.CONSUMER, Role.ADMIN)
        if token is None:
            return
        service = self.server.service
        try:
            filt = self._filter_from_query(self._query())
        except (ValidationError, ValueError) as exc:
            self._send_error_json(400, "bad_filter", str(exc))
            return
        snap = service.bus.snapshot(token, filt)
        lines = [encode_ndjson(ev) for _, ev in sorted(snap.entries.items())]
        self._send_ndjson(200, lines, headers={"X-As-Of-Seq": str(snap.as_of_seq)})

    def _get_topology(self) -> None:
        token = self._auth(Role.CONSUMER, Role.ADMIN)
        if token is None:
            return
        self._send_json(200, self.server.service.topology.to_data())

    def _get_availability(self) -> None:
        token = self._auth(Role.CONSUMER, Role.ADMIN)
        if token is None:
            return
        q = self._query()
        component = q.get("component", "")
        if not component:
            self._send_error_json(400, "bad_request", "component query parameter required")
            return
        window = self._window_from_query(q)
        if window is None:
            return
        service = self.server.service
        service.sync()
        try:
            win = service.availability(component, *window)
        except UnknownComponent:
            self._send_error_json(404, "unknown_component", f"unknown component {component!r}")
            return
        self._send_json(
            200,
            {
                "component": win.component.id,
                "kind": win.component.kind.value,
                "start_ms": win.start_ms,
                "end_ms": win.end_ms,
                "up_ms": win.up_ms,
                "known_ms": win.known_ms,
                "ratio": win.ratio,
            },
        )

    def _get_rca(self) -> None:
        token = self._auth(Role.CONSUMER, Role.ADMIN)
        if token is None:
            return
        window = self._window_from_query(self._query())
        if window is None:
            return
        service = self.server.service
        service.sync()
        try:
            result = service.rca(*window)
        except CloudbusError as exc:
            self._send_error_json(404, "unknown_component", str(exc))
            return
        self._send_json(
            200,
            {
                "window": {"start_ms": window[0], "end_ms": window[1]},
                "roots": sorted(result.roots),
                "suppressed": dict(sorted(result.suppressed.items())),
            },
        )
