"""HTTP surface: agent lifecycle endpoints and the decision-engine service.

Routes::

    GET    /healthz
    POST   /agents              body: spec document          -> 201 {id, agent}
    GET    /agents?status=&scope=                             -> {agents: [...]}
    GET    /agents/{id}                                       -> {agent, history}
    PATCH  /agents/{id}         body: partial spec document   -> {agent}
    DELETE /agents/{id}                                       -> {agent}
    POST   /optimize            {deployment, before, after}   -> {action_code, q_values}
    POST   /feedback            {deployment, state|before+after, action, reward, tick}

Errors come back as ``{"error": <name>, "message": ..., "field": ...}``.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from carm.controller import AgentStore
from carm.drl.features import Action, DrlState, featurize
from carm.drl.qnet import predict
from carm.drl.registry import FeedbackRecord, ModelRegistry
from carm.errors import CarmError, MalformedSpec

log = logging.getLogger(__name__)


class _NotFound(CarmError):
    status = 404


class _BadRequest(CarmError):
    pass


def optimize(registry: ModelRegistry, body: dict) -> dict:
    if not isinstance(body, dict) or not isinstance(body.get("deployment"), str):
        raise _BadRequest("body needs a 'deployment' string", field="deployment")
    deployment = body["deployment"]
    with registry.lock:
        model = registry.select_model(deployment)
        state = featurize(body.get("before") or {}, body.get("after") or {}, model.scales)
        action, q = predict(model, state)
    return {
        "deployment": deployment,
        "action_code": int(action),
        "action": action.name.lower(),
        "q_values": [float(v) for v in q],
        "model": "meta" if model is registry.meta else deployment,
    }


def record_feedback(registry: ModelRegistry, body: dict) -> dict:
    if not isinstance(body, dict) or not isinstance(body.get("deployment"), str):
        raise _BadRequest("body needs a 'deployment' string", field="deployment")
    try:
        if "state" in body:
            state = DrlState.from_array(body["state"])
        else:
            scales = registry.select_model(body["deployment"]).scales
            state = featurize(body.get("before") or {}, body.get("after") or {}, scales)
        record = FeedbackRecord(
            deployment=body["deployment"],
            state=state,
            action=Action(int(body["action"])),
            reward=float(body["reward"]),
            tick=int(body.get("tick", 0)),
        )
    except CarmError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise _BadRequest(f"invalid feedback record: {exc}") from None
    model = registry.feedback(record)
    return {"deployment": record.deployment, "specialized": True, "steps": model.steps}


def _make_handler(store: AgentStore | None, registry: ModelRegistry | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "carm"

        def log_message(self, fmt, *args):
            log.debug("%s %s", self.address_string(), fmt % args)

        def _send(self, status: int, body: dict | None) -> None:
            data = b"" if body is None else json.dumps(body, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                raise MalformedSpec("request body is empty")
            try:
                return json.loads(self.rfile.read(length))
            except json.JSONDecodeError as exc:
                raise MalformedSpec(f"body is not valid JSON: {exc.msg}") from None

        def _dispatch(self, method: str) -> None:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                status, body = self._route(method, parts, parse_qs(url.query))
            except CarmError as exc:
                status, body = exc.status, exc.to_dict()
            except Exception as exc:  # noqa: BLE001 - never drop the connection on a bug
                log.exception("handler failed")
                status, body = 500, {"error": "Internal", "message": str(exc)}
            self._send(status, body)

        def _route(self, method: str, parts: list[str], query: dict) -> tuple[int, dict | None]:
            if parts == ["healthz"] and method == "GET":
                return 200, {"status": "ok"}
            if parts and parts[0] == "agents" and store is not None:
                return self._agents(method, parts[1:], query)
            if parts == ["optimize"] and method == "POST" and registry is not None:
                return 200, optimize(registry, self._body())
            if parts == ["feedback"] and method == "POST" and registry is not None:
                return 200, record_feedback(registry, self._body())
            raise _NotFound(f"no route for {method} {self.path}")

        def _agents(self, method: str, rest: list[str], query: dict) -> tuple[int, dict | None]:
            if not rest:
                if method == "POST":
                    agent_id = store.create(self._body())
                    return 201, {"id": agent_id, "agent": store.get(agent_id).spec.to_dict()}
                if method == "GET":
                    try:
                        entries = store.list(
                            status=query.get("status", [None])[0] or None,
                            scope=query.get("scope", [None])[0] or None,
                        )
                    except ValueError as exc:
                        raise _BadRequest(str(exc)) from None
                    return 200, {"agents": [e.spec.to_dict() for e in entries]}
            elif len(rest) == 1:
                agent_id = rest[0]
                if method == "GET":
                    return 200, store.get(agent_id).to_dict()
                if method == "PATCH":
                    return 200, {"agent": store.update(agent_id, self._body()).to_dict()}
                if method == "DELETE":
                    return 200, {"agent": store.delete(agent_id).to_dict()}
            raise _NotFound(f"no route for {method} {self.path}")

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PATCH(self):
            self._dispatch("PATCH")

        def do_DELETE(self):
            self._dispatch("DELETE")

    return Handler


class ApiServer:
    """Threaded HTTP server; ``port=0`` picks a free port."""

    def __init__(
        self,
        store: AgentStore | None = None,
        registry: ModelRegistry | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(store, registry))
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    def start(self) -> ApiServer:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="carm-api", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> ApiServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"listen address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)

