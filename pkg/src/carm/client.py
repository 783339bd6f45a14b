"""Minimal JSON client for the controller API."""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from typing import Any


class ConnectionFailure(Exception):
    pass


class ApiError(Exception):
    """Non-2xx response; ``body`` is the decoded error document."""

    def __init__(self, status: int, body: dict) -> None:
        super().__init__(f"{status} {body.get('error', '')}: {body.get('message', '')}")
        self.status = status
        self.body = body


class Client:
    def __init__(self, address: str, timeout: float = 10.0) -> None:
        if not address.startswith(("http://", "https://")):
            address = "http://" + address
        self.base = address.rstrip("/")
        self.timeout = timeout

    def request(self, method: str, path: str, body: Any = None) -> dict:
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.base + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            raw = exc.read()
            try:
                payload = json.loads(raw) if raw else {}
            except json.JSONDecodeError:
                payload = {"error": "HTTPError", "message": raw.decode(errors="replace")}
            raise ApiError(exc.code, payload) from None
        except (urllib.error.URLError, OSError) as exc:
            raise ConnectionFailure(f"cannot reach {self.base}: {exc}") from exc
        return json.loads(raw) if raw else {}

    def create_agent(self, spec: dict) -> str:
        return self.request("POST", "/agents", spec)["id"]

    def get_agent(self, agent_id: str) -> dict:
        return self.request("GET", f"/agents/{agent_id}")

    def list_agents(self, **filters: str) -> list[dict]:
        query = "&".join(f"{k}={v}" for k, v in filters.items() if v)
        return self.request("GET", "/agents" + (f"?{query}" if query else ""))["agents"]

    def update_agent(self, agent_id: str, patch: dict) -> dict:
        return self.request("PATCH", f"/agents/{agent_id}", patch)["agent"]

    def delete_agent(self, agent_id: str) -> dict:
        return self.request("DELETE", f"/agents/{agent_id}")["agent"]
