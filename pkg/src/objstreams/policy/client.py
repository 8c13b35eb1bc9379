"""HTTP clients for the policy engine (consumer side and edge side)."""
from __future__ import annotations

from typing import Iterable

import httpx

from ..scene import ClassUniverse
from ..segments import KeyEpoch


class PolicyRequestError(RuntimeError):
    def __init__(self, status: int, body: dict):
        super().__init__(f"policy service returned {status}: {body}")
        self.status = status
        self.body = body


class AccessDenied(PolicyRequestError):
    @property
    def offending(self) -> list[str]:
        return list(self.body.get("offending", []))


def _check(resp: httpx.Response) -> dict | list | None:
    if resp.status_code == 204:
        return None
    body = resp.json()
    if resp.status_code == 403 and isinstance(body, dict) and body.get("denied"):
        raise AccessDenied(resp.status_code, body)
    if resp.status_code >= 400:
        raise PolicyRequestError(resp.status_code, body)
    return body


class PolicyClient:
    """Thin wrapper over the REST API.

    ``http`` may be any ``httpx.Client`` (e.g. FastAPI's ``TestClient``);
    otherwise one is created for ``base_url``.
    """

    def __init__(self, base_url: str = "", token: str | None = None, http: httpx.Client | None = None, timeout: float = 10.0):
        self.http = http or httpx.Client(base_url=base_url, timeout=timeout)
        self.token = token

    def _headers(self, token: str | None = None) -> dict:
        tok = token or self.token
        return {"Authorization": f"Bearer {tok}"} if tok else {}

    # consumer
    def request_streams(self, classes: Iterable[str]) -> dict:
        return _check(self.http.post("/consumer/streams", json={"classes": list(classes)}, headers=self._headers()))

    def warrants(self) -> list[dict]:
        return _check(self.http.get("/consumer/warrants", headers=self._headers()))

    def universe(self) -> list[str]:
        return _check(self.http.get("/classes"))

    # admin
    def upsert_consumer(self, consumer_id: str, mode: str, classes: Iterable[str], credential: str | None = None) -> dict:
        body = {"mode": mode, "classes": list(classes), "credential": credential}
        return _check(self.http.put(f"/admin/consumers/{consumer_id}", json=body, headers=self._headers()))

    def create_consumer(self, consumer_id: str, mode: str, classes: Iterable[str], credential: str | None = None) -> dict:
        body = {"mode": mode, "classes": list(classes), "credential": credential}
        return _check(self.http.post(f"/admin/consumers/{consumer_id}", json=body, headers=self._headers()))

    def delete_consumer(self, consumer_id: str) -> None:
        _check(self.http.delete(f"/admin/consumers/{consumer_id}", headers=self._headers()))

    def list_consumers(self) -> list[dict]:
        return _check(self.http.get("/admin/consumers", headers=self._headers()))

    def rotate(self, first_segment: int | None = None) -> dict:
        return _check(self.http.post("/admin/rotate", json={"first_segment": first_segment}, headers=self._headers()))

    def warrant(self, consumer_id: str, class_name: str, first_epoch: int, last_epoch: int, reason: str = "") -> dict:
        body = {"consumer": consumer_id, "class": class_name, "first_epoch": first_epoch, "last_epoch": last_epoch, "reason": reason}
        return _check(self.http.post("/admin/warrant", json=body, headers=self._headers()))

    def audit(self) -> dict:
        return _check(self.http.get("/admin/audit", headers=self._headers()))

    def requested_classes(self) -> list[str]:
        return _check(self.http.get("/admin/classes", headers=self._headers()))

    def keys_for_segment(self, index: int, rotate_every: int | None = None) -> dict:
        params = {"rotate_every": rotate_every} if rotate_every else {}
        return _check(self.http.get(f"/admin/keys/{index}", params=params, headers=self._headers()))


class RemoteKeySource:
    """Edge-side key source backed by a remote policy engine (admin token)."""

    def __init__(self, client: PolicyClient, universe: ClassUniverse):
        self.client = client
        self.universe = universe

    def keys_for_segment(self, index: int, rotate_every: int | None = None) -> KeyEpoch:
        doc = self.client.keys_for_segment(index, rotate_every)
        keys = {self.universe.label(name): bytes.fromhex(k) for name, k in doc["keys"].items()}
        return KeyEpoch(doc["epoch"], doc["first_segment"], keys, doc.get("last_segment"))

    def requested_classes(self) -> list[str]:
        return self.client.requested_classes()
