"""Role-typed backend endpoints and the HTTP transport client.

Transport failures retry with exponential backoff under a constant
idempotency key; protocol errors (4xx) never retry. A token bucket plus a
bounded in-flight semaphore keep request pressure per endpoint in check.
``mock://<dir>`` endpoints resolve to the in-process synthetic-world
backends instead of HTTP.
"""
from __future__ import annotations

import os
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import requests

from .protocol import (
    PROTOCOL_VERSION,
    ProtocolError,
    validate_detect_request,
    validate_generate_request,
    validate_review_request,
    validate_train_request,
)


class TransportError(Exception):
    """Connection-level failure after exhausting retries."""


@dataclass
class BackendEndpoint:
    role: str  # detect | generate | review | train
    base_url: str
    auth_token_env: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    rate_per_sec: float = 0.0  # 0 disables rate limiting

    def __post_init__(self) -> None:
        if self.role not in ("detect", "generate", "review", "train"):
            raise ValueError(f"unknown backend role '{self.role}'")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith("mock://")

    def auth_token(self) -> str | None:
        if not self.auth_token_env:
            return None
        return os.environ.get(self.auth_token_env)


class TokenBucket:
    """Blocking token bucket; clock injectable for tests."""

    def __init__(self, rate_per_sec: float, capacity: float | None = None,
                 clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_sec
        self.capacity = capacity if capacity is not None else max(1.0, rate_per_sec)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        while True:
            with self.lock:
                now = self.clock()
                self.tokens = min(
                    self.capacity, self.tokens + (now - self.updated) * self.rate
                )
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


class HttpBackendClient:
    """Typed wrapper over the wire protocol for one endpoint."""

    BACKOFF_BASE = 0.1

    def __init__(self, endpoint: BackendEndpoint, session: requests.Session | None = None,
                 sleep=time.sleep):
        self.endpoint = endpoint
        self.role = endpoint.role
        self.session = session or requests.Session()
        self.sleep = sleep
        self.bucket = TokenBucket(endpoint.rate_per_sec, sleep=sleep)
        self.in_flight = threading.BoundedSemaphore(max(1, endpoint.max_in_flight))

    def _headers(self, idempotency_key: str) -> dict:
        headers = {"Idempotency-Key": idempotency_key}
        token = self.endpoint.auth_token()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = self.endpoint.base_url.rstrip("/") + path
        idempotency_key = uuid.uuid4().hex
        attempts = self.endpoint.max_retries + 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            self.bucket.acquire()
            try:
                with self.in_flight:
                    if method == "GET":
                        resp = self.session.get(
                            url,
                            timeout=self.endpoint.timeout,
                            headers=self._headers(idempotency_key),
                        )
                    else:
                        resp = self.session.post(
                            url,
                            json=payload,
                            timeout=self.endpoint.timeout,
                            headers=self._headers(idempotency_key),
                        )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                if attempt < attempts - 1:
                    self.sleep(self.BACKOFF_BASE * (2 ** attempt))
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"{url} -> {resp.status_code}")
                if attempt < attempts - 1:
                    self.sleep(self.BACKOFF_BASE * (2 ** attempt))
                continue
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(
                    "internal", f"backend returned non-JSON payload: {exc}"
                ) from exc
            if resp.status_code >= 400:
                error = body.get("error", {})
                raise ProtocolError(
                    error.get("code", "internal"),
                    error.get("message", f"http {resp.status_code}"),
                )
            return body
        raise TransportError(f"{url} unreachable after {attempts} attempts: {last_exc}")

    # -- role methods -------------------------------------------------

    def detect(self, image_ref: str, prompt: str, box_threshold: float = 0.27,
               text_threshold: float = 0.25, model_ref: str | None = None) -> list[dict]:
        payload = {
            "protocol_version": PROTOCOL_VERSION,
            "request_id": uuid.uuid4().hex,
            "image_ref": str(image_ref),
            "prompt": prompt,
            "box_threshold": box_threshold,
            "text_threshold": text_threshold,
        }
        if model_ref:
            payload["model_ref"] = model_ref
        body = self._request("POST", "/detect", payload)
        return list(body.get("detections", []))

    def generate(self, model_ref: str, prompt: str, seed: int, count: int = 1) -> list[dict]:
        payload = {
            "protocol_version": PROTOCOL_VERSION,
            "request_id": uuid.uuid4().hex,
            "model_ref": model_ref,
            "prompt": prompt,
            "seed": seed,
            "count": count,
        }
        body = self._request("POST", "/generate", payload)
        return list(body.get("images", []))

    def review(self, image_ref: str, system_prompt: str = "", user_prompt: str = "",
               metadata: dict | None = None) -> str:
        payload = {
            "protocol_version": PROTOCOL_VERSION,
            "request_id": uuid.uuid4().hex,
            "task": "boxes",
            "image_ref": str(image_ref),
            "system_prompt": system_prompt,
            "user_prompt": user_prompt,
            "metadata": metadata or {},
        }
        body = self._request("POST", "/review", payload)
        return str(body.get("text", ""))

    def review_photorealism(self, image_ref: str, prompt: str = "",
                            metadata: dict | None = None) -> str:
        payload = {
            "protocol_version": PROTOCOL_VERSION,
            "request_id": uuid.uuid4().hex,
            "task": "photorealism",
            "image_ref": str(image_ref),
            "user_prompt": prompt,
            "metadata": metadata or {},
        }
        body = self._request("POST", "/review", payload)
        return str(body.get("text", ""))

    def train(self, job: dict, job_type: str) -> str:
        payload = {
            "protocol_version": PROTOCOL_VERSION,
            "request_id": uuid.uuid4().hex,
            "job_type": job_type,
            "job": job,
        }
        body = self._request("POST", "/train", payload)
        return str(body["job_id"])

    def poll(self, job_id: str) -> dict:
        return self._request("GET", f"/jobs/{job_id}")


def make_client(endpoint: BackendEndpoint, workspace: str | Path | None = None):
    """Client factory.

    ``mock://<world_dir>`` endpoints return the in-process mock for the
    endpoint's role; anything http(s) gets the transport client. Generate
    and train mocks keep their state under ``workspace``.
    """
    if endpoint.is_mock:
        from .mock import (
            MockDetectBackend,
            MockGenerateBackend,
            MockReviewBackend,
            MockTrainBackend,
            SyntheticWorld,
        )

        target = endpoint.base_url[len("mock://"):]
        if endpoint.role == "detect":
            return MockDetectBackend(SyntheticWorld.load(target))
        if endpoint.role == "review":
            return MockReviewBackend()
        if workspace is None:
            raise ValueError(f"{endpoint.role} mock needs a workspace directory")
        if endpoint.role == "generate":
            return MockGenerateBackend(workspace)
        return MockTrainBackend(workspace)
    return HttpBackendClient(endpoint)


# dispatch table used by config loading
def endpoint_from_config(role: str, raw: dict) -> BackendEndpoint:
    # reviewers get a single transport retry by default: a resampled
    # judgment after a parse-level problem would be a different judgment,
    # and transport blips rarely need more than one second chance
    default_retries = 1 if role == "review" else 3
    return BackendEndpoint(
        role=role,
        base_url=raw["base_url"],
        auth_token_env=raw.get("auth_token_env"),
        timeout=float(raw.get("timeout", 30.0)),
        max_retries=int(raw.get("max_retries", default_retries)),
        max_in_flight=int(raw.get("max_in_flight", 4)),
        rate_per_sec=float(raw.get("rate_per_sec", 0.0)),
    )
