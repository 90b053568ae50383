"""HTTP server exposing the synthetic-world mocks over the wire protocol.

Runs in-process (tests spin it up on a thread) and standalone via the
``detforge-mock-server`` console script, which is also what the external
shim implementations run their contract suites against.
"""
from __future__ import annotations

import argparse
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .mock import (
    MockDetectBackend,
    MockGenerateBackend,
    MockReviewBackend,
    MockTrainBackend,
    SyntheticWorld,
)
from .protocol import (
    ProtocolError,
    detect_response,
    generate_response,
    healthz_response,
    job_status_response,
    review_response,
    train_response,
    validate_detect_request,
    validate_generate_request,
    validate_review_request,
    validate_train_request,
)

_JOB_PATH = re.compile(r"^/jobs/([A-Za-z0-9_.-]+)$")


class MockModelServer:
    """All four roles behind one port, answering from the synthetic world."""

    def __init__(self, world_dir: str | Path, workspace: str | Path,
                 photorealism_rule: str = "always_yes"):
        world = SyntheticWorld.load(world_dir)
        workspace = Path(workspace)
        workspace.mkdir(parents=True, exist_ok=True)
        self.detect_backend = MockDetectBackend(world)
        self.generate_backend = MockGenerateBackend(workspace)
        self.review_backend = MockReviewBackend(photorealism_rule)
        self.train_backend = MockTrainBackend(workspace)
        self.seen_idempotency_keys: dict[str, int] = {}

    def handle(self, method: str, path: str, payload: dict | None,
               idempotency_key: str | None = None) -> tuple[int, dict]:
        if idempotency_key:
            self.seen_idempotency_keys[idempotency_key] = (
                self.seen_idempotency_keys.get(idempotency_key, 0) + 1
            )
        try:
            if method == "GET" and path == "/healthz":
                return 200, healthz_response("all")
            match = _JOB_PATH.match(path)
            if method == "GET" and match:
                status = self.train_backend.poll(match.group(1))
                return 200, job_status_response(
                    status["job_id"],
                    status["status"],
                    status.get("artifact_ref"),
                    status.get("error"),
                )
            if method != "POST" or path not in ("/detect", "/generate", "/review", "/train"):
                raise ProtocolError("not_found", f"no route {method} {path}")
            if payload is None:
                raise ProtocolError("bad_request", "request body is not valid JSON")
            if path == "/detect":
                request = validate_detect_request(payload)
                detections = self.detect_backend.detect(
                    request["image_ref"],
                    request["prompt"],
                    request["box_threshold"],
                    request["text_threshold"],
                    request["model_ref"],
                )
                return 200, detect_response(request, detections)
            if path == "/generate":
                request = validate_generate_request(payload)
                images = self.generate_backend.generate(
                    request["model_ref"], request["prompt"],
                    request["seed"], request["count"],
                )
                return 200, generate_response(request, images)
            if path == "/review":
                request = validate_review_request(payload)
                if request["task"] == "boxes":
                    text = self.review_backend.review(
                        request["image_ref"],
                        request["system_prompt"],
                        request["user_prompt"],
                        request["metadata"],
                    )
                else:
                    text = self.review_backend.review_photorealism(
                        request["image_ref"],
                        request["user_prompt"],
                        request["metadata"],
                    )
                return 200, review_response(request, text)
            request = validate_train_request(payload)
            job_id = self.train_backend.train(request["job"], request["job_type"])
            return 200, train_response(request, job_id)
        except ProtocolError as exc:
            return exc.http_status, exc.to_json()
        except Exception as exc:  # keep the contract: never crash the handler
            err = ProtocolError("internal", f"{type(exc).__name__}: {exc}")
            return err.http_status, err.to_json()


class _Handler(BaseHTTPRequestHandler):
    server_version = "detforge-mock/1"
    model_server: MockModelServer  # set by serve()

    def _reply(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _payload(self) -> dict | None:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return None
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError:
            return None
        return parsed if isinstance(parsed, dict) else None

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        status, body = self.model_server.handle("GET", self.path, None)
        self._reply(status, body)

    def do_POST(self) -> None:  # noqa: N802
        status, body = self.model_server.handle(
            "POST", self.path, self._payload(),
            self.headers.get("Idempotency-Key"),
        )
        self._reply(status, body)

    def log_message(self, fmt, *args) -> None:  # quiet by default
        pass


def serve(model_server: MockModelServer, host: str = "127.0.0.1",
          port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"model_server": model_server})
    httpd = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return httpd


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="synthetic-world mock model server")
    parser.add_argument("--world", required=True, help="synthetic world directory")
    parser.add_argument("--workspace", required=True, help="state dir for generate/train")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument(
        "--photorealism-rule", default="always_yes",
        choices=["always_yes", "reject_odd_seeds"],
    )
    args = parser.parse_args(argv)
    server = MockModelServer(args.world, args.workspace, args.photorealism_rule)
    httpd = ThreadingHTTPServer((args.host, args.port),
                                type("BoundHandler", (_Handler,), {"model_server": server}))
    print(f"mock model server on http://{args.host}:{httpd.server_address[1]}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
