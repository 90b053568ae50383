"""Wire protocol for the four model roles.

JSON over HTTP: POST /detect, /generate, /review, /train and GET
/jobs/{id}, plus GET /healthz. Every payload carries a protocol_version.
Boxes travel as pixel xyxy floats, origin top-left. Images go by
reference (path or URL); overlays may be base64-inlined for review calls.
"""
from __future__ import annotations

from typing import Any, Mapping

PROTOCOL_VERSION = "1"

DEFAULT_BOX_THRESHOLD = 0.27
DEFAULT_TEXT_THRESHOLD = 0.25

ROLES = ("detect", "generate", "review", "train")

JOB_STATUSES = ("pending", "running", "succeeded", "failed")

REVIEW_TASKS = ("boxes", "photorealism")

# error code -> http status
ERROR_CODES = {
    "bad_request": 400,   # body is not parseable JSON
    "validation": 400,    # schema violation (missing/ill-typed field)
    "unsupported": 400,   # well-formed but outside this endpoint's contract
    "not_found": 404,     # unknown route
    "unknown_job": 404,
    "internal": 500,
}


class ProtocolError(Exception):
    def __init__(self, code: str, message: str):
        if code not in ERROR_CODES:
            code = "internal"
        super().__init__(message)
        self.code = code
        self.http_status = ERROR_CODES[code]
        self.message = message

    def to_json(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "error": {"code": self.code, "message": self.message},
        }


def _require(payload: Mapping[str, Any], field: str, types: tuple | type) -> Any:
    if field not in payload:
        raise ProtocolError("validation", f"missing required field '{field}'")
    value = payload[field]
    if not isinstance(value, types):
        raise ProtocolError("validation", f"field '{field}' has the wrong type")
    return value


def _number(payload: Mapping[str, Any], field: str, default: float) -> float:
    value = payload.get(field, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError("validation", f"field '{field}' must be a number")
    return float(value)


def validate_detect_request(payload: Mapping[str, Any]) -> dict:
    """Normalize a /detect request, applying the default thresholds when
    the caller omits them."""
    image_ref = _require(payload, "image_ref", str)
    prompt = _require(payload, "prompt", str)
    return {
        "protocol_version": str(payload.get("protocol_version", PROTOCOL_VERSION)),
        "request_id": str(payload.get("request_id", "")),
        "image_ref": image_ref,
        "prompt": prompt,
        "box_threshold": _number(payload, "box_threshold", DEFAULT_BOX_THRESHOLD),
        "text_threshold": _number(payload, "text_threshold", DEFAULT_TEXT_THRESHOLD),
        "model_ref": payload.get("model_ref"),
    }


def detect_response(request: Mapping[str, Any], detections: list[dict]) -> dict:
    return {
        "protocol_version": PROTOCOL_VERSION,
        "request_id": request.get("request_id", ""),
        "thresholds": {
            "box": request["box_threshold"],
            "text": request["text_threshold"],
        },
        "detections": [
            {
                "box": [float(v) for v in d["box"]],
                "score": float(d["score"]),
                "phrase": str(d["phrase"]),
            }
            for d in detections
        ],
    }


def validate_generate_request(payload: Mapping[str, Any]) -> dict:
    model_ref = _require(payload, "model_ref", str)
    prompt = _require(payload, "prompt", str)
    seed = _require(payload, "seed", int)
    if isinstance(seed, bool):
        raise ProtocolError("validation", "field 'seed' must be an integer")
    count = payload.get("count", 1)
    if isinstance(count, bool) or not isinstance(count, int) or count < 0:
        raise ProtocolError("validation", "field 'count' must be a non-negative integer")
    return {
        "protocol_version": str(payload.get("protocol_version", PROTOCOL_VERSION)),
        "request_id": str(payload.get("request_id", "")),
        "model_ref": model_ref,
        "prompt": prompt,
        "seed": int(seed),
        "count": count,
    }


def generate_response(request: Mapping[str, Any], images: list[dict]) -> dict:
    return {
        "protocol_version": PROTOCOL_VERSION,
        "request_id": request.get("request_id", ""),
        "images": [
            {
                "image_id": str(i["image_id"]),
                "path": str(i["path"]),
                "width": int(i["width"]),
                "height": int(i["height"]),
                "class": str(i["class"]),
                "seed": int(i["seed"]),
            }
            for i in images
        ],
    }


def validate_review_request(payload: Mapping[str, Any]) -> dict:
    task = _require(payload, "task", str)
    if task not in REVIEW_TASKS:
        raise ProtocolError(
            "validation", f"task must be one of {list(REVIEW_TASKS)}"
        )
    image_ref = payload.get("image_ref")
    image_b64 = payload.get("image_b64")
    if not image_ref and not image_b64:
        raise ProtocolError("validation", "one of image_ref/image_b64 is required")
    metadata = payload.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ProtocolError("validation", "field 'metadata' must be an object")
    return {
        "protocol_version": str(payload.get("protocol_version", PROTOCOL_VERSION)),
        "request_id": str(payload.get("request_id", "")),
        "task": task,
        "image_ref": image_ref,
        "image_b64": image_b64,
        "system_prompt": str(payload.get("system_prompt", "")),
        "user_prompt": str(payload.get("user_prompt", "")),
        "metadata": metadata,
    }


def review_response(request: Mapping[str, Any], text: str) -> dict:
    return {
        "protocol_version": PROTOCOL_VERSION,
        "request_id": request.get("request_id", ""),
        "text": text,
    }


def validate_train_request(payload: Mapping[str, Any]) -> dict:
    job_type = _require(payload, "job_type", str)
    if job_type not in ("diversify", "detector"):
        raise ProtocolError("validation", "job_type must be diversify or detector")
    job = _require(payload, "job", dict)
    return {
        "protocol_version": str(payload.get("protocol_version", PROTOCOL_VERSION)),
        "request_id": str(payload.get("request_id", "")),
        "job_type": job_type,
        "job": dict(job),
    }


def train_response(request: Mapping[str, Any], job_id: str) -> dict:
    return {
        "protocol_version": PROTOCOL_VERSION,
        "request_id": request.get("request_id", ""),
        "job_id": job_id,
    }


def job_status_response(job_id: str, status: str, artifact_ref: str | None = None,
                        error: str | None = None) -> dict:
    if status not in JOB_STATUSES:
        raise ProtocolError("internal", f"bad job status '{status}'")
    out: dict[str, Any] = {
        "protocol_version": PROTOCOL_VERSION,
        "job_id": job_id,
        "status": status,
    }
    if artifact_ref is not None:
        out["artifact_ref"] = artifact_ref
    if error is not None:
        out["error"] = error
    return out


def healthz_response(role: str) -> dict:
    return {"status": "ok", "role": role, "protocol_version": PROTOCOL_VERSION}
