"""Declarative run configuration: one JSON file drives every command.

String values support ``${VAR}`` environment interpolation so secrets
(reviewer API tokens) never land in the file itself.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .backends.client import BackendEndpoint, endpoint_from_config

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    pass


def _interpolate(value):
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"config references unset environment variable {name}")
            return os.environ[name]
        return _ENV_PATTERN.sub(sub, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


# Detector training defaults shipped to the train backend as job config.
DETECTOR_DEFAULTS = {
    "epochs": 60,
    "optimizer": "adamw",
    "beta1": 0.9,
    "beta2": 0.999,
    "weight_decay": 5e-4,
    "resolution": 640,
    "final_lr_factor": 0.5,
    "warmup_momentum": 0.8,
    "warmup_bias_lr": 0.1,
    "box_loss_weight": 7.5,
    "class_loss_weight": 0.5,
    "dfl_loss_weight": 1.5,
    "hsv_saturation": 0.7,
    "hsv_value": 0.4,
    "hsv_hue": 0.015,
    "translate": 0.1,
    "fliplr": 0.5,
    "scale": 0.5,
    "mosaic": 1.0,
    "close_mosaic_epochs": 10,
}

DIVERSIFY_DEFAULTS = {
    "prior_loss_weight": 1.0,
    "snr_gamma": 5.0,
    "lr_unet": 1e-4,
    "lr_text_encoder": 5e-6,
    "resolution": 1024,
}


@dataclass
class RunConfig:
    catalog: str
    images_dir: str
    output_dir: str
    seed: int
    endpoints: dict[str, BackendEndpoint]
    box_threshold: float = 0.27
    text_threshold: float = 0.25
    filter_threshold: float = 0.5
    nms_threshold: float = 0.5
    review_enabled: bool = True
    dedup_exact: int = 0
    dedup_near: int = 10
    split_fractions: tuple[float, float, float] = (0.64, 0.16, 0.20)
    mix_ratio: tuple[int, int] = (0, 1)
    mix_quotas: dict[str, int] = field(default_factory=dict)
    excluded_classes: list[str] = field(default_factory=list)
    diversify_enabled: bool = False
    prompt_catalog: str | None = None
    prompt_limit: int | None = None
    per_prompt_count: int = 1
    diversify_defaults: dict = field(default_factory=lambda: dict(DIVERSIFY_DEFAULTS))
    detector_hyperparams: dict = field(default_factory=lambda: dict(DETECTOR_DEFAULTS))
    eval_gt: str = "sidecar"  # sidecar | store
    confusion_iou: float = 0.45
    confusion_conf: float = 0.25
    max_in_flight: int = 4

    def validate(self) -> None:
        if not Path(self.catalog).exists():
            raise ConfigError(f"catalog file not found: {self.catalog}")
        if not Path(self.images_dir).exists():
            raise ConfigError(f"images directory not found: {self.images_dir}")
        for name, value in (
            ("box_threshold", self.box_threshold),
            ("text_threshold", self.text_threshold),
            ("filter_threshold", self.filter_threshold),
        ):
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not (0.0 < self.nms_threshold < 1.0):
            raise ConfigError("nms_threshold must lie in (0, 1)")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.eval_gt not in ("sidecar", "store"):
            raise ConfigError("eval_gt must be 'sidecar' or 'store'")
        for role in ("detect",):
            if role not in self.endpoints:
                raise ConfigError(f"missing endpoint for role '{role}'")

    def digest_params(self, stage: str) -> dict:
        """The config subset whose change invalidates a stage's artifact."""
        base: dict = {"seed": self.seed}
        if stage == "ingest":
            return {"images_dir": str(self.images_dir)}
        if stage == "dedup":
            return {"exact": self.dedup_exact, "near": self.dedup_near}
        if stage == "split":
            base.update({"fractions": list(self.split_fractions)})
            return base
        if stage == "annotate":
            return {
                "box": self.box_threshold,
                "text": self.text_threshold,
                "filter": self.filter_threshold,
                "nms": self.nms_threshold,
                "backend": self.endpoints["detect"].base_url,
            }
        if stage == "review":
            return {
                "enabled": self.review_enabled,
                "backend": self._endpoint_url("review"),
            }
        if stage == "diversify":
            base.update(
                {
                    "enabled": self.diversify_enabled,
                    "prompt_catalog": self.prompt_catalog,
                    "prompt_limit": self.prompt_limit,
                    "per_prompt_count": self.per_prompt_count,
                    "defaults": self.diversify_defaults,
                    "generate": self._endpoint_url("generate"),
                    "train": self._endpoint_url("train"),
                }
            )
            return base
        if stage == "mix":
            base.update(
                {
                    "ratio": list(self.mix_ratio),
                    "quotas": self.mix_quotas,
                    "excluded": sorted(self.excluded_classes),
                }
            )
            return base
        if stage == "train":
            return {
                "hyperparams": self.detector_hyperparams,
                "backend": self._endpoint_url("train"),
            }
        if stage == "eval":
            return {
                "gt": self.eval_gt,
                "confusion_iou": self.confusion_iou,
                "confusion_conf": self.confusion_conf,
                "backend": self.endpoints["detect"].base_url,
            }
        raise ConfigError(f"unknown stage '{stage}'")

    def _endpoint_url(self, role: str) -> str | None:
        ep = self.endpoints.get(role)
        return ep.base_url if ep else None


def load_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    raw = _interpolate(raw)
    try:
        endpoints = {
            role: endpoint_from_config(role, spec)
            for role, spec in raw.get("endpoints", {}).items()
        }
        thresholds = raw.get("thresholds", {})
        dedup = raw.get("dedup", {})
        split = raw.get("split", {})
        mix = raw.get("mix", {})
        diversify = raw.get("diversify", {})
        train = raw.get("train", {})
        evaluate = raw.get("eval", {})
        review = raw.get("review", {})
        seed = raw["seed"] if seed_override is None else seed_override
        config = RunConfig(
            catalog=raw["catalog"],
            images_dir=raw["images_dir"],
            output_dir=raw["output_dir"],
            seed=int(seed),
            endpoints=endpoints,
            box_threshold=float(thresholds.get("box", 0.27)),
            text_threshold=float(thresholds.get("text", 0.25)),
            filter_threshold=float(thresholds.get("filter", 0.5)),
            nms_threshold=float(thresholds.get("nms", 0.5)),
            review_enabled=bool(review.get("enabled", True)),
            dedup_exact=int(dedup.get("exact_thresh", 0)),
            dedup_near=int(dedup.get("near_thresh", 10)),
            split_fractions=tuple(split.get("fractions", (0.64, 0.16, 0.20))),
            mix_ratio=tuple(mix.get("ratio", (0, 1))),
            mix_quotas={k: int(v) for k, v in mix.get("quotas", {}).items()},
            excluded_classes=list(mix.get("excluded_classes", [])),
            diversify_enabled=bool(diversify.get("enabled", False)),
            prompt_catalog=diversify.get("prompt_catalog"),
            prompt_limit=diversify.get("prompt_limit"),
            per_prompt_count=int(diversify.get("per_prompt_count", 1)),
            diversify_defaults={**DIVERSIFY_DEFAULTS, **diversify.get("defaults", {})},
            detector_hyperparams={**DETECTOR_DEFAULTS, **train.get("hyperparams", {})},
            eval_gt=evaluate.get("gt", "sidecar"),
            confusion_iou=float(evaluate.get("confusion_iou", 0.45)),
            confusion_conf=float(evaluate.get("confusion_conf", 0.25)),
            max_in_flight=int(raw.get("max_in_flight", 4)),
        )
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc}") from exc
    config.validate()
    return config
