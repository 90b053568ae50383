"""Subject-driven data diversification: fine-tuning job specs, inference
prompt expansion, photorealism-gated generation, and generated/original
dataset mixing under ratio and quota rules.

The diffusion math itself runs inside a generation backend; this module
only owns the job parameters that travel on the wire.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .catalog import ClassEntry, InstanceEntry
from .preprocess import ImageRecord
from .review import PhotorealismVerdict, gate_photorealism

log = logging.getLogger(__name__)

STEP_MULTIPLIERS = (120, 140)
MIN_TRAIN_STEPS = 800

TERRAINS = ("general", "land", "water")


class DiversifyError(ValueError):
    pass


@dataclass(frozen=True)
class DiversificationJobSpec:
    instance_name: str
    class_name: str
    train_image_refs: tuple[str, ...]
    steps_multiplier: int
    max_steps: int
    prior_loss_weight: float = 1.0
    snr_gamma: float = 5.0
    lr_unet: float = 1e-4
    lr_text_encoder: float = 5e-6
    resolution: int = 1024
    class_prior_prompt: str = ""
    instance_prompt: str = ""

    def __post_init__(self) -> None:
        if self.steps_multiplier not in STEP_MULTIPLIERS:
            raise DiversifyError(
                f"steps multiplier must be one of {STEP_MULTIPLIERS}"
            )
        expected = max(MIN_TRAIN_STEPS, self.steps_multiplier * len(self.train_image_refs))
        if self.max_steps != expected:
            raise DiversifyError(
                f"max_steps {self.max_steps} != max({MIN_TRAIN_STEPS}, "
                f"{self.steps_multiplier} * {len(self.train_image_refs)})"
            )
        if self.prior_loss_weight <= 0 or self.snr_gamma <= 0:
            raise DiversifyError("loss weights must be positive")

    def to_json(self) -> dict:
        return {
            "instance_name": self.instance_name,
            "class_name": self.class_name,
            "train_image_refs": list(self.train_image_refs),
            "steps_multiplier": self.steps_multiplier,
            "max_steps": self.max_steps,
            "prior_loss_weight": self.prior_loss_weight,
            "snr_gamma": self.snr_gamma,
            "lr_unet": self.lr_unet,
            "lr_text_encoder": self.lr_text_encoder,
            "resolution": self.resolution,
            "class_prior_prompt": self.class_prior_prompt,
            "instance_prompt": self.instance_prompt,
        }


@dataclass(frozen=True)
class GenerationRequest:
    model_ref: str
    prompt_id: int
    prompt_text: str
    seed: int
    count: int = 1


@dataclass(frozen=True)
class GenerationPrompt:
    id: int
    description: str
    template: str
    terrain: str


@dataclass
class MixPlan:
    ratio: tuple[int, int]  # generated : original
    per_class_quota: dict[str, int] = field(default_factory=dict)
    excluded_classes: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        g, o = self.ratio
        if g < 0 or o < 0 or (g == 0 and o == 0):
            raise DiversifyError(f"bad mix ratio {self.ratio}")
        for cls in self.excluded_classes:
            if self.per_class_quota.get(cls, 0) != 0:
                raise DiversifyError(f"excluded class '{cls}' has nonzero quota")


def make_job_specs(
    instance: InstanceEntry,
    class_entry: ClassEntry,
    defaults: Mapping[str, float] | None = None,
) -> tuple[DiversificationJobSpec, DiversificationJobSpec]:
    """Two fine-tuning jobs per instance, differing only in the steps
    multiplier: one trained a little longer for resemblance, one shorter
    for diversity. max_steps = max(800, k * image count)."""
    if len(instance.image_refs) < InstanceEntry.MIN_IMAGES:
        raise DiversifyError(
            f"instance '{instance.instance_name}' has fewer than "
            f"{InstanceEntry.MIN_IMAGES} images"
        )
    defaults = dict(defaults or {})
    class_prior = f"a photo of a {class_entry.name}"
    instance_prompt = f"a photo of a <{instance.instance_name}> {class_entry.name}"
    specs = []
    for k in STEP_MULTIPLIERS:
        specs.append(
            DiversificationJobSpec(
                instance_name=instance.instance_name,
                class_name=class_entry.name,
                train_image_refs=instance.image_refs,
                steps_multiplier=k,
                max_steps=max(MIN_TRAIN_STEPS, k * len(instance.image_refs)),
                prior_loss_weight=float(defaults.get("prior_loss_weight", 1.0)),
                snr_gamma=float(defaults.get("snr_gamma", 5.0)),
                lr_unet=float(defaults.get("lr_unet", 1e-4)),
                lr_text_encoder=float(defaults.get("lr_text_encoder", 5e-6)),
                resolution=int(defaults.get("resolution", 1024)),
                class_prior_prompt=class_prior,
                instance_prompt=instance_prompt,
            )
        )
    return specs[0], specs[1]


def load_prompt_catalog(path: str | Path | None = None) -> list[GenerationPrompt]:
    """Load the id-indexed, terrain-tagged inference prompt catalog.

    Without a path the catalog bundled with the package is used.
    """
    if path is None:
        text = (
            resources.files("detforge.data")
            .joinpath("generation_prompts.json")
            .read_text()
        )
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    prompts = []
    for item in raw:
        terrain = item["terrain"]
        if terrain not in TERRAINS:
            raise DiversifyError(f"prompt {item['id']} has unknown terrain '{terrain}'")
        prompts.append(
            GenerationPrompt(
                id=int(item["id"]),
                description=item["description"],
                template=item["template"],
                terrain=terrain,
            )
        )
    ids = [p.id for p in prompts]
    if len(ids) != len(set(ids)):
        raise DiversifyError("prompt catalog has duplicate ids")
    return sorted(prompts, key=lambda p: p.id)


def prompt_ids_for_terrain(
    prompts: Sequence[GenerationPrompt], terrain: str
) -> list[int]:
    """General prompts apply to every class; land- and water-specific
    prompts extend the general set for their terrain."""
    if terrain not in TERRAINS:
        raise DiversifyError(f"unknown terrain tag '{terrain}'")
    applicable = {"general"}
    if terrain != "general":
        applicable.add(terrain)
    return [p.id for p in prompts if p.terrain in applicable]


def expand_inference_prompts(
    class_entry: ClassEntry,
    terrain: str,
    prompt_catalog: Sequence[GenerationPrompt],
    instance_name: str = "",
    model_ref: str = "",
    base_seed: int = 0,
    count: int = 1,
) -> list[GenerationRequest]:
    """One generation request per applicable prompt, class name substituted.

    Seeds derive from (base_seed, prompt id) so a request set is stable
    under catalog reordering.
    """
    by_id = {p.id: p for p in prompt_catalog}
    requests = []
    for pid in prompt_ids_for_terrain(prompt_catalog, terrain):
        template = by_id[pid].template
        text = template.format(
            class_name=class_entry.name, instance_name=instance_name
        )
        requests.append(
            GenerationRequest(
                model_ref=model_ref,
                prompt_id=pid,
                prompt_text=text,
                seed=base_seed * 1000 + pid,
                count=count,
            )
        )
    return requests


def run_generation(
    specs: Sequence[DiversificationJobSpec],
    requests: Sequence[GenerationRequest],
    gen_backend,
    review_backend,
    model_refs: Sequence[str] | None = None,
    reviewer_tag: str = "photorealism",
) -> tuple[list[ImageRecord], list[PhotorealismVerdict]]:
    """Generate, gate on photorealism, and return the approved pool.

    ``gen_backend.generate(model_ref, prompt, seed, count)`` must return a
    list of image descriptors ``{"path", "image_id", "width", "height",
    "class", "seed"}``. Each image is judged by
    ``review_backend.review_photorealism(image_ref, prompt, metadata)``
    which returns raw reviewer text with two YES/NO answers. Requests
    whose backend call fails are logged and skipped; the run continues.

    ``model_refs`` are the trained artifacts of ``specs`` (same order);
    requests carrying no model_ref of their own are fanned out across
    them evenly, splitting the load over the two models per instance.
    """
    from .review import parse_photorealism  # local import to avoid cycle noise

    if model_refs is None:
        model_refs = [
            f"subject-model/{s.instance_name}-k{s.steps_multiplier}" for s in specs
        ]
    model_refs = list(model_refs)
    approved: list[ImageRecord] = []
    verdicts: list[PhotorealismVerdict] = []
    for i, request in enumerate(requests):
        model_ref = request.model_ref
        if not model_ref and model_refs:
            model_ref = model_refs[i % len(model_refs)]
        try:
            generated = gen_backend.generate(
                model_ref, request.prompt_text, request.seed, request.count
            )
        except Exception as exc:
            log.warning("generation request %s failed: %s", request.prompt_id, exc)
            continue
        for item in generated:
            image_id = item["image_id"]
            class_name = item["class"]
            try:
                raw_text = review_backend.review_photorealism(
                    item["path"],
                    prompt=class_name,
                    metadata={"seed": item.get("seed", request.seed), "image_id": image_id},
                )
                verdict = parse_photorealism(raw_text, image_id, reviewer_tag)
            except Exception as exc:
                log.warning("photorealism review of %s failed: %s", image_id, exc)
                verdicts.append(
                    PhotorealismVerdict(image_id, False, False, f"error: {exc}", reviewer_tag)
                )
                continue
            verdicts.append(verdict)
            if gate_photorealism(verdict):
                approved.append(
                    ImageRecord(
                        id=image_id,
                        path=item["path"],
                        class_names=(class_name,),
                        origin="generated",
                        width=int(item["width"]),
                        height=int(item["height"]),
                    )
                )
    return approved, verdicts


def default_quotas(
    original_train: Sequence[ImageRecord],
    total_generated: int,
    diversify_classes: Sequence[str],
    excluded: set[str],
) -> dict[str, int]:
    """Apportion the generated budget proportionally to original class
    counts among diversify-enabled classes, floor division with the
    remainder assigned to the largest-quota class."""
    eligible = [c for c in diversify_classes if c not in excluded]
    counts = {c: 0 for c in eligible}
    for rec in original_train:
        if rec.primary_class in counts:
            counts[rec.primary_class] += 1
    total_weight = sum(counts.values())
    if total_weight == 0 or total_generated == 0:
        return {c: 0 for c in eligible}
    quotas = {
        c: (counts[c] * total_generated) // total_weight for c in eligible
    }
    remainder = total_generated - sum(quotas.values())
    if remainder > 0:
        largest = max(sorted(quotas), key=lambda c: quotas[c])
        quotas[largest] += remainder
    return quotas


def mix_dataset(
    original_train: Sequence[ImageRecord],
    generated_pool: Sequence[ImageRecord],
    plan: MixPlan,
    seed: int,
) -> list[ImageRecord]:
    """Blend generated images into the original training set.

    The generated share is ratio * |original train|, apportioned by
    per-class quota (excluded classes get zero) and drawn seeded-random
    without replacement. Originals are always all included except in the
    degenerate generated-only ratio g:0.
    """
    g, o = plan.ratio
    n_original = len(original_train)
    if o == 0:
        total_generated = g * n_original
        selected_original: list[ImageRecord] = []
    else:
        total_generated = (g * n_original) // o
        selected_original = list(original_train)
    if total_generated == 0:
        return selected_original

    pool_by_class: dict[str, list[ImageRecord]] = {}
    for rec in generated_pool:
        if rec.origin != "generated":
            raise DiversifyError(f"pool image {rec.id} is not generated")
        pool_by_class.setdefault(rec.primary_class, []).append(rec)

    overrides = dict(plan.per_class_quota)
    for cls in plan.excluded_classes:
        overrides[cls] = 0
    fixed = sum(overrides.values())
    if fixed > total_generated:
        raise DiversifyError(
            f"explicit quotas ({fixed}) exceed the generated budget "
            f"({total_generated})"
        )
    remaining_classes = [c for c in sorted(pool_by_class) if c not in overrides]
    quotas = default_quotas(
        original_train,
        total_generated - fixed,
        remaining_classes,
        plan.excluded_classes,
    )
    quotas.update(overrides)

    shortfalls = {
        cls: quota - len(pool_by_class.get(cls, []))
        for cls, quota in quotas.items()
        if quota > len(pool_by_class.get(cls, []))
    }
    if shortfalls:
        detail = ", ".join(f"{c}: short {n}" for c, n in sorted(shortfalls.items()))
        raise DiversifyError(f"generated pool cannot satisfy quotas ({detail})")

    selected_generated: list[ImageRecord] = []
    for cls in sorted(quotas):
        quota = quotas[cls]
        if quota <= 0:
            continue
        candidates = sorted(pool_by_class[cls], key=lambda r: r.id)
        rng = random.Random(f"{seed}:mix:{cls}")
        rng.shuffle(candidates)
        selected_generated.extend(candidates[:quota])
    return selected_original + sorted(selected_generated, key=lambda r: r.id)
