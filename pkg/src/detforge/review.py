"""Reviewer-facing side of the pipeline: overlay rendering, prompt assembly,
verdict parsing, and the keep/drop gates for pseudo-labels and generated
images.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from PIL import Image, ImageDraw

from .annotate import Annotation
from .catalog import ClassCatalog, DEFAULT_TEMPLATES, render_prompt

MAX_OVERLAY_SIDE = 512
STROKE_WIDTH = 2

# Fixed 12-color palette, cycled by annotation index.
PALETTE = (
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4",
    "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff",
)


class ReviewParseError(ValueError):
    """Reviewer output could not be turned into a complete verdict.

    Images whose verdicts fail to parse go to the needs-attention bucket
    and are excluded from training; booleans are never defaulted.
    """


@dataclass(frozen=True)
class ReviewVerdict:
    image_id: str
    precision: bool
    recall: bool
    fit: bool
    raw_text: str
    reviewer: str = ""

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "reviewer": self.reviewer,
            "precision": self.precision,
            "recall": self.recall,
            "fit": self.fit,
            "kept": gate_pseudo_labels(self),
            "raw_text": self.raw_text,
        }


@dataclass(frozen=True)
class PhotorealismVerdict:
    image_id: str
    suitable: bool
    authentic: bool
    raw_text: str
    reviewer: str = ""

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "reviewer": self.reviewer,
            "suitable": self.suitable,
            "authentic": self.authentic,
            "kept": gate_photorealism(self),
            "raw_text": self.raw_text,
        }


@dataclass
class OverlayImage:
    image_id: str
    image: Image.Image
    drawn: list[Annotation]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.size

    def save(self, path: str | Path) -> None:
        self.image.save(path, format="PNG")

    def sidecar(self, source_path: str, truth_path: str | None = None) -> dict:
        """Machine-readable record of what the overlay shows; written next
        to the overlay so a reviewer backend can ground its judgment."""
        return {
            "image_id": self.image_id,
            "source_path": source_path,
            "truth_path": truth_path,
            "drawn": [
                {
                    "box": list(a.box.as_xyxy()),
                    "class": a.class_name,
                    "score": a.score,
                }
                for a in self.drawn
            ],
        }


def render_overlay(
    image: Image.Image | str | Path,
    annotations: Sequence[Annotation],
    image_id: str | None = None,
) -> OverlayImage:
    """Draw every annotation on the image and compress it for review.

    Rectangles get 2 px strokes in a per-annotation palette color; the
    label "class score" (two decimals) sits at the box's top-left corner.
    The result is resized so the long side is exactly
    min(512, original long side), aspect preserved.
    """
    if not annotations:
        raise ValueError("render_overlay needs at least one annotation")
    if isinstance(image, (str, Path)):
        with Image.open(image) as img:
            return render_overlay(img.copy(), annotations, image_id)
    image_id = image_id or annotations[0].image_id
    canvas = image.convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for idx, ann in enumerate(annotations):
        color = PALETTE[idx % len(PALETTE)]
        x1, y1, x2, y2 = ann.box.as_xyxy()
        draw.rectangle((x1, y1, x2, y2), outline=color, width=STROKE_WIDTH)
        draw.text((x1 + 2, y1 + 2), f"{ann.class_name} {ann.score:.2f}", fill=color)
    long_side = max(canvas.size)
    if long_side > MAX_OVERLAY_SIDE:
        scale = MAX_OVERLAY_SIDE / long_side
        new_size = (
            max(1, round(canvas.size[0] * scale)),
            max(1, round(canvas.size[1] * scale)),
        )
        canvas = canvas.resize(new_size, Image.Resampling.LANCZOS)
    return OverlayImage(image_id=image_id, image=canvas, drawn=list(annotations))


def select_for_review(annotations: Sequence[Annotation]) -> bool:
    """Reviewer is consulted only for images with multiple annotations or
    any confidence below 0.5; everything else stays in the training pool
    untouched (the cost-saving policy)."""
    if len(annotations) > 1:
        return True
    return any(a.score < 0.5 for a in annotations)


def build_review_request(
    image: Image.Image | str | Path,
    annotations: Sequence[Annotation],
    catalog: ClassCatalog,
    image_id: str | None = None,
) -> tuple[OverlayImage, str, str]:
    """Overlay plus the (system, user) prompt pair for the box reviewer.

    The target placeholder is the image's primary class; the secondary
    target is the comma-joined co-occurring classes, or the literal phrase
    "no secondary target" when the class has none.
    """
    overlay = render_overlay(image, annotations, image_id)
    target = annotations[0].class_name
    entry = catalog.get(target)
    if entry.co_occurring:
        secondary = ", ".join(catalog.get(c).name for c in entry.co_occurring)
    else:
        secondary = "no secondary target"
    system_prompt = DEFAULT_TEMPLATES["review_system"].template
    user_prompt = render_prompt(
        DEFAULT_TEMPLATES["review_user"],
        {"target": entry.name, "secondary_target": secondary},
    )
    return overlay, system_prompt, user_prompt


def build_photorealism_request(class_name: str) -> str:
    return render_prompt(DEFAULT_TEMPLATES["photorealism"], {"target": class_name})


# ---------------------------------------------------------------------------
# Verdict parsing
# ---------------------------------------------------------------------------

_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def _json_candidates(text: str):
    """Balanced top-level {...} spans, left to right, string-aware."""
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    yield text[start : i + 1]


def _coerce_bool(value, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        match = _YES_NO.search(value)
        if match:
            return match.group(1).lower() == "yes"
    raise ReviewParseError(f"field '{key}' is not a yes/no answer: {value!r}")


def parse_verdict(
    raw_text: str, image_id: str = "", reviewer: str = ""
) -> ReviewVerdict:
    """Extract the first JSON object carrying Precision/Recall/Fit answers.

    The object may be fenced or bare and embedded in prose; keys match
    case-insensitively and values may wrap the yes/no in extra words. Any
    missing or non-yes/no field fails the whole verdict - partial booleans
    are never fabricated.
    """
    wanted = ("precision", "recall", "fit")
    for candidate in _json_candidates(raw_text):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict):
            continue
        lowered = {str(k).lower(): v for k, v in obj.items()}
        if not all(k in lowered for k in wanted):
            continue
        return ReviewVerdict(
            image_id=image_id,
            precision=_coerce_bool(lowered["precision"], "Precision"),
            recall=_coerce_bool(lowered["recall"], "Recall"),
            fit=_coerce_bool(lowered["fit"], "Fit"),
            raw_text=raw_text,
            reviewer=reviewer,
        )
    raise ReviewParseError("no JSON object with Precision/Recall/Fit found")


def parse_photorealism(
    raw_text: str, image_id: str = "", reviewer: str = ""
) -> PhotorealismVerdict:
    """YES/NO answers to the two photorealism questions, in order."""
    answers = _YES_NO.findall(raw_text)
    if len(answers) < 2:
        raise ReviewParseError(
            f"expected two YES/NO answers, found {len(answers)}"
        )
    return PhotorealismVerdict(
        image_id=image_id,
        suitable=answers[0].lower() == "yes",
        authentic=answers[1].lower() == "yes",
        raw_text=raw_text,
        reviewer=reviewer,
    )


def gate_pseudo_labels(verdict: ReviewVerdict) -> bool:
    """Keep only when all three questions are answered positively."""
    return verdict.precision and verdict.recall and verdict.fit


def gate_photorealism(verdict: PhotorealismVerdict) -> bool:
    return verdict.suitable and verdict.authentic


def agreement_matrix(
    a: Mapping[str, ReviewVerdict] | Sequence[ReviewVerdict],
    b: Mapping[str, ReviewVerdict] | Sequence[ReviewVerdict],
) -> tuple[dict[tuple[bool, bool], int], float]:
    """2x2 keep/drop counts between two reviewers plus the agreement rate."""
    def as_map(v) -> dict[str, ReviewVerdict]:
        if isinstance(v, Mapping):
            return dict(v)
        return {x.image_id: x for x in v}

    map_a = as_map(a)
    map_b = as_map(b)
    if set(map_a) != set(map_b):
        raise ValueError("reviewers judged different image sets")
    if not map_a:
        raise ValueError("agreement over an empty verdict set is undefined")
    counts = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
    for image_id in map_a:
        counts[(gate_pseudo_labels(map_a[image_id]), gate_pseudo_labels(map_b[image_id]))] += 1
    total = sum(counts.values())
    agree = (counts[(True, True)] + counts[(False, False)]) / total
    return counts, agree


def save_verdicts(verdicts: Sequence[ReviewVerdict | PhotorealismVerdict], path: str | Path) -> None:
    ordered = sorted(verdicts, key=lambda v: v.image_id)
    with open(path, "w") as fh:
        for verdict in ordered:
            fh.write(json.dumps(verdict.to_json(), sort_keys=True) + "\n")
