"""Open-vocabulary pseudo-labeling: prompt-set construction, detection
collection, score filtering, label canonicalization, and class-agnostic NMS.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .catalog import ClassCatalog, AmbiguousSynonymError, normalize_phrase
from .geometry import Box, ScoredBox, nms_class_agnostic
from .preprocess import ImageRecord

COOCCUR_DELIMITER = " . "  # delimiter the OVD backend expects between phrases

STAGES = ("raw", "filtered", "final", "approved", "rejected")

PROMPT_KINDS = ("original", "synonym", "cooccurring", "cooccurring_synonym")


class AnnotateError(ValueError):
    pass


@dataclass(frozen=True)
class DetectPrompt:
    text: str
    kind: str  # original | synonym | cooccurring
    decode_map: Mapping[str, str]  # normalized phrase -> canonical class
    via_synonym: str | None = None  # set when the queried class was substituted

    @property
    def effective_kind(self) -> str:
        if self.kind == "cooccurring" and self.via_synonym:
            return "cooccurring_synonym"
        return self.kind


@dataclass(frozen=True)
class RawAnnotation:
    image_id: str
    box: Box
    score: float
    phrase: str
    prompt_kind: str
    prompt: DetectPrompt | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise AnnotateError(f"score outside [0, 1]: {self.score}")
        if self.prompt_kind not in PROMPT_KINDS:
            raise AnnotateError(f"bad prompt kind '{self.prompt_kind}'")


@dataclass(frozen=True)
class Annotation:
    image_id: str
    box: Box
    score: float
    class_name: str
    stage: str = "final"
    phrase: str = ""
    prompt_kind: str = "original"

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise AnnotateError(f"bad stage '{self.stage}'")

    def advanced(self, stage: str) -> "Annotation":
        """Stage transitions move forward only."""
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise AnnotateError(
                f"stage cannot move backwards: {self.stage} -> {stage}"
            )
        return replace(self, stage=stage)


def build_prompt_set(class_name: str, catalog: ClassCatalog) -> list[DetectPrompt]:
    """All detection prompts for one class.

    Emits, in order: the original class name; if the class has co-occurring
    classes, one prompt joining the class with them (original names); then
    per synonym a single-phrase prompt plus, again only if co-occurring
    classes exist, a joined prompt with the synonym substituted for the
    queried class. Joined prompts use the OVD delimiter between phrases.

    Prompt count is therefore 1 + [co] + |syn| * (1 + [co]).
    """
    entry = catalog.get(class_name)
    co_names = [catalog.get(c).name for c in entry.co_occurring]
    prompts: list[DetectPrompt] = []

    prompts.append(
        DetectPrompt(
            text=entry.name,
            kind="original",
            decode_map={normalize_phrase(entry.name): entry.name},
        )
    )
    if co_names:
        decode = {normalize_phrase(entry.name): entry.name}
        decode.update({normalize_phrase(c): c for c in co_names})
        prompts.append(
            DetectPrompt(
                text=COOCCUR_DELIMITER.join([entry.name] + co_names),
                kind="cooccurring",
                decode_map=decode,
            )
        )
    for syn in entry.synonyms:
        prompts.append(
            DetectPrompt(
                text=syn,
                kind="synonym",
                decode_map={normalize_phrase(syn): entry.name},
                via_synonym=syn,
            )
        )
        if co_names:
            decode = {normalize_phrase(syn): entry.name}
            decode.update({normalize_phrase(c): c for c in co_names})
            prompts.append(
                DetectPrompt(
                    text=COOCCUR_DELIMITER.join([syn] + co_names),
                    kind="cooccurring",
                    decode_map=decode,
                    via_synonym=syn,
                )
            )
    return prompts


def expected_prompt_count(class_name: str, catalog: ClassCatalog) -> int:
    entry = catalog.get(class_name)
    has_co = 1 if entry.co_occurring else 0
    return 1 + has_co + len(entry.synonyms) * (1 + has_co)


def annotate_image(
    image: ImageRecord,
    catalog: ClassCatalog,
    backend,
    thresholds: tuple[float, float] = (0.27, 0.25),
) -> list[RawAnnotation]:
    """Run every prompt for every pre-assigned class of the image.

    ``backend`` is a detect-role client exposing
    ``detect(image_ref, prompt, box_threshold, text_threshold)`` returning
    ``[{"box": [x1, y1, x2, y2], "score": s, "phrase": p}, ...]``. Both
    thresholds are forwarded on the wire, not applied here, so backends
    with internal thresholding behave identically. Boxes are clamped to
    the image bounds.
    """
    box_thresh, text_thresh = thresholds
    results: list[RawAnnotation] = []
    for class_name in image.class_names:
        for prompt in build_prompt_set(class_name, catalog):
            detections = backend.detect(
                image.path, prompt.text, box_thresh, text_thresh
            )
            for det in detections:
                x1, y1, x2, y2 = det["box"]
                box = Box(
                    min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)
                ).clamped(float(image.width), float(image.height))
                results.append(
                    RawAnnotation(
                        image_id=image.id,
                        box=box,
                        score=float(det["score"]),
                        phrase=str(det["phrase"]),
                        prompt_kind=prompt.effective_kind,
                        prompt=prompt,
                    )
                )
    return results


def annotate_many(
    images: Sequence[ImageRecord],
    catalog: ClassCatalog,
    backend,
    thresholds: tuple[float, float] = (0.27, 0.25),
    max_in_flight: int = 4,
) -> dict[str, list[RawAnnotation]]:
    """Annotate images concurrently; result is independent of completion order."""
    def work(img: ImageRecord) -> tuple[str, list[RawAnnotation]]:
        return img.id, annotate_image(img, catalog, backend, thresholds)

    out: dict[str, list[RawAnnotation]] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        for image_id, anns in pool.map(work, images):
            out[image_id] = anns
    return dict(sorted(out.items()))


def resolve_class(raw: RawAnnotation, catalog: ClassCatalog) -> str | None:
    """Map a detector-echoed phrase back to its canonical class name.

    Resolution order: the prompt's own decode map; exact class-name or
    unambiguous synonym lookup; longest substring match against the
    prompt's tokens. Unresolvable phrases return None (caller drops them).
    """
    key = normalize_phrase(raw.phrase)
    if raw.prompt is not None and key in raw.prompt.decode_map:
        return raw.prompt.decode_map[key]
    try:
        resolved = catalog.resolve_phrase(raw.phrase)
    except AmbiguousSynonymError:
        resolved = None
    if resolved is not None:
        return resolved
    tokens: Iterable[str]
    if raw.prompt is not None:
        tokens = raw.prompt.decode_map.keys()
        mapping = raw.prompt.decode_map
    else:
        mapping = {normalize_phrase(c): c for c in catalog.class_names()}
        tokens = mapping.keys()
    candidates = [t for t in tokens if t and (t in key or key in t)]
    if candidates:
        best = max(candidates, key=len)
        return mapping[best]
    return None


def filter_annotations(
    raw: Sequence[RawAnnotation], score_thresh: float = 0.5
) -> list[RawAnnotation]:
    """Score filtering with the single-annotation exception.

    An image whose combined multi-prompt pool holds exactly one annotation
    keeps it regardless of score; otherwise only scores >= ``score_thresh``
    survive.
    """
    if len(raw) == 1:
        return list(raw)
    return [r for r in raw if r.score >= score_thresh]


def filter_and_nms(
    raw: Sequence[RawAnnotation],
    catalog: ClassCatalog,
    score_thresh: float = 0.5,
    iou_thresh: float = 0.5,
) -> list[Annotation]:
    """Score filtering, canonicalization, and class-agnostic NMS for one image.

    A single raw annotation is kept regardless of its score; with several,
    only scores >= ``score_thresh`` survive. Phrases are mapped to
    canonical class names, then class-agnostic NMS removes overlaps. The
    result is independent of the arrival order of ``raw``: survivors are
    sorted by (score desc, box, prompt kind, class, phrase) before NMS.
    """
    if not raw:
        return []
    image_ids = {r.image_id for r in raw}
    if len(image_ids) != 1:
        raise AnnotateError(f"raw annotations span several images: {sorted(image_ids)}")

    filtered = filter_annotations(raw, score_thresh)

    resolved: list[tuple[RawAnnotation, str]] = []
    for r in filtered:
        class_name = resolve_class(r, catalog)
        if class_name is None:
            warnings.warn(
                f"dropping annotation with unresolvable phrase '{r.phrase}' "
                f"on image {r.image_id}",
                stacklevel=2,
            )
            continue
        resolved.append((r, class_name))

    resolved.sort(
        key=lambda rc: (
            -rc[0].score,
            rc[0].box.sort_key(),
            rc[0].prompt_kind,
            rc[1],
            rc[0].phrase,
        )
    )
    scored = [ScoredBox(r.box, r.score) for r, _ in resolved]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # degenerate boxes already clamped
        kept = nms_class_agnostic(scored, iou_thresh)
    return [
        Annotation(
            image_id=resolved[i][0].image_id,
            box=resolved[i][0].box,
            score=resolved[i][0].score,
            class_name=resolved[i][1],
            stage="final",
            phrase=resolved[i][0].phrase,
            prompt_kind=resolved[i][0].prompt_kind,
        )
        for i in kept
    ]


# ---------------------------------------------------------------------------
# Annotation store (JSON lines)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StoreRecord:
    image_id: str
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    phrase: str
    class_name: str | None
    stage: str
    prompt_kind: str

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "x1": self.x1,
            "y1": self.y1,
            "x2": self.x2,
            "y2": self.y2,
            "score": self.score,
            "phrase": self.phrase,
            "class": self.class_name,
            "stage": self.stage,
            "prompt_kind": self.prompt_kind,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "StoreRecord":
        return cls(
            image_id=raw["image_id"],
            x1=float(raw["x1"]),
            y1=float(raw["y1"]),
            x2=float(raw["x2"]),
            y2=float(raw["y2"]),
            score=float(raw["score"]),
            phrase=raw.get("phrase", ""),
            class_name=raw.get("class"),
            stage=raw["stage"],
            prompt_kind=raw.get("prompt_kind", "original"),
        )

    def sort_key(self) -> tuple:
        return (
            self.image_id,
            STAGES.index(self.stage),
            -self.score,
            self.x1,
            self.y1,
            self.x2,
            self.y2,
            self.phrase,
        )


def record_from_raw(raw: RawAnnotation) -> StoreRecord:
    return StoreRecord(
        image_id=raw.image_id,
        x1=raw.box.x1,
        y1=raw.box.y1,
        x2=raw.box.x2,
        y2=raw.box.y2,
        score=raw.score,
        phrase=raw.phrase,
        class_name=None,
        stage="raw",
        prompt_kind=raw.prompt_kind,
    )


def record_from_annotation(ann: Annotation) -> StoreRecord:
    return StoreRecord(
        image_id=ann.image_id,
        x1=ann.box.x1,
        y1=ann.box.y1,
        x2=ann.box.x2,
        y2=ann.box.y2,
        score=ann.score,
        phrase=ann.phrase,
        class_name=ann.class_name,
        stage=ann.stage,
        prompt_kind=ann.prompt_kind,
    )


def annotation_from_record(rec: StoreRecord) -> Annotation:
    if rec.class_name is None:
        raise AnnotateError(f"record on {rec.image_id} has no canonical class")
    return Annotation(
        image_id=rec.image_id,
        box=Box(rec.x1, rec.y1, rec.x2, rec.y2),
        score=rec.score,
        class_name=rec.class_name,
        stage=rec.stage,
        phrase=rec.phrase,
        prompt_kind=rec.prompt_kind,
    )


def save_annotations(records: Iterable[StoreRecord], path: str | Path) -> None:
    ordered = sorted(records, key=lambda r: r.sort_key())
    with open(path, "w") as fh:
        for rec in ordered:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_annotations(path: str | Path) -> list[StoreRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(StoreRecord.from_json(json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# Stage accounting
# ---------------------------------------------------------------------------

ACCOUNTING_ROWS = (
    ("original/co-occurring", "raw_base"),
    ("+ synonym/co-occurring", "raw_all"),
    ("+ filtering", "filtered"),
    ("+ nms", "final"),
)


def stage_accounting(records: Sequence[StoreRecord]) -> list[dict]:
    """Counts and mean confidence per pipeline stage.

    Rows: annotations from original-name prompts (original and plain
    co-occurring); all raw annotations once synonym-derived prompts are
    added; survivors of score filtering; survivors of NMS.
    """
    def bucket(rows: list[StoreRecord]) -> dict:
        count = len(rows)
        mean = sum(r.score for r in rows) / count if count else None
        return {"count": count, "mean_score": mean}

    raw = [r for r in records if r.stage == "raw"]
    base = [r for r in raw if r.prompt_kind in ("original", "cooccurring")]
    filtered = [r for r in records if r.stage == "filtered"]
    final = [r for r in records if r.stage in ("final", "approved", "rejected")]
    table = []
    for label, key in ACCOUNTING_ROWS:
        rows = {
            "raw_base": base,
            "raw_all": raw,
            "filtered": filtered,
            "final": final,
        }[key]
        entry = {"stage": label}
        entry.update(bucket(rows))
        table.append(entry)
    return table
