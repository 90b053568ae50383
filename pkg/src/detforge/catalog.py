"""Class registry: canonical names, synonyms, co-occurrence groups, instances.

The catalog is a single declarative JSON document and the one source of
truth every pipeline stage consumes. It is immutable after load and safe
to share across concurrent workers.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping


class CatalogError(ValueError):
    """Raised when a catalog file fails schema or invariant validation."""


class AmbiguousSynonymError(CatalogError):
    """A phrase is claimed as a synonym by more than one class."""


class PromptError(ValueError):
    """Raised when a prompt template cannot be rendered."""


def normalize_phrase(phrase: str) -> str:
    """Lookup key: casefolded, whitespace collapsed to single spaces."""
    return " ".join(phrase.split()).casefold()


@dataclass(frozen=True)
class InstanceEntry:
    instance_name: str
    image_refs: tuple[str, ...]

    MIN_IMAGES = 3

    def __post_init__(self) -> None:
        if not self.instance_name:
            raise CatalogError("instance with empty name")
        if len(self.image_refs) < self.MIN_IMAGES:
            raise CatalogError(
                f"instance '{self.instance_name}' has {len(self.image_refs)} "
                f"image refs, minimum is {self.MIN_IMAGES}"
            )


@dataclass(frozen=True)
class ClassEntry:
    name: str
    synonyms: tuple[str, ...] = ()
    co_occurring: tuple[str, ...] = ()
    diversify: bool = True
    terrain: str = "general"
    instances: tuple[InstanceEntry, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise CatalogError("class with empty name")
        norm = normalize_phrase(self.name)
        seen: set[str] = set()
        for syn in self.synonyms:
            key = normalize_phrase(syn)
            if not key:
                raise CatalogError(f"class '{self.name}' has an empty synonym")
            if key == norm:
                raise CatalogError(f"class '{self.name}' lists itself as a synonym")
            if key in seen:
                raise CatalogError(f"class '{self.name}' repeats synonym '{syn}'")
            seen.add(key)
        if self.terrain not in ("general", "land", "water"):
            raise CatalogError(
                f"class '{self.name}' has unknown terrain tag '{self.terrain}'"
            )


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassEntry, ...]
    version: str = "1"
    # phrase -> tuple of claiming class names, computed at load
    _synonym_index: Mapping[str, tuple[str, ...]] = field(default_factory=dict, repr=False)
    _class_index: Mapping[str, str] = field(default_factory=dict, repr=False)

    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def get(self, class_name: str) -> ClassEntry:
        key = normalize_phrase(class_name)
        if key not in self._class_index:
            raise CatalogError(f"unknown class '{class_name}'")
        canonical = self._class_index[key]
        for entry in self.classes:
            if entry.name == canonical:
                return entry
        raise CatalogError(f"unknown class '{class_name}'")  # pragma: no cover

    def has_class(self, class_name: str) -> bool:
        return normalize_phrase(class_name) in self._class_index

    def synonym_claimants(self, phrase: str) -> tuple[str, ...]:
        """All classes claiming ``phrase`` as a synonym (possibly several,
        since superclasses like shared umbrella terms live in the synonym
        lists)."""
        return self._synonym_index.get(normalize_phrase(phrase), ())

    def resolve_phrase(self, phrase: str) -> str | None:
        """Context-free canonicalization of a detector-echoed phrase.

        Class names win over synonyms. A synonym claimed by exactly one
        class resolves to that class; a synonym claimed by several raises,
        naming every claimant, because resolving it requires prompt
        context. Unknown phrases return None.
        """
        key = normalize_phrase(phrase)
        if key in self._class_index:
            return self._class_index[key]
        claimants = self._synonym_index.get(key, ())
        if len(claimants) == 1:
            return claimants[0]
        if len(claimants) > 1:
            raise AmbiguousSynonymError(
                f"synonym '{phrase}' is claimed by classes: " + ", ".join(claimants)
            )
        return None


def _build_catalog(classes: list[ClassEntry], version: str) -> ClassCatalog:
    if not classes:
        raise CatalogError("empty catalog")
    class_index: dict[str, str] = {}
    for entry in classes:
        key = normalize_phrase(entry.name)
        if key in class_index:
            raise CatalogError(f"duplicate class name '{entry.name}'")
        class_index[key] = entry.name
    synonym_index: dict[str, list[str]] = {}
    for entry in classes:
        for syn in entry.synonyms:
            synonym_index.setdefault(normalize_phrase(syn), []).append(entry.name)
    for entry in classes:
        for co in entry.co_occurring:
            if normalize_phrase(co) not in class_index:
                raise CatalogError(
                    f"class '{entry.name}' lists unknown co-occurring class '{co}'"
                )
            if normalize_phrase(co) == normalize_phrase(entry.name):
                raise CatalogError(
                    f"class '{entry.name}' lists itself as co-occurring"
                )
    return ClassCatalog(
        classes=tuple(classes),
        version=version,
        _synonym_index={k: tuple(v) for k, v in synonym_index.items()},
        _class_index=class_index,
    )


def load_catalog(path: str | Path) -> ClassCatalog:
    """Load and validate a catalog JSON document.

    Schema::

        {"version": str,
         "classes": [{"name": str, "synonyms": [str], "co_occurring": [str],
                      "diversify": bool, "terrain": "general|land|water",
                      "instances": [{"name": str, "images": [str]}]}]}

    The ``terrain`` key is optional and defaults to "general".
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot parse catalog {path}: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("classes"), list):
        raise CatalogError(f"catalog {path} missing 'classes' list")
    classes = []
    for item in raw["classes"]:
        try:
            instances = tuple(
                InstanceEntry(inst["name"], tuple(inst["images"]))
                for inst in item.get("instances", [])
            )
            classes.append(
                ClassEntry(
                    name=item["name"],
                    synonyms=tuple(item.get("synonyms", [])),
                    co_occurring=tuple(item.get("co_occurring", [])),
                    diversify=bool(item.get("diversify", True)),
                    terrain=item.get("terrain", "general"),
                    instances=instances,
                )
            )
        except KeyError as exc:
            raise CatalogError(f"catalog entry missing key {exc}: {item!r}") from exc
    return _build_catalog(classes, str(raw.get("version", "1")))


def catalog_to_dict(catalog: ClassCatalog) -> dict:
    return {
        "version": catalog.version,
        "classes": [
            {
                "name": c.name,
                "synonyms": list(c.synonyms),
                "co_occurring": list(c.co_occurring),
                "diversify": c.diversify,
                "terrain": c.terrain,
                "instances": [
                    {"name": i.instance_name, "images": list(i.image_refs)}
                    for i in c.instances
                ],
            }
            for c in catalog.classes
        ],
    }


def save_catalog(catalog: ClassCatalog, path: str | Path) -> None:
    """Canonical serialization: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(catalog_to_dict(catalog), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

PROMPT_ROLES = (
    "class_prior",
    "instance_train",
    "detect_original",
    "detect_synonym",
    "detect_cooccurring",
    "review_system",
    "review_user",
    "photorealism",
)


@dataclass(frozen=True)
class PromptTemplate:
    role: str
    template: str

    def __post_init__(self) -> None:
        if self.role not in PROMPT_ROLES:
            raise PromptError(f"unknown prompt role '{self.role}'")

    def placeholders(self) -> set[str]:
        return {
            name
            for _, name, _, _ in string.Formatter().parse(self.template)
            if name
        }


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Deterministic substitution of named placeholders.

    Every placeholder in the template must be bound; extra bindings are
    ignored. The rendered text is never empty.
    """
    missing = template.placeholders() - set(bindings)
    if missing:
        raise PromptError(
            f"unbound placeholders in {template.role} prompt: {sorted(missing)}"
        )
    text = template.template.format(**bindings)
    if not text.strip():
        raise PromptError(f"{template.role} prompt rendered empty")
    return text


_REVIEW_SYSTEM = (
    "You are an AI bounding box annotation evaluator. Your task is to evaluate "
    "the correctness of bounding box annotations for given images and target "
    "objects. The bounding boxes are directly drawn as colored rectangles on "
    "top of the image. The class label is shown at the top-left corner of the "
    "corresponding bounding box. You will evaluate each bounding box annotation "
    "based on three criteria: precision, recall, and fit."
)

# The user prompt is the concatenation of five sections, in this order.
REVIEW_USER_SECTIONS = (
    (
        "In this image, the target object for bounding box annotation is "
        "{target}. There may also be {secondary_target}. Each of the existing "
        "{target}s and {secondary_target}s should be annotated by a bounding "
        "box drawn as a colored rectangle. The goal is to accurately localize "
        "all {target}s and {secondary_target}s using these bounding boxes. "
        "Your task is to evaluate whether all bounding boxes are correct."
    ),
    (
        "Correctness should be assessed in terms of precision, recall, and "
        "fit. Specifically, consider the following questions before making "
        "your judgment:\n"
        "1. Does each bounding box perfectly enclose one single target object?\n"
        "2. Are all target objects localized by a bounding box?\n"
        "3. Is each bounding box neither too loose nor too tight?"
    ),
    (
        "Please provide your evaluation in the following JSON format:\n"
        "```json\n"
        "{{\n"
        '"Precision": "Yes/No answer to question 1",\n'
        '"Recall": "Yes/No answer to question 2",\n'
        '"Fit": "Yes/No answer to question 3"\n'
        "}}\n"
        "```\n"
        "Please think step-by-step and be sure to provide the correct answers. "
        "Very briefly explain yourself before answering the question."
    ),
    (
        "Before finalizing your evaluation, please consider the following "
        "suggestions:\n"
        "1. For question 1 (Precision), if an object is occluded, the bounding "
        "box should be inferred based on a reasonable estimation of the "
        "object's size.\n"
        "2. For question 2 (Recall), it's fairly normal to have only one "
        "object in the dataset.\n"
        "3. For question 3 (Fit), don't be too harsh when bounding box edges "
        "just slightly cut off the object or just enclose a little bit of the "
        "outside area."
    ),
    (
        "Always consider my suggestions before answering questions. But the "
        "suggestions are not strict rules. You can also use your own judgment. "
        "The most important thing is to answer the three questions correctly."
    ),
)

_PHOTOREALISM = (
    "Is this image suitable as training data object detection for {target}? "
    "Answer YES or NO.\n"
    "Does the main object in the image look like an authentic {target}? "
    "Answer YES or NO."
)

DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    "class_prior": PromptTemplate("class_prior", "a photo of a {class_name}"),
    "instance_train": PromptTemplate(
        "instance_train", "a photo of a <{instance_name}> {class_name}"
    ),
    "detect_original": PromptTemplate("detect_original", "{class_name}"),
    "detect_synonym": PromptTemplate("detect_synonym", "{synonym}"),
    "detect_cooccurring": PromptTemplate("detect_cooccurring", "{phrases}"),
    "review_system": PromptTemplate("review_system", _REVIEW_SYSTEM),
    "review_user": PromptTemplate("review_user", "\n\n".join(REVIEW_USER_SECTIONS)),
    "photorealism": PromptTemplate("photorealism", _PHOTOREALISM),
}
