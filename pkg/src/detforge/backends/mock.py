"""Deterministic synthetic-world backends.

The synthetic world is a seeded generator of images with known
ground-truth boxes plus a noise model; the mock backends answer every
role's requests as pure functions of (seed, request), which makes the
whole pipeline testable end to end without any model. Each image gets a
sidecar truth file so downstream quality is measurable.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, ImageDraw

from ..catalog import ClassCatalog, catalog_to_dict, load_catalog, normalize_phrase
from ..geometry import Box, iou
from .protocol import ProtocolError

TRUTH_SUFFIX = ".truth.json"

# Flat fill colors cycled per class when drawing synthetic objects.
_OBJECT_COLORS = (
    "#b03a2e", "#1f618d", "#117a65", "#9a7d0a", "#6c3483", "#a04000",
    "#148f77", "#4a235a", "#7b7d7d", "#784212",
)
_BACKGROUND = "#d5dbdb"


@dataclass
class NoiseModel:
    jitter_sigma: float = 0.0  # stddev as a fraction of box width/height
    decoy_rate: float = 0.0
    miss_rate: float = 0.0

    def to_json(self) -> dict:
        return {
            "jitter_sigma": self.jitter_sigma,
            "decoy_rate": self.decoy_rate,
            "miss_rate": self.miss_rate,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "NoiseModel":
        return cls(
            jitter_sigma=float(raw.get("jitter_sigma", 0.0)),
            decoy_rate=float(raw.get("decoy_rate", 0.0)),
            miss_rate=float(raw.get("miss_rate", 0.0)),
        )


@dataclass
class SyntheticWorld:
    root: Path
    seed: int
    noise: NoiseModel
    images: list[dict] = field(default_factory=list)

    @property
    def catalog_path(self) -> Path:
        return self.root / "catalog.json"

    def truth_for(self, image_id: str) -> dict:
        path = self.root / "images" / f"{image_id}{TRUTH_SUFFIX}"
        return json.loads(path.read_text())

    @classmethod
    def load(cls, root: str | Path) -> "SyntheticWorld":
        root = Path(root)
        spec = json.loads((root / "world.json").read_text())
        return cls(
            root=root,
            seed=int(spec["seed"]),
            noise=NoiseModel.from_json(spec.get("noise", {})),
            images=list(spec.get("images", [])),
        )


def _stable_rng(*parts) -> random.Random:
    key = ":".join(str(p) for p in parts)
    return random.Random(key)


def _draw_scene(path: Path, width: int, height: int, objects: list[dict],
                rng: random.Random) -> None:
    img = Image.new("RGB", (width, height), _BACKGROUND)
    draw = ImageDraw.Draw(img)
    for obj in objects:
        x1, y1, x2, y2 = obj["box"]
        color = _OBJECT_COLORS[
            sum(ord(c) for c in obj["class"]) % len(_OBJECT_COLORS)
        ]
        draw.rectangle((x1, y1, x2, y2), fill=color, outline="#17202a")
        # a small darker cab on top makes objects non-square and direction-ful
        cab_w = max(2, int((x2 - x1) * 0.3))
        cab_h = max(2, int((y2 - y1) * 0.3))
        draw.rectangle((x1, y1, x1 + cab_w, y1 + cab_h), fill="#17202a")
    img.save(path, format="PNG")


def _random_box(rng: random.Random, width: int, height: int) -> list[float]:
    bw = rng.uniform(0.22, 0.45) * width
    bh = rng.uniform(0.22, 0.45) * height
    x1 = rng.uniform(0, width - bw)
    y1 = rng.uniform(0, height - bh)
    return [round(x1, 2), round(y1, 2), round(x1 + bw, 2), round(y1 + bh, 2)]


def generate_world(
    root: str | Path,
    catalog: ClassCatalog,
    seed: int,
    n_images: int,
    image_size: tuple[int, int] = (128, 96),
    noise: NoiseModel | None = None,
    classes: list[str] | None = None,
    multi_object_rate: float = 0.25,
) -> SyntheticWorld:
    """Materialize a synthetic world directory.

    Layout: world.json (spec), catalog.json (copy), images/<id>.png and
    images/<id>.truth.json. Regeneration from the same arguments is
    bit-identical.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    noise = noise or NoiseModel()
    class_names = classes or [c.name for c in catalog.classes]
    width, height = image_size
    images = []
    for i in range(n_images):
        image_id = f"img{i:05d}"
        rng = _stable_rng("world", seed, image_id)
        primary = class_names[i % len(class_names)]
        objects = [{"box": _random_box(rng, width, height), "class": primary}]
        if rng.random() < multi_object_rate:
            entry = catalog.get(primary)
            extra_pool = [catalog.get(c).name for c in entry.co_occurring] or [primary]
            for _ in range(rng.randint(1, 2)):
                objects.append(
                    {
                        "box": _random_box(rng, width, height),
                        "class": rng.choice(extra_pool),
                    }
                )
        file_name = f"{image_id}.png"
        _draw_scene(root / "images" / file_name, width, height, objects, rng)
        truth = {
            "image_id": image_id,
            "width": width,
            "height": height,
            "objects": objects,
        }
        (root / "images" / f"{image_id}{TRUTH_SUFFIX}").write_text(
            json.dumps(truth, sort_keys=True) + "\n"
        )
        classes_present = [primary] + sorted(
            {o["class"] for o in objects} - {primary}
        )
        images.append(
            {
                "id": image_id,
                "file": f"images/{file_name}",
                "width": width,
                "height": height,
                "primary_class": primary,
                "classes": classes_present,
            }
        )
    spec = {"seed": seed, "noise": noise.to_json(), "images": images}
    (root / "world.json").write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    (root / "catalog.json").write_text(
        json.dumps(catalog_to_dict(catalog), indent=2, sort_keys=True) + "\n"
    )
    return SyntheticWorld(root=root, seed=seed, noise=noise, images=images)


def _load_truth_near(image_ref: str) -> dict | None:
    path = Path(image_ref)
    truth_path = path.parent / f"{path.stem}{TRUTH_SUFFIX}"
    if truth_path.exists():
        return json.loads(truth_path.read_text())
    return None


class MockDetectBackend:
    """Detect-role mock.

    Plain prompts: answers from the image's sidecar truth - every object
    whose class or registered synonym appears in the prompt is returned,
    jittered per the world's noise model, with score = max(0.05,
    0.95 * IoU against the unjittered truth) so scores decrease with
    jitter. Prompts mentioning none of the image's classes yield nothing.

    With a ``model_ref`` the call is routed to a trained mock detector
    artifact instead (see MockTrainBackend).
    """

    role = "detect"

    def __init__(self, world: SyntheticWorld | str | Path, catalog: ClassCatalog | None = None):
        self.world = world if isinstance(world, SyntheticWorld) else SyntheticWorld.load(world)
        self.catalog = catalog or load_catalog(self.world.catalog_path)

    def _phrase_for(self, class_name: str, tokens: list[str]) -> str | None:
        entry = self.catalog.get(class_name)
        accepted = {normalize_phrase(class_name): class_name}
        for syn in entry.synonyms:
            accepted[normalize_phrase(syn)] = syn
        for token in tokens:
            if token in accepted:
                return accepted[token]
        return None

    def detect(self, image_ref: str, prompt: str, box_threshold: float = 0.27,
               text_threshold: float = 0.25, model_ref: str | None = None) -> list[dict]:
        if model_ref:
            return predict_with_model(model_ref, image_ref)
        truth = _load_truth_near(image_ref)
        if truth is None:
            raise ProtocolError("validation", f"no sidecar truth for '{image_ref}'")
        tokens = [normalize_phrase(t) for t in prompt.split(".") if t.strip()]
        width = float(truth["width"])
        height = float(truth["height"])
        noise = self.world.noise
        rng = _stable_rng(self.world.seed, "detect", truth["image_id"], prompt)
        detections: list[dict] = []
        matched_any = False
        for obj in truth["objects"]:
            phrase = self._phrase_for(obj["class"], tokens)
            if phrase is None:
                continue
            matched_any = True
            if noise.miss_rate > 0 and rng.random() < noise.miss_rate:
                continue
            x1, y1, x2, y2 = obj["box"]
            bw, bh = x2 - x1, y2 - y1
            if noise.jitter_sigma > 0:
                jx = rng.gauss(0, noise.jitter_sigma)
                jy = rng.gauss(0, noise.jitter_sigma)
                jw = rng.gauss(0, noise.jitter_sigma)
                jh = rng.gauss(0, noise.jitter_sigma)
                x1, x2 = x1 + jx * bw, x2 + (jx + jw) * bw
                y1, y2 = y1 + jy * bh, y2 + (jy + jh) * bh
            box = Box(
                min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)
            ).clamped(width, height)
            truth_box = Box(*obj["box"])
            score = max(0.05, round(0.95 * iou(box, truth_box), 6))
            detections.append(
                {"box": list(box.as_xyxy()), "score": score, "phrase": phrase}
            )
        if matched_any and noise.decoy_rate > 0 and tokens:
            if rng.random() < noise.decoy_rate:
                decoy = Box(*_random_box(rng, int(width), int(height)))
                best = max(
                    (iou(decoy, Box(*o["box"])) for o in truth["objects"]),
                    default=0.0,
                )
                detections.append(
                    {
                        "box": list(decoy.as_xyxy()),
                        "score": max(0.05, round(0.95 * best, 6)),
                        "phrase": rng.choice(sorted(tokens)),
                    }
                )
        return detections


class MockGenerateBackend:
    """Generate-role mock: emits synthetic scene images plus sidecar truth
    naming boxes and classes, so downstream annotation quality stays
    measurable. Identical (model_ref, prompt, seed) requests produce
    identical pixel buffers. Prompts containing "multiple machines" get
    2-4 seeded objects, anything else one.
    """

    role = "generate"

    def __init__(self, workspace: str | Path, image_size: tuple[int, int] = (128, 96)):
        self.workspace = Path(workspace)
        (self.workspace / "generated").mkdir(parents=True, exist_ok=True)
        self.image_size = image_size

    @property
    def registry_path(self) -> Path:
        return self.workspace / "models.json"

    def _registry(self) -> dict:
        if self.registry_path.exists():
            return json.loads(self.registry_path.read_text())
        return {}

    def register_model(self, model_ref: str, class_name: str, instance_name: str) -> None:
        registry = self._registry()
        registry[model_ref] = {"class": class_name, "instance": instance_name}
        self.registry_path.write_text(json.dumps(registry, indent=2, sort_keys=True) + "\n")

    def generate(self, model_ref: str, prompt: str, seed: int, count: int = 1) -> list[dict]:
        registry = self._registry()
        if model_ref not in registry:
            raise ProtocolError("validation", f"unknown generation model '{model_ref}'")
        class_name = registry[model_ref]["class"]
        width, height = self.image_size
        results = []
        for i in range(count):
            item_seed = seed + i
            digest = hashlib.sha1(
                f"{model_ref}|{prompt}|{item_seed}".encode()
            ).hexdigest()[:12]
            image_id = f"gen-{digest}"
            rng = _stable_rng("generate", model_ref, prompt, item_seed)
            n_objects = rng.randint(2, 4) if "multiple machines" in prompt else 1
            objects = [
                {"box": _random_box(rng, width, height), "class": class_name}
                for _ in range(n_objects)
            ]
            file_path = self.workspace / "generated" / f"{image_id}.png"
            _draw_scene(file_path, width, height, objects, rng)
            truth = {
                "image_id": image_id,
                "width": width,
                "height": height,
                "objects": objects,
                "provenance": {
                    "model_ref": model_ref,
                    "instance": registry[model_ref]["instance"],
                    "prompt": prompt,
                    "seed": item_seed,
                },
            }
            (self.workspace / "generated" / f"{image_id}{TRUTH_SUFFIX}").write_text(
                json.dumps(truth, sort_keys=True) + "\n"
            )
            results.append(
                {
                    "image_id": image_id,
                    "path": str(file_path),
                    "width": width,
                    "height": height,
                    "class": class_name,
                    "seed": item_seed,
                }
            )
        return results


class MockReviewBackend:
    """Review-role mock grounded in sidecar truth.

    Box review reads the overlay's sidecar (written by the engine next to
    the overlay) and the source image's truth: Precision is yes iff every
    drawn box matches a distinct truth box at IoU >= 0.75, Recall is yes
    iff every truth box is covered at IoU >= 0.5, Fit is yes iff all
    matched IoUs are >= 0.85. Photorealism answers YES/YES unless the
    configured rule rejects the image (e.g. odd seeds, for tests).
    """

    role = "review"

    PRECISION_IOU = 0.75
    RECALL_IOU = 0.5
    FIT_IOU = 0.85

    def __init__(self, photorealism_rule: str = "always_yes"):
        if photorealism_rule not in ("always_yes", "reject_odd_seeds"):
            raise ValueError(f"unknown photorealism rule '{photorealism_rule}'")
        self.photorealism_rule = photorealism_rule

    def review(self, image_ref: str, system_prompt: str = "", user_prompt: str = "",
               metadata: dict | None = None) -> str:
        sidecar_path = Path(str(image_ref) + ".json")
        if not sidecar_path.exists():
            raise ProtocolError("validation", f"no overlay sidecar for '{image_ref}'")
        sidecar = json.loads(sidecar_path.read_text())
        truth_path = sidecar.get("truth_path")
        if truth_path:
            truth = json.loads(Path(truth_path).read_text())
        else:
            truth = _load_truth_near(sidecar["source_path"])
        if truth is None:
            raise ProtocolError("validation", "overlay sidecar points at no truth")
        drawn = [Box(*d["box"]) for d in sidecar.get("drawn", [])]
        truth_boxes = [Box(*o["box"]) for o in truth["objects"]]

        # greedy one-to-one matching, best IoU first
        pairs = sorted(
            (
                (iou(d, t), di, ti)
                for di, d in enumerate(drawn)
                for ti, t in enumerate(truth_boxes)
            ),
            key=lambda p: (-p[0], p[1], p[2]),
        )
        used_d: set[int] = set()
        used_t: set[int] = set()
        matched_ious: dict[int, float] = {}
        for overlap, di, ti in pairs:
            if overlap <= 0 or di in used_d or ti in used_t:
                continue
            used_d.add(di)
            used_t.add(ti)
            matched_ious[di] = overlap
        precision = bool(drawn) and all(
            matched_ious.get(di, 0.0) >= self.PRECISION_IOU for di in range(len(drawn))
        )
        recall = all(
            any(iou(t, d) >= self.RECALL_IOU for d in drawn) for t in truth_boxes
        )
        fit = bool(matched_ious) and all(
            v >= self.FIT_IOU for v in matched_ious.values()
        )
        answers = {
            "Precision": "Yes" if precision else "No",
            "Recall": "Yes" if recall else "No",
            "Fit": "Yes" if fit else "No",
        }
        body = json.dumps(answers, indent=2)
        return (
            "Checked each drawn box against the scene.\n"
            "```json\n" + body + "\n```"
        )

    def review_photorealism(self, image_ref: str, prompt: str = "",
                            metadata: dict | None = None) -> str:
        metadata = metadata or {}
        seed = metadata.get("seed")
        if seed is None:
            truth = _load_truth_near(str(image_ref))
            if truth:
                seed = truth.get("provenance", {}).get("seed")
        if self.photorealism_rule == "reject_odd_seeds" and seed is not None:
            if int(seed) % 2 == 1:
                return "YES\nNO"
        return "YES\nYES"


def _model_sigma(quality: float, count: int) -> float:
    # prediction noise shrinks with training-label quality and, weakly,
    # with per-class sample count - this is what makes gating and
    # diversification effects measurable downstream
    return 0.60 * (1.0 - quality) + 0.05 / (1.0 + count)


def predict_with_model(model_ref: str, image_ref: str) -> list[dict]:
    """Inference path of the mock detector trainer.

    Images seen at training time replay their memorized annotations
    verbatim; unseen images get truth boxes jittered with per-class noise
    derived from the training data's quantity and quality.
    """
    model_path = Path(model_ref)
    if not model_path.exists():
        raise ProtocolError("validation", f"unknown detector model '{model_ref}'")
    model = json.loads(model_path.read_text())
    truth = _load_truth_near(image_ref)
    if truth is None:
        raise ProtocolError("validation", f"no sidecar truth for '{image_ref}'")
    image_id = truth["image_id"]
    memorized = model.get("memorized", {})
    if image_id in memorized:
        return [
            {"box": list(a["box"]), "score": float(a["score"]), "phrase": a["class"]}
            for a in memorized[image_id]
        ]
    detections = []
    classes = model.get("classes", {})
    width = float(truth["width"])
    height = float(truth["height"])
    for idx, obj in enumerate(truth["objects"]):
        stats = classes.get(obj["class"])
        if stats is None:
            continue  # class never seen in training: the detector is blind to it
        sigma = _model_sigma(float(stats["quality"]), int(stats["count"]))
        rng = _stable_rng("predict", model["id"], image_id, idx)
        x1, y1, x2, y2 = obj["box"]
        bw, bh = x2 - x1, y2 - y1
        jx = rng.gauss(0, sigma)
        jy = rng.gauss(0, sigma)
        jw = rng.gauss(0, sigma)
        jh = rng.gauss(0, sigma)
        box = Box(
            min(x1 + jx * bw, x2 + (jx + jw) * bw),
            min(y1 + jy * bh, y2 + (jy + jh) * bh),
            max(x1 + jx * bw, x2 + (jx + jw) * bw),
            max(y1 + jy * bh, y2 + (jy + jh) * bh),
        ).clamped(width, height)
        score = max(0.05, round(0.95 * iou(box, Box(*obj["box"])), 6))
        detections.append(
            {"box": list(box.as_xyxy()), "score": score, "phrase": obj["class"]}
        )
    return detections


class MockTrainBackend:
    """Train-role mock with the asynchronous job contract.

    Diversify jobs register a generation model; detector jobs "train" by
    memorizing the manifest's annotations and computing per-class sample
    counts and mean IoU against sidecar truth. Jobs run synchronously but
    surface through the job-id/poll interface.
    """

    role = "train"

    def __init__(self, workspace: str | Path):
        self.workspace = Path(workspace)
        (self.workspace / "models").mkdir(parents=True, exist_ok=True)
        self.jobs: dict[str, dict] = {}

    def train(self, job: dict, job_type: str) -> str:
        digest = hashlib.sha1(
            json.dumps({"job": job, "type": job_type}, sort_keys=True).encode()
        ).hexdigest()[:12]
        job_id = f"job-{digest}"
        try:
            if job_type == "diversify":
                artifact = self._train_diversify(job)
            elif job_type == "detector":
                artifact = self._train_detector(job, job_id)
            else:
                raise ProtocolError("validation", f"unknown job type '{job_type}'")
            self.jobs[job_id] = {"status": "succeeded", "artifact_ref": artifact}
        except ProtocolError:
            raise
        except Exception as exc:
            self.jobs[job_id] = {"status": "failed", "error": str(exc)}
        return job_id

    def poll(self, job_id: str) -> dict:
        if job_id not in self.jobs:
            raise ProtocolError("unknown_job", f"no such job '{job_id}'")
        out = {"job_id": job_id}
        out.update(self.jobs[job_id])
        return out

    def _train_diversify(self, job: dict) -> str:
        for key in ("instance_name", "class_name", "max_steps"):
            if key not in job:
                raise ProtocolError("validation", f"diversify job missing '{key}'")
        model_ref = f"subject-model/{job['instance_name']}-k{job.get('steps_multiplier', 0)}"
        registry_path = self.workspace / "models.json"
        registry = {}
        if registry_path.exists():
            registry = json.loads(registry_path.read_text())
        registry[model_ref] = {
            "class": job["class_name"],
            "instance": job["instance_name"],
        }
        registry_path.write_text(json.dumps(registry, indent=2, sort_keys=True) + "\n")
        return model_ref

    def _train_detector(self, job: dict, job_id: str) -> str:
        for key in ("manifest_ref", "annotations_ref"):
            if key not in job:
                raise ProtocolError("validation", f"detector job missing '{key}'")
        manifest = [
            json.loads(line)
            for line in Path(job["manifest_ref"]).read_text().splitlines()
            if line.strip()
        ]
        records = [
            json.loads(line)
            for line in Path(job["annotations_ref"]).read_text().splitlines()
            if line.strip()
        ]
        path_by_image = {m["image_id"]: m["path"] for m in manifest}
        manifest_ids = set(path_by_image)
        memorized: dict[str, list[dict]] = {}
        per_class: dict[str, dict[str, float]] = {}
        quality_sums: dict[str, list[float]] = {}
        for rec in records:
            image_id = rec["image_id"]
            if image_id not in manifest_ids or rec.get("class") is None:
                continue
            box = [rec["x1"], rec["y1"], rec["x2"], rec["y2"]]
            memorized.setdefault(image_id, []).append(
                {"box": box, "score": rec["score"], "class": rec["class"]}
            )
            cls = rec["class"]
            truth = _load_truth_near(path_by_image[image_id])
            if truth is not None:
                best = max(
                    (
                        iou(Box(*box), Box(*o["box"]))
                        for o in truth["objects"]
                        if o["class"] == cls
                    ),
                    default=0.0,
                )
                quality_sums.setdefault(cls, []).append(best)
        for cls, values in quality_sums.items():
            per_class[cls] = {
                "count": len(values),
                "quality": sum(values) / len(values),
            }
        # content-addressed id: prediction noise must not depend on where
        # the manifest files happen to live
        model_digest = hashlib.sha1(
            json.dumps(
                {"classes": per_class, "memorized": dict(sorted(memorized.items()))},
                sort_keys=True,
            ).encode()
        ).hexdigest()[:12]
        model = {
            "type": "mock-detector",
            "id": f"det-{model_digest}",
            "classes": per_class,
            "memorized": dict(sorted(memorized.items())),
        }
        artifact = self.workspace / "models" / f"{job_id}.json"
        artifact.write_text(json.dumps(model, indent=2, sort_keys=True) + "\n")
        return str(artifact)
