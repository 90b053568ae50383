"""Command-line surface: stage commands, the end-to-end pipeline, and
dataset exporters.

Every stage writes into a content-addressed directory under the output
root (digest of its parameters chained with its predecessor's digest), so
re-running skips work whose inputs are unchanged and changed inputs never
collide with stale artifacts. Timestamps live only in run.json.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import click

from . import annotate as annotate_mod
from . import diversify as diversify_mod
from . import evaluate as evaluate_mod
from . import export as export_mod
from . import preprocess as preprocess_mod
from . import review as review_mod
from .backends.client import make_client
from .backends.mock import TRUTH_SUFFIX, NoiseModel, generate_world
from .catalog import ClassCatalog, load_catalog
from .config import ConfigError, RunConfig, load_config
from .preprocess import ImageRecord

log = logging.getLogger("detforge")

STAGES = (
    "ingest", "dedup", "split", "annotate", "review",
    "diversify", "mix", "train", "eval",
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class StageError(click.ClickException):
    pass


class MissingPredecessorError(StageError):
    def __init__(self, missing_stage: str):
        super().__init__(
            f"stage '{missing_stage}' has not produced its artifacts yet; "
            f"run `detforge {missing_stage}` first"
        )
        self.missing_stage = missing_stage


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _digest(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()[:12]


class Run:
    """Paths, digests, and cached artifacts of one configured run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.catalog: ClassCatalog = load_catalog(config.catalog)
        self.out = Path(config.output_dir)
        self.digests = self._compute_digests()

    def _compute_digests(self) -> dict[str, str]:
        files = sorted(
            p for p in Path(self.config.images_dir).rglob("*")
            if p.is_file()
        )
        listing = [
            [str(p.relative_to(self.config.images_dir)), _sha256_file(p)]
            for p in files
        ]
        digests: dict[str, str] = {}
        prev = _digest({"stage": "ingest",
                        "params": self.config.digest_params("ingest"),
                        "inputs": listing})
        digests["ingest"] = prev
        for stage in STAGES[1:]:
            prev = _digest({"stage": stage,
                            "params": self.config.digest_params(stage),
                            "upstream": prev})
            digests[stage] = prev
        return digests

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage / self.digests[stage]

    def marker(self, stage: str) -> Path:
        return self.stage_dir(stage) / "_MANIFEST.json"

    def is_complete(self, stage: str) -> bool:
        return self.marker(stage).exists()

    def require(self, stage: str) -> None:
        """Every stage needs the whole chain before it; report the earliest
        missing one so the user knows what to run first."""
        for predecessor in STAGES[: STAGES.index(stage)]:
            if not self.is_complete(predecessor):
                raise MissingPredecessorError(predecessor)

    def finish(self, stage: str, outputs: list[str]) -> None:
        self.marker(stage).write_text(
            json.dumps(
                {"stage": stage, "digest": self.digests[stage], "outputs": sorted(outputs)},
                indent=2, sort_keys=True,
            ) + "\n"
        )

    def write_run_metadata(self, command: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        meta_path = self.out / "run.json"
        history = []
        if meta_path.exists():
            history = json.loads(meta_path.read_text()).get("history", [])
        history.append(
            {
                "command": command,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "seed": self.config.seed,
                "digests": self.digests,
            }
        )
        meta_path.write_text(json.dumps({"history": history}, indent=2) + "\n")

    # -- artifact accessors -------------------------------------------

    def load_images(self, stage: str, name: str) -> list[ImageRecord]:
        rows = _read_jsonl(self.stage_dir(stage) / name)
        return [
            ImageRecord(
                id=r["image_id"], path=r["path"],
                class_names=tuple(r["classes"]), origin=r["origin"],
                width=int(r["width"]), height=int(r["height"]),
            )
            for r in rows
        ]


class DirectoryLock:
    """One writer per output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            )
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def _write_jsonl(rows, path: Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _image_row(rec: ImageRecord) -> dict:
    return {
        "image_id": rec.id,
        "path": rec.path,
        "classes": list(rec.class_names),
        "origin": rec.origin,
        "width": rec.width,
        "height": rec.height,
    }


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def run_ingest(run: Run) -> None:
    """Scan the input directory into image records.

    Classes come from the image's sidecar truth file when present (the
    synthetic world always writes one), otherwise from the parent
    directory name.
    """
    from PIL import Image

    images_dir = Path(run.config.images_dir)
    records = []
    for path in sorted(images_dir.rglob("*")):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        image_id = path.stem
        truth_path = path.parent / f"{path.stem}{TRUTH_SUFFIX}"
        if truth_path.exists():
            truth = json.loads(truth_path.read_text())
            primary = truth["objects"][0]["class"]
            others = sorted({o["class"] for o in truth["objects"]} - {primary})
            classes = [primary] + others
            width, height = int(truth["width"]), int(truth["height"])
        else:
            parent = path.parent.name
            if path.parent == images_dir:
                raise StageError(
                    f"cannot determine classes for {path}: no sidecar truth "
                    "and the image is not inside a class-named directory"
                )
            classes = [parent]
            with Image.open(path) as img:
                width, height = img.size
        for cls in classes:
            if not run.catalog.has_class(cls):
                raise StageError(
                    f"image {image_id} references class '{cls}' missing "
                    "from the catalog"
                )
        records.append(
            ImageRecord(
                id=image_id, path=str(path), class_names=tuple(classes),
                origin="original", width=width, height=height,
            )
        )
    stage_dir = run.stage_dir("ingest")
    stage_dir.mkdir(parents=True, exist_ok=True)
    _write_jsonl([_image_row(r) for r in records], stage_dir / "images.jsonl")
    run.finish("ingest", ["images.jsonl"])
    log.info("ingest: %d images", len(records))


def run_dedup(run: Run) -> None:
    run.require("dedup")
    images = run.load_images("ingest", "images.jsonl")
    hashes = {rec.id: preprocess_mod.phash(rec.path) for rec in images}
    retained, clusters = preprocess_mod.dedup(
        images, hashes, run.config.dedup_exact, run.config.dedup_near
    )
    stage_dir = run.stage_dir("dedup")
    stage_dir.mkdir(parents=True, exist_ok=True)
    _write_jsonl([_image_row(r) for r in retained], stage_dir / "retained.jsonl")
    (stage_dir / "clusters.json").write_text(
        json.dumps(
            [
                {"representative": c.representative, "members": list(c.members),
                 "kind": c.kind}
                for c in clusters
            ],
            indent=2, sort_keys=True,
        ) + "\n"
    )
    (stage_dir / "hashes.json").write_text(
        json.dumps(
            {i: preprocess_mod.hash_to_hex(h) for i, h in sorted(hashes.items())},
            indent=2, sort_keys=True,
        ) + "\n"
    )
    run.finish("dedup", ["retained.jsonl", "clusters.json", "hashes.json"])
    log.info("dedup: %d retained, %d clusters", len(retained), len(clusters))


def run_split(run: Run) -> None:
    run.require("split")
    retained = run.load_images("dedup", "retained.jsonl")
    clusters_raw = json.loads((run.stage_dir("dedup") / "clusters.json").read_text())
    clusters = [
        preprocess_mod.DupCluster(c["representative"], tuple(c["members"]), c["kind"])
        for c in clusters_raw
    ]
    manifest = preprocess_mod.stratified_split(
        retained, clusters, run.config.split_fractions, run.config.seed
    )
    stage_dir = run.stage_dir("split")
    stage_dir.mkdir(parents=True, exist_ok=True)
    preprocess_mod.save_split(manifest, stage_dir / "split.json")
    run.finish("split", ["split.json"])
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    log.info("split: %s", counts)


def _annotate_pool(
    run: Run, images: list[ImageRecord], detect_client
) -> tuple[list[annotate_mod.StoreRecord], dict[str, list[annotate_mod.Annotation]], list[str]]:
    """Annotate a set of images, returning store rows (raw/filtered/final),
    final annotations per image, and ids that ended up with nothing."""
    config = run.config
    raw_by_image = annotate_mod.annotate_many(
        images, run.catalog, detect_client,
        (config.box_threshold, config.text_threshold),
        max_in_flight=config.max_in_flight,
    )
    records: list[annotate_mod.StoreRecord] = []
    finals: dict[str, list[annotate_mod.Annotation]] = {}
    unannotated: list[str] = []
    for image in images:
        raws = raw_by_image.get(image.id, [])
        records.extend(annotate_mod.record_from_raw(r) for r in raws)
        filtered = annotate_mod.filter_annotations(raws, config.filter_threshold)
        for r in filtered:
            rec = annotate_mod.record_from_raw(r)
            records.append(
                annotate_mod.StoreRecord(
                    **{**rec.__dict__, "stage": "filtered"}
                )
            )
        final = annotate_mod.filter_and_nms(
            raws, run.catalog, config.filter_threshold, config.nms_threshold
        )
        if final:
            finals[image.id] = final
            records.extend(annotate_mod.record_from_annotation(a) for a in final)
        else:
            unannotated.append(image.id)
    return records, finals, unannotated


def run_annotate(run: Run) -> None:
    run.require("annotate")
    retained = run.load_images("dedup", "retained.jsonl")
    detect_client = make_client(run.config.endpoints["detect"])
    records, finals, unannotated = _annotate_pool(run, retained, detect_client)
    stage_dir = run.stage_dir("annotate")
    stage_dir.mkdir(parents=True, exist_ok=True)
    annotate_mod.save_annotations(records, stage_dir / "annotations.jsonl")
    (stage_dir / "unannotated.json").write_text(
        json.dumps(sorted(unannotated), indent=2) + "\n"
    )
    table = annotate_mod.stage_accounting(records)
    (stage_dir / "accounting.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n"
    )
    run.finish("annotate", ["annotations.jsonl", "unannotated.json", "accounting.json"])
    if unannotated:
        log.warning("annotate: %d images without annotations (excluded)",
                    len(unannotated))
    log.info("annotate: %s", [(r["stage"], r["count"]) for r in table])


def _review_images(
    run: Run,
    images: list[ImageRecord],
    finals: dict[str, list[annotate_mod.Annotation]],
    review_client,
    overlay_dir: Path,
    reviewer_tag: str,
) -> tuple[list[review_mod.ReviewVerdict], dict[str, bool], list[str]]:
    """Apply the selective review policy to annotated images.

    Returns verdicts, per-image keep decisions, and the needs-attention
    bucket (verdicts that failed to parse; those images are excluded from
    training).
    """
    verdicts: list[review_mod.ReviewVerdict] = []
    decisions: dict[str, bool] = {}
    needs_attention: list[str] = []
    overlay_dir.mkdir(parents=True, exist_ok=True)
    by_id = {img.id: img for img in images}
    for image_id in sorted(finals):
        annotations = finals[image_id]
        image = by_id[image_id]
        if not review_mod.select_for_review(annotations):
            decisions[image_id] = True  # bypasses the reviewer entirely
            continue
        overlay, system_prompt, user_prompt = review_mod.build_review_request(
            image.path, annotations, run.catalog, image_id
        )
        overlay_path = overlay_dir / f"{image_id}.png"
        overlay.save(overlay_path)
        source = Path(image.path)
        truth_path = source.parent / f"{source.stem}{TRUTH_SUFFIX}"
        sidecar = overlay.sidecar(
            str(source), str(truth_path) if truth_path.exists() else None
        )
        Path(str(overlay_path) + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )
        try:
            text = review_client.review(
                str(overlay_path), system_prompt, user_prompt,
                {"image_id": image_id},
            )
        except Exception as exc:
            log.warning("review transport failure on %s: %s", image_id, exc)
            needs_attention.append(image_id)
            decisions[image_id] = False
            continue
        try:
            verdict = review_mod.parse_verdict(text, image_id, reviewer_tag)
        except review_mod.ReviewParseError as exc:
            log.warning("unparseable verdict on %s: %s", image_id, exc)
            needs_attention.append(image_id)
            decisions[image_id] = False
            continue
        verdicts.append(verdict)
        decisions[image_id] = review_mod.gate_pseudo_labels(verdict)
    return verdicts, decisions, needs_attention


def run_review(run: Run) -> None:
    run.require("review")
    retained = run.load_images("dedup", "retained.jsonl")
    records = annotate_mod.load_annotations(
        run.stage_dir("annotate") / "annotations.jsonl"
    )
    finals: dict[str, list[annotate_mod.Annotation]] = {}
    for rec in records:
        if rec.stage == "final":
            finals.setdefault(rec.image_id, []).append(
                annotate_mod.annotation_from_record(rec)
            )
    stage_dir = run.stage_dir("review")
    stage_dir.mkdir(parents=True, exist_ok=True)
    if run.config.review_enabled:
        if "review" not in run.config.endpoints:
            raise StageError("review is enabled but no review endpoint is configured")
        review_client = make_client(run.config.endpoints["review"])
        verdicts, decisions, needs_attention = _review_images(
            run, retained, finals, review_client, stage_dir / "overlays", "reviewer"
        )
    else:
        verdicts, needs_attention = [], []
        decisions = {image_id: True for image_id in finals}
    review_mod.save_verdicts(verdicts, stage_dir / "verdicts.jsonl")
    reviewed_records: list[annotate_mod.StoreRecord] = []
    for image_id, annotations in finals.items():
        stage = "approved" if decisions.get(image_id, False) else "rejected"
        for ann in annotations:
            reviewed_records.append(
                annotate_mod.record_from_annotation(ann.advanced(stage))
            )
    annotate_mod.save_annotations(reviewed_records, stage_dir / "annotations.jsonl")
    (stage_dir / "decisions.json").write_text(
        json.dumps(
            {
                "kept": sorted(i for i, keep in decisions.items() if keep),
                "dropped": sorted(i for i, keep in decisions.items() if not keep),
                "needs_attention": sorted(needs_attention),
            },
            indent=2, sort_keys=True,
        ) + "\n"
    )
    run.finish("review", ["verdicts.jsonl", "annotations.jsonl", "decisions.json"])
    kept = sum(1 for k in decisions.values() if k)
    log.info("review: kept %d / %d annotated images", kept, len(decisions))


def run_diversify(run: Run) -> None:
    run.require("diversify")
    stage_dir = run.stage_dir("diversify")
    stage_dir.mkdir(parents=True, exist_ok=True)
    if not run.config.diversify_enabled:
        _write_jsonl([], stage_dir / "pool.jsonl")
        annotate_mod.save_annotations([], stage_dir / "annotations.jsonl")
        review_mod.save_verdicts([], stage_dir / "photorealism.jsonl")
        (stage_dir / "jobs.json").write_text("[]\n")
        run.finish("diversify", ["pool.jsonl", "annotations.jsonl",
                                 "photorealism.jsonl", "jobs.json"])
        log.info("diversify: disabled")
        return
    # photorealism gating runs even when box review is toggled off, so the
    # review endpoint is a hard requirement here
    for role in ("generate", "train", "review"):
        if role not in run.config.endpoints:
            raise StageError(f"diversify needs a '{role}' endpoint")
    workspace = stage_dir / "backend_state"
    gen_client = make_client(run.config.endpoints["generate"], workspace=workspace)
    train_client = make_client(run.config.endpoints["train"], workspace=workspace)
    review_client = make_client(run.config.endpoints["review"])
    detect_client = make_client(run.config.endpoints["detect"])
    prompts = diversify_mod.load_prompt_catalog(run.config.prompt_catalog)

    jobs_log = []
    pool: list[ImageRecord] = []
    photorealism_verdicts: list[review_mod.PhotorealismVerdict] = []
    excluded = set(run.config.excluded_classes)
    for class_entry in run.catalog.classes:
        if not class_entry.diversify or class_entry.name in excluded:
            continue
        for idx, instance in enumerate(class_entry.instances):
            spec_pair = diversify_mod.make_job_specs(
                instance, class_entry, run.config.diversify_defaults
            )
            model_refs = []
            for spec in spec_pair:
                job_id = train_client.train(spec.to_json(), "diversify")
                status = train_client.poll(job_id)
                if status.get("status") != "succeeded":
                    log.warning("diversify training failed for %s: %s",
                                instance.instance_name, status)
                    continue
                model_refs.append(status["artifact_ref"])
                jobs_log.append({"job_id": job_id, "spec": spec.to_json(),
                                 "model_ref": status["artifact_ref"]})
            if not model_refs:
                continue
            requests = diversify_mod.expand_inference_prompts(
                class_entry,
                class_entry.terrain,
                prompts,
                instance_name=instance.instance_name,
                base_seed=run.config.seed * 10000 + idx,
                count=run.config.per_prompt_count,
            )
            if run.config.prompt_limit:
                requests = requests[: run.config.prompt_limit]
            approved, verdicts = diversify_mod.run_generation(
                spec_pair, requests, gen_client, review_client,
                model_refs=model_refs,
            )
            pool.extend(approved)
            photorealism_verdicts.extend(verdicts)

    records, finals, unannotated = _annotate_pool(run, pool, detect_client)
    if run.config.review_enabled:
        box_verdicts, decisions, needs_attention = _review_images(
            run, pool, finals, review_client, stage_dir / "overlays", "reviewer",
        )
    else:
        box_verdicts = []
        decisions = {image_id: True for image_id in finals}

    kept_pool = [
        rec for rec in pool
        if decisions.get(rec.id, False) and rec.id in finals
    ]
    final_records = list(records)
    for image_id, annotations in finals.items():
        stage = "approved" if decisions.get(image_id, False) else "rejected"
        final_records.extend(
            annotate_mod.record_from_annotation(a.advanced(stage))
            for a in annotations
        )
    _write_jsonl([_image_row(r) for r in kept_pool], stage_dir / "pool.jsonl")
    annotate_mod.save_annotations(final_records, stage_dir / "annotations.jsonl")
    review_mod.save_verdicts(
        photorealism_verdicts + box_verdicts, stage_dir / "photorealism.jsonl"
    )
    (stage_dir / "jobs.json").write_text(
        json.dumps(jobs_log, indent=2, sort_keys=True) + "\n"
    )
    run.finish("diversify", ["pool.jsonl", "annotations.jsonl",
                             "photorealism.jsonl", "jobs.json"])
    log.info("diversify: %d generated kept (of %d approved, %d unannotated)",
             len(kept_pool), len(pool), len(unannotated))


def run_mix(run: Run) -> None:
    run.require("mix")
    split = preprocess_mod.load_split(run.stage_dir("split") / "split.json")
    retained = {r.id: r for r in run.load_images("dedup", "retained.jsonl")}
    decisions = json.loads(
        (run.stage_dir("review") / "decisions.json").read_text()
    )
    kept = set(decisions["kept"])
    originals = [
        retained[i] for i in split.ids("train") if i in kept and i in retained
    ]
    pool = run.load_images("diversify", "pool.jsonl")
    plan = diversify_mod.MixPlan(
        ratio=tuple(run.config.mix_ratio),
        per_class_quota=dict(run.config.mix_quotas),
        excluded_classes=set(run.config.excluded_classes),
    )
    mixed = diversify_mod.mix_dataset(originals, pool, plan, run.config.seed)

    approved_records: list[annotate_mod.StoreRecord] = []
    for stage_name in ("review", "diversify"):
        for rec in annotate_mod.load_annotations(
            run.stage_dir(stage_name) / "annotations.jsonl"
        ):
            if rec.stage == "approved":
                approved_records.append(rec)
    mixed_ids = {r.id for r in mixed}
    manifest_records = [r for r in approved_records if r.image_id in mixed_ids]

    stage_dir = run.stage_dir("mix")
    stage_dir.mkdir(parents=True, exist_ok=True)
    _write_jsonl(
        [_image_row(r) for r in sorted(mixed, key=lambda r: r.id)],
        stage_dir / "train_manifest.jsonl",
    )
    annotate_mod.save_annotations(
        manifest_records, stage_dir / "train_annotations.jsonl"
    )
    run.finish("mix", ["train_manifest.jsonl", "train_annotations.jsonl"])
    by_origin = {"original": 0, "generated": 0}
    for rec in mixed:
        by_origin[rec.origin] += 1
    log.info("mix: %s", by_origin)


def run_train(run: Run) -> None:
    run.require("train")
    if "train" not in run.config.endpoints:
        raise StageError("no train endpoint configured")
    stage_dir = run.stage_dir("train")
    stage_dir.mkdir(parents=True, exist_ok=True)
    train_client = make_client(
        run.config.endpoints["train"], workspace=stage_dir / "backend_state"
    )
    job = {
        "manifest_ref": str(run.stage_dir("mix") / "train_manifest.jsonl"),
        "annotations_ref": str(run.stage_dir("mix") / "train_annotations.jsonl"),
        "classes": run.catalog.class_names(),
        "hyperparams": run.config.detector_hyperparams,
    }
    job_id = train_client.train(job, "detector")
    deadline = time.monotonic() + 600
    status = train_client.poll(job_id)
    while status["status"] in ("pending", "running"):
        if time.monotonic() > deadline:
            raise StageError(f"training job {job_id} timed out")
        time.sleep(0.5)
        status = train_client.poll(job_id)
    if status["status"] != "succeeded":
        raise StageError(f"training job {job_id} failed: {status.get('error')}")
    (stage_dir / "model.json").write_text(
        json.dumps(
            {"job_id": job_id, "artifact_ref": status["artifact_ref"], "job": job},
            indent=2, sort_keys=True,
        ) + "\n"
    )
    run.finish("train", ["model.json"])
    log.info("train: model %s", status["artifact_ref"])


def run_eval(run: Run) -> None:
    run.require("eval")
    model = json.loads((run.stage_dir("train") / "model.json").read_text())
    split = preprocess_mod.load_split(run.stage_dir("split") / "split.json")
    retained = {r.id: r for r in run.load_images("dedup", "retained.jsonl")}
    test_images = [retained[i] for i in split.ids("test") if i in retained]
    detect_client = make_client(run.config.endpoints["detect"])

    detections: list[evaluate_mod.Detection] = []
    det_rows = []
    for image in test_images:
        for det in detect_client.detect(
            image.path, "", run.config.box_threshold, run.config.text_threshold,
            model_ref=model["artifact_ref"],
        ):
            x1, y1, x2, y2 = det["box"]
            detections.append(
                evaluate_mod.Detection(
                    image.id, evaluate_mod.Box(x1, y1, x2, y2),
                    float(det["score"]), str(det["phrase"]),
                )
            )
            det_rows.append(
                {"image_id": image.id, "x1": x1, "y1": y1, "x2": x2, "y2": y2,
                 "score": det["score"], "class": det["phrase"]}
            )

    gts: list[evaluate_mod.GroundTruth] = []
    if run.config.eval_gt == "sidecar":
        for image in test_images:
            source = Path(image.path)
            truth_path = source.parent / f"{source.stem}{TRUTH_SUFFIX}"
            if not truth_path.exists():
                raise StageError(
                    f"eval_gt=sidecar but {image.id} has no truth sidecar"
                )
            truth = json.loads(truth_path.read_text())
            for obj in truth["objects"]:
                gts.append(
                    evaluate_mod.GroundTruth(
                        image.id, evaluate_mod.Box(*obj["box"]), obj["class"]
                    )
                )
    else:
        test_ids = {img.id for img in test_images}
        for rec in annotate_mod.load_annotations(
            run.stage_dir("review") / "annotations.jsonl"
        ):
            if rec.stage == "approved" and rec.image_id in test_ids:
                gts.append(
                    evaluate_mod.GroundTruth(
                        rec.image_id,
                        evaluate_mod.Box(rec.x1, rec.y1, rec.x2, rec.y2),
                        rec.class_name,
                    )
                )

    report = evaluate_mod.ap_summary(detections, gts)
    labels, matrix = evaluate_mod.confusion_matrix(
        detections, gts, run.config.confusion_iou, run.config.confusion_conf
    )
    stage_dir = run.stage_dir("eval")
    stage_dir.mkdir(parents=True, exist_ok=True)
    _write_jsonl(det_rows, stage_dir / "detections.jsonl")
    report.save(stage_dir / "ap_report.json")
    (stage_dir / "ap_report.txt").write_text(evaluate_mod.format_report(report))
    (stage_dir / "confusion.json").write_text(
        json.dumps({"labels": labels, "matrix": matrix}, indent=2) + "\n"
    )
    run.finish("eval", ["detections.jsonl", "ap_report.json",
                        "ap_report.txt", "confusion.json"])
    log.info("eval: AP50=%.4f AP50-95=%.4f over %d test images",
             report.ap50, report.ap50_95, len(test_images))


STAGE_RUNNERS = {
    "ingest": run_ingest,
    "dedup": run_dedup,
    "split": run_split,
    "annotate": run_annotate,
    "review": run_review,
    "diversify": run_diversify,
    "mix": run_mix,
    "train": run_train,
    "eval": run_eval,
}


def _execute(run: Run, stage: str, resume: bool, dry_run: bool) -> None:
    from .backends.client import TransportError
    from .backends.protocol import ProtocolError

    if dry_run:
        state = "cached" if run.is_complete(stage) else "would run"
        click.echo(f"{stage}: {state} -> {run.stage_dir(stage)}")
        return
    if resume and run.is_complete(stage):
        log.info("%s: cached at %s", stage, run.stage_dir(stage))
        return
    try:
        STAGE_RUNNERS[stage](run)
    except TransportError as exc:
        raise StageError(f"{stage}: backend unreachable: {exc}")
    except ProtocolError as exc:
        raise StageError(f"{stage}: backend error [{exc.code}]: {exc.message}")


# ---------------------------------------------------------------------------
# Click commands
# ---------------------------------------------------------------------------

@click.group()
@click.option("--verbose", is_flag=True, help="debug logging")
def main(verbose: bool) -> None:
    """Automated detection-dataset pipeline over pluggable model backends."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=True))(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the config seed")(fn)
    fn = click.option("--dry-run", is_flag=True)(fn)
    fn = click.option("--resume/--no-resume", default=True,
                      help="skip stages whose content-addressed outputs exist")(fn)
    return fn


def _load_run(config_path: str, seed: int | None) -> Run:
    try:
        config = load_config(config_path, seed_override=seed)
    except ConfigError as exc:
        raise StageError(str(exc))
    return Run(config)


STAGE_HELP = {
    "ingest": "Scan the input images into records with class assignments.",
    "dedup": "Perceptual-hash deduplication; records near-dup clusters.",
    "split": "Stratified, near-dup-aware train/val/test split.",
    "annotate": "Open-vocabulary pseudo-labeling: prompts, filtering, NMS.",
    "review": "Reviewer gating of pseudo-labels (keep/drop per image).",
    "diversify": "Train per-instance generators, generate, gate, annotate.",
    "mix": "Blend approved generated images into the training manifest.",
    "train": "Submit the detector training job to the train backend.",
    "eval": "Run the trained model on the test split and report AP.",
}


def _stage_command(stage: str):
    @_common_options
    def command(config_path: str, seed: int | None, dry_run: bool, resume: bool):
        run = _load_run(config_path, seed)
        with DirectoryLock(run.out):
            if not dry_run:
                run.write_run_metadata(stage)
            _execute(run, stage, resume, dry_run)

    command.__name__ = f"cmd_{stage}"
    command.__doc__ = STAGE_HELP[stage]
    return main.command(name=stage)(command)


for _stage in STAGES:
    _stage_command(_stage)


@main.command(name="pipeline")
@_common_options
def cmd_pipeline(config_path: str, seed: int | None, dry_run: bool, resume: bool):
    """Run every stage in order."""
    run = _load_run(config_path, seed)
    with DirectoryLock(run.out):
        if not dry_run:
            run.write_run_metadata("pipeline")
        for stage in STAGES:
            _execute(run, stage, resume, dry_run)


@main.command(name="export")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--format", "fmt", required=True,
              type=click.Choice(["yolo_txt", "coco_json", "jsonl"]))
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_export(config_path: str, seed: int | None, fmt: str, out_dir: str):
    """Export the mixed training manifest in a detector-ready format."""
    run = _load_run(config_path, seed)
    if not run.is_complete("mix"):
        raise MissingPredecessorError("mix")
    records = annotate_mod.load_annotations(
        run.stage_dir("mix") / "train_annotations.jsonl"
    )
    images = run.load_images("mix", "train_manifest.jsonl")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    class_names = run.catalog.class_names()
    if fmt == "yolo_txt":
        export_mod.export_yolo(records, images, class_names, out)
    elif fmt == "coco_json":
        export_mod.export_coco(records, images, class_names, out / "annotations.json")
    else:
        export_mod.export_jsonl(records, out / "annotations.jsonl")
    click.echo(f"exported {fmt} to {out}")


@main.command(name="make-world")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--catalog", "catalog_path", default=None, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0)
@click.option("--images", "n_images", type=int, default=40)
@click.option("--jitter", type=float, default=0.0)
@click.option("--decoy", type=float, default=0.0)
@click.option("--miss", type=float, default=0.0)
@click.option("--classes", "classes_csv", default=None,
              help="comma-separated subset of catalog classes")
@click.option("--multi-rate", type=float, default=0.25)
def cmd_make_world(out_dir, catalog_path, seed, n_images, jitter, decoy, miss,
                   classes_csv, multi_rate):
    """Materialize a seeded synthetic world (images + sidecar truth) for
    running the pipeline without any real model."""
    if catalog_path is None:
        from importlib import resources

        catalog_path = str(
            resources.files("detforge.data").joinpath("machinery_catalog.json")
        )
    catalog = load_catalog(catalog_path)
    classes = classes_csv.split(",") if classes_csv else None
    world = generate_world(
        out_dir, catalog, seed, n_images,
        noise=NoiseModel(jitter_sigma=jitter, decoy_rate=decoy, miss_rate=miss),
        classes=classes, multi_object_rate=multi_rate,
    )
    click.echo(f"synthetic world with {len(world.images)} images at {world.root}")


if __name__ == "__main__":
    main()
