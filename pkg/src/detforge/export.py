"""Dataset exporters: YOLO text labels, COCO JSON, and lossless JSONL."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .annotate import StoreRecord, load_annotations, save_annotations
from .preprocess import ImageRecord


class ExportError(ValueError):
    pass


def _fmt(value: float) -> str:
    """Fixed 6-decimal formatting, trailing zeros trimmed but never past
    the decimal point (1.0 stays '1.0', 0.5 stays '0.5')."""
    text = f"{value:.6f}".rstrip("0")
    if text.endswith("."):
        text += "0"
    return text


def export_yolo(
    records: Sequence[StoreRecord],
    images: Sequence[ImageRecord],
    class_names: Sequence[str],
    out_dir: str | Path,
) -> list[Path]:
    """One label file per image: ``class_index cx cy w h`` normalized to
    [0, 1], plus classes.txt with the index order."""
    out_dir = Path(out_dir)
    labels_dir = out_dir / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    index = {name: i for i, name in enumerate(class_names)}
    by_image: dict[str, list[StoreRecord]] = {}
    for rec in records:
        by_image.setdefault(rec.image_id, []).append(rec)
    written = []
    for image in sorted(images, key=lambda r: r.id):
        lines = []
        for rec in sorted(by_image.get(image.id, []), key=lambda r: r.sort_key()):
            if rec.class_name is None:
                continue
            if rec.class_name not in index:
                raise ExportError(
                    f"annotation on {image.id} references unknown class "
                    f"'{rec.class_name}'"
                )
            cx = (rec.x1 + rec.x2) / 2.0 / image.width
            cy = (rec.y1 + rec.y2) / 2.0 / image.height
            w = (rec.x2 - rec.x1) / image.width
            h = (rec.y2 - rec.y1) / image.height
            lines.append(
                f"{index[rec.class_name]} {_fmt(cx)} {_fmt(cy)} {_fmt(w)} {_fmt(h)}"
            )
        path = labels_dir / f"{image.id}.txt"
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
        written.append(path)
    classes_path = out_dir / "classes.txt"
    classes_path.write_text("\n".join(class_names) + "\n")
    written.append(classes_path)
    return written


def export_coco(
    records: Sequence[StoreRecord],
    images: Sequence[ImageRecord],
    class_names: Sequence[str],
    path: str | Path,
) -> dict:
    """Standard COCO detection JSON (xywh boxes, 1-based category ids)."""
    index = {name: i + 1 for i, name in enumerate(class_names)}
    image_ids = {img.id: n + 1 for n, img in enumerate(sorted(images, key=lambda r: r.id))}
    doc = {
        "images": [
            {
                "id": image_ids[img.id],
                "file_name": Path(img.path).name,
                "width": img.width,
                "height": img.height,
            }
            for img in sorted(images, key=lambda r: r.id)
        ],
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(class_names)
        ],
        "annotations": [],
    }
    ann_id = 1
    for rec in sorted(records, key=lambda r: r.sort_key()):
        if rec.image_id not in image_ids:
            continue
        if rec.class_name is None:
            continue
        if rec.class_name not in index:
            raise ExportError(
                f"annotation on {rec.image_id} references unknown class "
                f"'{rec.class_name}'"
            )
        w = rec.x2 - rec.x1
        h = rec.y2 - rec.y1
        doc["annotations"].append(
            {
                "id": ann_id,
                "image_id": image_ids[rec.image_id],
                "category_id": index[rec.class_name],
                "bbox": [rec.x1, rec.y1, w, h],
                "area": w * h,
                "iscrowd": 0,
                "score": rec.score,
            }
        )
        ann_id += 1
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def export_jsonl(records: Sequence[StoreRecord], path: str | Path) -> None:
    save_annotations(records, path)


def import_jsonl(path: str | Path) -> list[StoreRecord]:
    return load_annotations(path)
