"""Image deduplication via perceptual hashing and duplicate-aware splits."""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.fft import dct

HASH_BITS = 64


class PreprocessError(ValueError):
    pass


class StratificationError(PreprocessError):
    """A class cannot satisfy the requested split fractions."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    class_names: tuple[str, ...]
    origin: str = "original"  # original | generated
    width: int = 0
    height: int = 0

    def __post_init__(self) -> None:
        if not self.class_names:
            raise PreprocessError(f"image {self.id} has no class names")
        if self.origin not in ("original", "generated"):
            raise PreprocessError(f"image {self.id} has bad origin '{self.origin}'")
        if self.width <= 0 or self.height <= 0:
            raise PreprocessError(f"image {self.id} has non-positive dimensions")

    @property
    def primary_class(self) -> str:
        return self.class_names[0]


@dataclass(frozen=True)
class DupCluster:
    representative: str
    members: tuple[str, ...]
    kind: str  # exact | near


@dataclass
class SplitManifest:
    assignments: dict[str, str]  # image id -> train | val | test
    seed: int
    fractions: tuple[float, float, float]
    issues: list[str] = field(default_factory=list)

    def ids(self, split: str) -> list[str]:
        return sorted(i for i, s in self.assignments.items() if s == split)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "assignments": dict(sorted(self.assignments.items())),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SplitManifest":
        return cls(
            assignments=dict(raw["assignments"]),
            seed=int(raw["seed"]),
            fractions=tuple(raw["fractions"]),
        )


def save_split(manifest: SplitManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def load_split(path: str | Path) -> SplitManifest:
    return SplitManifest.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Perceptual hash
# ---------------------------------------------------------------------------

def phash(image: Image.Image | str | Path) -> int:
    """64-bit perceptual hash of an image.

    Pipeline: grayscale -> 32x32 resize -> 2D DCT -> top-left 8x8 block ->
    threshold each coefficient at the median of the block excluding the DC
    term -> 64 bits, row-major (bit 63 is the first coefficient).
    """
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as img:
                return phash(img)
        except OSError as exc:
            raise PreprocessError(f"cannot decode image {image}: {exc}") from exc
    gray = image.convert("L").resize((32, 32), Image.Resampling.LANCZOS)
    pixels = np.asarray(gray, dtype=np.float64)
    coeffs = dct(dct(pixels, axis=0, norm="ortho"), axis=1, norm="ortho")
    block = coeffs[:8, :8]
    median = np.median(block.flatten()[1:])  # exclude DC from the threshold
    bits = (block > median).flatten()
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def hash_to_hex(value: int) -> str:
    return f"{value:016x}"


# ---------------------------------------------------------------------------
# Deduplication
# ---------------------------------------------------------------------------

def dedup(
    images: Sequence[ImageRecord],
    hashes: dict[str, int],
    exact_thresh: int = 0,
    near_thresh: int = 10,
) -> tuple[list[ImageRecord], list[DupCluster]]:
    """Drop exact duplicates, record near-duplicate clusters.

    ``hashes`` maps image id -> 64-bit phash. Within each exact cluster
    (hash distance <= exact_thresh to the cluster representative) only the
    representative is retained. Near clusters (distance <= near_thresh) are
    fully retained but reported so the split can pin them to train -
    lookalikes such as consecutive shots of one scene must not straddle
    the train/test boundary.
    """
    if exact_thresh > near_thresh:
        raise PreprocessError("exact_thresh must be <= near_thresh")
    exact_reps: list[ImageRecord] = []
    exact_members: dict[str, list[str]] = {}
    for rec in images:
        h = hashes[rec.id]
        home = None
        for rep in exact_reps:
            if hamming(h, hashes[rep.id]) <= exact_thresh:
                home = rep
                break
        if home is None:
            exact_reps.append(rec)
            exact_members[rec.id] = [rec.id]
        else:
            exact_members[home.id].append(rec.id)

    clusters = [
        DupCluster(rep_id, tuple(members), "exact")
        for rep_id, members in exact_members.items()
        if len(members) > 1
    ]

    near_reps: list[ImageRecord] = []
    near_members: dict[str, list[str]] = {}
    for rec in exact_reps:
        h = hashes[rec.id]
        home = None
        for rep in near_reps:
            if hamming(h, hashes[rep.id]) <= near_thresh:
                home = rep
                break
        if home is None:
            near_reps.append(rec)
            near_members[rec.id] = [rec.id]
        else:
            near_members[home.id].append(rec.id)

    clusters.extend(
        DupCluster(rep_id, tuple(members), "near")
        for rep_id, members in near_members.items()
        if len(members) > 1
    )
    return list(exact_reps), clusters


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

def _rng_for(seed: int, key: str) -> random.Random:
    # str seeds hash via sha512 inside random.Random, stable across runs
    return random.Random(f"{seed}:{key}")


def stratified_split(
    images: Sequence[ImageRecord],
    clusters: Iterable[DupCluster],
    fractions: tuple[float, float, float] = (0.64, 0.16, 0.20),
    seed: int = 0,
) -> SplitManifest:
    """Per-class stratified train/val/test split, near-dup aware.

    Members of near clusters are pinned to train before sampling. Per-class
    test/val counts are round(fraction * class size) computed on the full
    class, then drawn from the unpinned remainder; every class must end up
    with at least one test image or the class is reported as an issue and
    the whole split fails.

    Deterministic: one RNG per (seed, class) over sorted image ids.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise PreprocessError(f"fractions must sum to 1, got {fractions}")
    pinned = set()
    for cluster in clusters:
        if cluster.kind == "near":
            pinned.update(cluster.members)

    by_class: dict[str, list[ImageRecord]] = {}
    for rec in images:
        by_class.setdefault(rec.primary_class, []).append(rec)

    assignments: dict[str, str] = {}
    issues: list[str] = []
    f_train, f_val, f_test = fractions
    for class_name in sorted(by_class):
        records = sorted(by_class[class_name], key=lambda r: r.id)
        n = len(records)
        free = [r.id for r in records if r.id not in pinned]
        n_test = int(round(f_test * n))
        n_val = int(round(f_val * n))
        if f_test > 0:
            n_test = max(1, n_test)
        if n_test + n_val > len(free):
            n_val = max(0, len(free) - n_test)
        if f_test > 0 and (not free or n_test > len(free)):
            issues.append(
                f"class '{class_name}' has too few unpinned images "
                f"({len(free)} of {n}) for a test stratum"
            )
            continue
        rng = _rng_for(seed, class_name)
        shuffled = list(free)
        rng.shuffle(shuffled)
        test_ids = set(shuffled[:n_test])
        val_ids = set(shuffled[n_test : n_test + n_val])
        for rec in records:
            if rec.id in test_ids:
                assignments[rec.id] = "test"
            elif rec.id in val_ids:
                assignments[rec.id] = "val"
            else:
                assignments[rec.id] = "train"
    if issues:
        raise StratificationError("; ".join(issues))
    return SplitManifest(assignments=assignments, seed=seed, fractions=fractions)
