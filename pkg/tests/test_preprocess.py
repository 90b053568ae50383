import io
import statistics

import pytest
from PIL import Image

from detforge.preprocess import (
    DupCluster,
    ImageRecord,
    PreprocessError,
    StratificationError,
    dedup,
    hamming,
    load_split,
    phash,
    save_split,
    stratified_split,
)

from .conftest import structured_image


def record(image_id: str, cls: str = "a") -> ImageRecord:
    return ImageRecord(id=image_id, path=f"{image_id}.png",
                       class_names=(cls,), width=10, height=10)


class TestPhash:
    def test_deterministic(self):
        img = structured_image(1)
        assert phash(img) == phash(img)

    def test_identical_bytes_distance_zero(self, tmp_path):
        img = structured_image(2)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        img.save(p1)
        img.save(p2)
        assert hamming(phash(p1), phash(p2)) == 0

    def test_64_bits(self):
        for seed in range(5):
            value = phash(structured_image(seed))
            assert 0 <= value < 2 ** 64

    def test_jpeg_reencode_within_band(self, fixture_images):
        # observed max on this 20-image fixture set is 2; the contract
        # band is <= 10
        distances = []
        for path in fixture_images:
            img = Image.open(path)
            buf = io.BytesIO()
            img.save(buf, format="JPEG", quality=80)
            buf.seek(0)
            distances.append(hamming(phash(img), phash(Image.open(buf))))
        assert max(distances) <= 10
        assert max(distances) <= 2, "fixture drifted from recorded calibration"

    def test_mirror_typically_far(self, fixture_images):
        # observed min on the fixture set is 28, comfortably past the
        # near-duplicate band
        distances = []
        for path in fixture_images:
            img = Image.open(path)
            mirrored = img.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
            distances.append(hamming(phash(img), phash(mirrored)))
        assert statistics.median(distances) > 10
        assert min(distances) > 10

    def test_undecodable_errors(self, tmp_path):
        bogus = tmp_path / "not_an_image.png"
        bogus.write_bytes(b"definitely not a png")
        with pytest.raises(PreprocessError):
            phash(bogus)


class TestDedup:
    def test_three_identical_copies(self):
        images = [record("a"), record("b"), record("c")]
        hashes = {"a": 0xABCD, "b": 0xABCD, "c": 0xABCD}
        retained, clusters = dedup(images, hashes, 0, 10)
        assert [r.id for r in retained] == ["a"]
        exact = [c for c in clusters if c.kind == "exact"]
        assert len(exact) == 1
        assert sorted(exact[0].members) == ["a", "b", "c"]

    def test_near_pair_distance_six(self):
        # consecutive-shot lookalikes: both retained, recorded as near
        h1 = 0
        h2 = 0b111111  # hamming distance 6
        images = [record("a"), record("b")]
        retained, clusters = dedup(images, {"a": h1, "b": h2}, 0, 10)
        assert [r.id for r in retained] == ["a", "b"]
        near = [c for c in clusters if c.kind == "near"]
        assert len(near) == 1
        assert sorted(near[0].members) == ["a", "b"]

    def test_all_distinct(self):
        images = [record("a"), record("b"), record("c")]
        hashes = {"a": 0, "b": 0xFFFF0000FFFF0000, "c": 0xFFFFFFFFFFFFFFFF}
        retained, clusters = dedup(images, hashes, 0, 10)
        assert [r.id for r in retained] == ["a", "b", "c"]
        assert clusters == []

    def test_empty_input(self):
        retained, clusters = dedup([], {}, 0, 10)
        assert retained == []
        assert clusters == []

    def test_threshold_ordering_enforced(self):
        with pytest.raises(PreprocessError):
            dedup([], {}, 5, 2)

    def test_never_retains_exact_pair(self):
        # nothing retained may sit within exact_thresh of anything else kept
        images = [record(f"i{k}") for k in range(8)]
        hashes = {f"i{k}": (k // 2) * 0xFF for k in range(8)}
        retained, _ = dedup(images, hashes, 0, 2)
        for i, a in enumerate(retained):
            for b in retained[i + 1:]:
                assert hamming(hashes[a.id], hashes[b.id]) > 0


class TestStratifiedSplit:
    def test_exact_fractions_100_images(self):
        images = [record(f"im{i:03d}") for i in range(100)]
        manifest = stratified_split(images, [], (0.64, 0.16, 0.20), seed=7)
        assert len(manifest.ids("train")) == 64
        assert len(manifest.ids("val")) == 16
        assert len(manifest.ids("test")) == 20

    def test_five_image_class_gets_one_test(self):
        images = [record(f"im{i}") for i in range(5)]
        manifest = stratified_split(images, [], (0.64, 0.16, 0.20), seed=1)
        assert len(manifest.ids("test")) == 1

    def test_near_cluster_pinned_to_train(self):
        images = [record(f"im{i}") for i in range(10)]
        cluster = DupCluster("im0", ("im0", "im1", "im2", "im3"), "near")
        manifest = stratified_split(images, [cluster], (0.64, 0.16, 0.20), seed=3)
        for member in cluster.members:
            assert manifest.assignments[member] == "train"
        for image_id in manifest.ids("test"):
            assert image_id not in cluster.members

    def test_partition_and_determinism(self):
        images = [record(f"im{i}", cls="a" if i % 3 else "b") for i in range(30)]
        m1 = stratified_split(images, [], (0.64, 0.16, 0.20), seed=11)
        m2 = stratified_split(images, [], (0.64, 0.16, 0.20), seed=11)
        assert m1.assignments == m2.assignments
        assert set(m1.assignments) == {r.id for r in images}
        m3 = stratified_split(images, [], (0.64, 0.16, 0.20), seed=12)
        assert m3.assignments != m1.assignments  # seed actually matters

    def test_every_class_in_test(self):
        images = [record(f"im{i}", cls=f"c{i % 5}") for i in range(40)]
        manifest = stratified_split(images, [], (0.64, 0.16, 0.20), seed=5)
        by_id = {r.id: r for r in images}
        test_classes = {by_id[i].primary_class for i in manifest.ids("test")}
        assert test_classes == {f"c{k}" for k in range(5)}

    def test_starved_class_reported(self):
        # every image of the class is pinned into train by a near cluster
        images = [record(f"im{i}") for i in range(4)]
        cluster = DupCluster("im0", ("im0", "im1", "im2", "im3"), "near")
        with pytest.raises(StratificationError, match="'a'"):
            stratified_split(images, [cluster], (0.64, 0.16, 0.20), seed=2)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(PreprocessError):
            stratified_split([record("x")], [], (0.5, 0.2, 0.2), seed=0)

    def test_manifest_round_trip(self, tmp_path):
        images = [record(f"im{i}") for i in range(10)]
        manifest = stratified_split(images, [], (0.64, 0.16, 0.20), seed=9)
        path = tmp_path / "split.json"
        save_split(manifest, path)
        loaded = load_split(path)
        assert loaded.assignments == manifest.assignments
        assert loaded.seed == manifest.seed
