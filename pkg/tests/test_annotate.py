import random

import pytest

from detforge.annotate import (
    AnnotateError,
    Annotation,
    DetectPrompt,
    RawAnnotation,
    StoreRecord,
    annotate_image,
    annotate_many,
    build_prompt_set,
    expected_prompt_count,
    filter_and_nms,
    filter_annotations,
    load_annotations,
    record_from_annotation,
    record_from_raw,
    save_annotations,
    stage_accounting,
)
from detforge.catalog import CatalogError
from detforge.geometry import Box, iou
from detforge.preprocess import ImageRecord

from .oracles import oracle_filter, oracle_nms


class EchoBackend:
    """Returns one fixed box per prompt, echoing the first prompt phrase."""

    role = "detect"

    def __init__(self, box=(10, 10, 50, 50), score=0.8):
        self.box = box
        self.score = score
        self.calls = []

    def detect(self, image_ref, prompt, box_threshold, text_threshold):
        self.calls.append((image_ref, prompt, box_threshold, text_threshold))
        phrase = prompt.split(" . ")[0]
        return [{"box": list(self.box), "score": self.score, "phrase": phrase}]


class TestBuildPromptSet:
    def test_no_synonyms_no_cooccurring(self, machinery_catalog):
        prompts = build_prompt_set("articulated dump truck", machinery_catalog)
        assert len(prompts) == 1
        assert prompts[0].text == "articulated dump truck"
        assert prompts[0].kind == "original"

    def test_synonyms_only(self, machinery_catalog):
        prompts = build_prompt_set("bulldozer", machinery_catalog)
        assert [p.text for p in prompts] == ["bulldozer", "dozer", "crawler tractor"]
        assert [p.kind for p in prompts] == ["original", "synonym", "synonym"]
        assert prompts[1].decode_map == {"dozer": "bulldozer"}

    def test_cooccurring_only(self, machinery_catalog):
        prompts = build_prompt_set("mining truck", machinery_catalog)
        assert [p.text for p in prompts] == [
            "mining truck",
            "mining truck . mining excavator . mining bulldozer",
        ]
        assert prompts[1].kind == "cooccurring"
        assert prompts[1].decode_map["mining excavator"] == "mining excavator"

    def test_synonyms_and_cooccurring_substitution(self, tmp_path):
        import json

        from detforge.catalog import load_catalog

        doc = {
            "version": "1",
            "classes": [
                {"name": "mining truck", "synonyms": ["haul truck"],
                 "co_occurring": ["mining excavator"]},
                {"name": "mining excavator", "synonyms": [], "co_occurring": []},
            ],
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        catalog = load_catalog(path)
        prompts = build_prompt_set("mining truck", catalog)
        assert [p.text for p in prompts] == [
            "mining truck",
            "mining truck . mining excavator",
            "haul truck",
            "haul truck . mining excavator",
        ]
        assert prompts[3].via_synonym == "haul truck"
        assert prompts[3].effective_kind == "cooccurring_synonym"
        assert prompts[3].decode_map["haul truck"] == "mining truck"

    def test_count_formula_holds_for_all_classes(self, machinery_catalog):
        for entry in machinery_catalog.classes:
            prompts = build_prompt_set(entry.name, machinery_catalog)
            assert len(prompts) == expected_prompt_count(entry.name, machinery_catalog)

    def test_unknown_class(self, machinery_catalog):
        with pytest.raises(CatalogError):
            build_prompt_set("submarine", machinery_catalog)


class TestAnnotateImage:
    def image(self, classes=("bulldozer",)):
        return ImageRecord(id="im0", path="im0.png", class_names=tuple(classes),
                           width=100, height=100)

    def test_echo_mock_three_prompts_three_annotations(self, machinery_catalog):
        backend = EchoBackend()
        raws = annotate_image(self.image(), machinery_catalog, backend)
        assert len(raws) == 3
        assert [r.phrase for r in raws] == ["bulldozer", "dozer", "crawler tractor"]
        assert [r.prompt_kind for r in raws] == ["original", "synonym", "synonym"]

    def test_thresholds_forwarded_on_wire(self, machinery_catalog):
        backend = EchoBackend()
        annotate_image(self.image(), machinery_catalog, backend, (0.27, 0.25))
        assert all(call[2] == 0.27 and call[3] == 0.25 for call in backend.calls)

    def test_box_clamped_to_image(self, machinery_catalog):
        backend = EchoBackend(box=(-10, -5, 150, 120))
        raws = annotate_image(self.image(), machinery_catalog, backend)
        assert raws[0].box == Box(0, 0, 100, 100)

    def test_zero_detections_empty(self, machinery_catalog):
        class SilentBackend:
            role = "detect"

            def detect(self, *args):
                return []

        raws = annotate_image(self.image(), machinery_catalog, SilentBackend())
        assert raws == []

    def test_annotate_many_order_independent(self, machinery_catalog):
        backend = EchoBackend()
        images = [self.image(), ImageRecord(id="im1", path="im1.png",
                                            class_names=("mining truck",),
                                            width=100, height=100)]
        out = annotate_many(images, machinery_catalog, backend, max_in_flight=2)
        assert sorted(out) == ["im0", "im1"]
        assert len(out["im1"]) == 2


def raw(image_id, box, score, phrase, kind="original", prompt=None):
    return RawAnnotation(image_id, Box(*box), score, phrase, kind, prompt)


class TestFilterAndNms:
    def test_single_low_score_kept(self, machinery_catalog):
        out = filter_and_nms(
            [raw("im0", (0, 0, 10, 10), 0.31, "bulldozer")], machinery_catalog
        )
        assert len(out) == 1
        assert out[0].score == 0.31
        assert out[0].stage == "final"
        assert out[0].class_name == "bulldozer"

    def test_multi_threshold(self, machinery_catalog):
        raws = [
            raw("im0", (0, 0, 10, 10), 0.6, "bulldozer"),
            raw("im0", (20, 20, 30, 30), 0.4, "bulldozer"),
            raw("im0", (40, 40, 50, 50), 0.7, "bulldozer"),
        ]
        out = filter_and_nms(raws, machinery_catalog)
        assert sorted(a.score for a in out) == [0.6, 0.7]

    def test_exactly_half_survives(self, machinery_catalog):
        raws = [
            raw("im0", (0, 0, 10, 10), 0.5, "bulldozer"),
            raw("im0", (20, 20, 30, 30), 0.49, "bulldozer"),
        ]
        out = filter_and_nms(raws, machinery_catalog)
        assert [a.score for a in out] == [0.5]

    def test_synonym_decode_after_nms(self, machinery_catalog):
        # overlapping boxes elicited by a class prompt and by another
        # class's synonym prompt: the survivor's label decodes through its
        # own prompt context
        crawler_prompt = DetectPrompt(
            text="crane", kind="synonym",
            decode_map={"crane": "crawler crane"}, via_synonym="crane",
        )
        raws = [
            raw("im0", (0, 0, 10, 10), 0.7, "crane", "synonym", crawler_prompt),
            raw("im0", (0, 0, 10, 10.5), 0.8, "crane", "synonym", crawler_prompt),
        ]
        out = filter_and_nms(raws, machinery_catalog)
        assert len(out) == 1
        assert out[0].score == 0.8
        assert out[0].class_name == "crawler crane"

    def test_unresolvable_phrase_dropped_with_warning(self, machinery_catalog):
        raws = [
            raw("im0", (0, 0, 10, 10), 0.9, "zeppelin"),
            raw("im0", (30, 30, 40, 40), 0.8, "bulldozer"),
        ]
        with pytest.warns(UserWarning, match="zeppelin"):
            out = filter_and_nms(raws, machinery_catalog)
        assert [a.class_name for a in out] == ["bulldozer"]

    def test_substring_fallback(self, machinery_catalog):
        prompt = DetectPrompt(
            text="mining truck", kind="original",
            decode_map={"mining truck": "mining truck"},
        )
        raws = [
            raw("im0", (0, 0, 10, 10), 0.9, "mining truck parked", "original", prompt),
            raw("im0", (30, 30, 40, 40), 0.8, "mining truck", "original", prompt),
        ]
        out = filter_and_nms(raws, machinery_catalog)
        assert all(a.class_name == "mining truck" for a in out)

    def test_mixed_images_rejected(self, machinery_catalog):
        raws = [
            raw("a", (0, 0, 1, 1), 0.9, "bulldozer"),
            raw("b", (0, 0, 1, 1), 0.9, "bulldozer"),
        ]
        with pytest.raises(AnnotateError):
            filter_and_nms(raws, machinery_catalog)

    def test_permutation_invariance(self, machinery_catalog):
        rng = random.Random(42)
        raws = []
        for i in range(12):
            x1, y1 = rng.uniform(0, 50), rng.uniform(0, 50)
            raws.append(raw(
                "im0", (x1, y1, x1 + rng.uniform(5, 30), y1 + rng.uniform(5, 30)),
                round(rng.uniform(0.3, 0.99), 3), "bulldozer",
            ))
        reference = filter_and_nms(raws, machinery_catalog)
        for _ in range(10):
            shuffled = list(raws)
            rng.shuffle(shuffled)
            assert filter_and_nms(shuffled, machinery_catalog) == reference

    def test_antichain_and_filter_semantics_against_oracle(self, machinery_catalog):
        for seed in range(100):
            rng = random.Random(seed)
            raws = []
            for _ in range(rng.randint(0, 10)):
                x1, y1 = rng.uniform(0, 60), rng.uniform(0, 60)
                raws.append(raw(
                    "im0",
                    (x1, y1, x1 + rng.uniform(2, 30), y1 + rng.uniform(2, 30)),
                    round(rng.random(), 3), "bulldozer",
                ))
            out = filter_and_nms(raws, machinery_catalog, 0.5, 0.5)
            pool = [(r, r.score) for r in raws]
            expected_filtered = oracle_filter(pool, 0.5)
            if len(raws) > 1:
                assert all(a.score >= 0.5 for a in out)
            assert len(out) <= len(expected_filtered)
            for i, a in enumerate(out):
                for b in out[i + 1:]:
                    assert iou(a.box, b.box) <= 0.5


class TestStageTransitions:
    def test_forward_only(self):
        ann = Annotation("im0", Box(0, 0, 1, 1), 0.5, "bulldozer", "final")
        approved = ann.advanced("approved")
        assert approved.stage == "approved"
        with pytest.raises(AnnotateError):
            approved.advanced("raw")


class TestStoreAndAccounting:
    def build_records(self):
        records = []
        raws = [
            raw("im0", (0, 0, 10, 10), 0.6, "bulldozer", "original"),
            raw("im0", (0, 0, 10, 10), 0.7, "dozer", "synonym"),
            raw("im1", (0, 0, 10, 10), 0.4, "mining truck", "cooccurring"),
        ]
        records.extend(record_from_raw(r) for r in raws)
        final = Annotation("im0", Box(0, 0, 10, 10), 0.7, "bulldozer",
                           "final", "dozer", "synonym")
        records.append(record_from_annotation(final))
        return records

    def test_round_trip(self, tmp_path):
        records = self.build_records()
        path = tmp_path / "store.jsonl"
        save_annotations(records, path)
        loaded = load_annotations(path)
        assert sorted(loaded, key=lambda r: r.sort_key()) == sorted(
            records, key=lambda r: r.sort_key()
        )
        save_annotations(loaded, tmp_path / "again.jsonl")
        assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()

    def test_accounting_rows(self):
        records = self.build_records()
        table = stage_accounting(records)
        by_stage = {row["stage"]: row for row in table}
        assert by_stage["original/co-occurring"]["count"] == 2
        assert by_stage["+ synonym/co-occurring"]["count"] == 3
        assert by_stage["+ filtering"]["count"] == 0
        assert by_stage["+ nms"]["count"] == 1
        assert by_stage["+ nms"]["mean_score"] == pytest.approx(0.7)

    def test_empty_store(self):
        table = stage_accounting([])
        assert all(row["count"] == 0 for row in table)
        assert all(row["mean_score"] is None for row in table)
