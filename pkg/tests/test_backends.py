import json
import threading

import pytest

from detforge.backends.client import (
    BackendEndpoint,
    HttpBackendClient,
    TokenBucket,
    TransportError,
    make_client,
)
from detforge.backends.mock import (
    MockDetectBackend,
    MockGenerateBackend,
    MockReviewBackend,
    MockTrainBackend,
    NoiseModel,
    SyntheticWorld,
    generate_world,
)
from detforge.backends.protocol import (
    PROTOCOL_VERSION,
    ProtocolError,
    detect_response,
    validate_detect_request,
    validate_generate_request,
    validate_review_request,
    validate_train_request,
)
from detforge.backends.server import MockModelServer, serve
from detforge.geometry import Box, iou

from .contract_runner import load_cases, run_all


@pytest.fixture()
def world(tmp_path, machinery_catalog):
    return generate_world(
        tmp_path / "world", machinery_catalog, seed=7, n_images=6,
        classes=["bulldozer", "mining truck", "mining excavator"],
    )


@pytest.fixture()
def noisy_world(tmp_path, machinery_catalog):
    return generate_world(
        tmp_path / "noisy", machinery_catalog, seed=9, n_images=8,
        noise=NoiseModel(jitter_sigma=0.08, decoy_rate=0.5, miss_rate=0.1),
        classes=["bulldozer", "mining truck"],
    )


class TestSyntheticWorld:
    def test_regeneration_bit_identical(self, tmp_path, machinery_catalog):
        kwargs = dict(seed=3, n_images=5, classes=["bulldozer", "crawler crane"])
        w1 = generate_world(tmp_path / "w1", machinery_catalog, **kwargs)
        w2 = generate_world(tmp_path / "w2", machinery_catalog, **kwargs)
        for rel in ["world.json", "images/img00000.png", "images/img00000.truth.json"]:
            assert (w1.root / rel).read_bytes() == (w2.root / rel).read_bytes()

    def test_sidecars_exist_for_every_image(self, world):
        for item in world.images:
            assert (world.root / item["file"]).exists()
            truth = world.truth_for(item["id"])
            assert truth["objects"]
            assert truth["width"] == item["width"]

    def test_reload(self, world):
        loaded = SyntheticWorld.load(world.root)
        assert loaded.seed == world.seed
        assert [i["id"] for i in loaded.images] == [i["id"] for i in world.images]


class TestMockDetect:
    def test_zero_noise_exact_truth_score_095(self, world):
        backend = MockDetectBackend(world)
        item = world.images[0]  # a bulldozer image
        truth = world.truth_for(item["id"])
        dets = backend.detect(str(world.root / item["file"]), "bulldozer", 0.27, 0.25)
        primary = [o for o in truth["objects"] if o["class"] == "bulldozer"]
        assert len(dets) == len(primary)
        for det, obj in zip(dets, primary):
            assert det["box"] == pytest.approx(obj["box"])
            assert det["score"] == pytest.approx(0.95)
            assert det["phrase"] == "bulldozer"

    def test_prompt_not_mentioning_class_empty(self, world):
        backend = MockDetectBackend(world)
        item = world.images[0]
        assert backend.detect(str(world.root / item["file"]), "pontoon excavator") == []

    def test_synonym_prompt_echoes_synonym(self, world):
        backend = MockDetectBackend(world)
        item = world.images[0]
        dets = backend.detect(str(world.root / item["file"]), "dozer")
        assert dets
        assert all(d["phrase"] == "dozer" for d in dets)

    def test_deterministic_across_instances(self, noisy_world):
        item = noisy_world.images[0]
        ref = str(noisy_world.root / item["file"])
        a = MockDetectBackend(noisy_world).detect(ref, "bulldozer")
        b = MockDetectBackend(SyntheticWorld.load(noisy_world.root)).detect(ref, "bulldozer")
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_scores_decrease_with_jitter(self, noisy_world):
        backend = MockDetectBackend(noisy_world)
        for item in noisy_world.images:
            truth = noisy_world.truth_for(item["id"])
            dets = backend.detect(str(noisy_world.root / item["file"]),
                                  item["primary_class"])
            for det in dets:
                best = max(
                    iou(Box(*det["box"]), Box(*o["box"])) for o in truth["objects"]
                )
                assert det["score"] == pytest.approx(max(0.05, round(0.95 * best, 6)))

    def test_missing_sidecar_is_protocol_error(self, world, tmp_path):
        backend = MockDetectBackend(world)
        with pytest.raises(ProtocolError):
            backend.detect(str(tmp_path / "nope.png"), "bulldozer")


class TestMockGenerate:
    def test_count_images_and_sidecars(self, tmp_path):
        backend = MockGenerateBackend(tmp_path / "ws")
        backend.register_model("m1", "bulldozer", "TA230")
        out = backend.generate("m1", "a photo of a <TA230> bulldozer", seed=5, count=3)
        assert len(out) == 3
        for item in out:
            assert (tmp_path / "ws" / "generated" / f"{item['image_id']}.png").exists()
            truth = json.loads(
                (tmp_path / "ws" / "generated" / f"{item['image_id']}.truth.json").read_text()
            )
            assert truth["objects"][0]["class"] == "bulldozer"
            assert truth["provenance"]["seed"] == item["seed"]

    def test_same_request_identical_pixels(self, tmp_path):
        backend = MockGenerateBackend(tmp_path / "ws")
        backend.register_model("m1", "bulldozer", "TA230")
        a = backend.generate("m1", "prompt", seed=1, count=1)
        bytes_a = (tmp_path / "ws" / "generated" / f"{a[0]['image_id']}.png").read_bytes()
        b = backend.generate("m1", "prompt", seed=1, count=1)
        bytes_b = (tmp_path / "ws" / "generated" / f"{b[0]['image_id']}.png").read_bytes()
        assert a == b
        assert bytes_a == bytes_b

    def test_multiple_machines_draws_2_to_4(self, tmp_path):
        backend = MockGenerateBackend(tmp_path / "ws")
        backend.register_model("m1", "bulldozer", "TA230")
        for seed in range(6):
            out = backend.generate(
                "m1", "a photo of multiple machines, several bulldozers", seed, 1
            )
            truth = json.loads(
                (tmp_path / "ws" / "generated" /
                 f"{out[0]['image_id']}.truth.json").read_text()
            )
            assert 2 <= len(truth["objects"]) <= 4

    def test_unknown_model_rejected(self, tmp_path):
        backend = MockGenerateBackend(tmp_path / "ws")
        with pytest.raises(ProtocolError):
            backend.generate("ghost", "prompt", 0, 1)


class TestMockReview:
    def overlay_with(self, tmp_path, world, drawn_boxes):
        item = world.images[0]
        source = world.root / item["file"]
        truth_path = world.root / "images" / f"{item['id']}.truth.json"
        overlay_path = tmp_path / "overlay.png"
        overlay_path.write_bytes(source.read_bytes())
        sidecar = {
            "image_id": item["id"],
            "source_path": str(source),
            "truth_path": str(truth_path),
            "drawn": [{"box": b, "class": "bulldozer", "score": 0.9} for b in drawn_boxes],
        }
        (tmp_path / "overlay.png.json").write_text(json.dumps(sidecar))
        return str(overlay_path), world.truth_for(item["id"])

    def test_truth_overlay_all_yes(self, tmp_path, world):
        ref, truth = self.overlay_with(
            tmp_path, world, [o["box"] for o in truth_objects(world)]
        )
        text = MockReviewBackend().review(ref)
        assert '"Precision": "Yes"' in text
        assert '"Recall": "Yes"' in text
        assert '"Fit": "Yes"' in text

    def test_missing_truth_box_fails_recall(self, tmp_path, world):
        ref, _ = self.overlay_with(tmp_path, world, [])
        text = MockReviewBackend().review(ref)
        assert '"Recall": "No"' in text

    def test_heavy_jitter_fails_fit(self, tmp_path, world):
        objects = truth_objects(world)
        x1, y1, x2, y2 = objects[0]["box"]
        h = y2 - y1
        jittered = [x1, y1 + 0.25 * h, x2, y2 + 0.25 * h]  # IoU = 0.6
        ref, _ = self.overlay_with(tmp_path, world, [jittered])
        text = MockReviewBackend().review(ref)
        assert '"Fit": "No"' in text

    def test_photorealism_rules(self):
        backend = MockReviewBackend("reject_odd_seeds")
        assert backend.review_photorealism("x.png", metadata={"seed": 2}) == "YES\nYES"
        assert backend.review_photorealism("x.png", metadata={"seed": 3}) == "YES\nNO"
        assert MockReviewBackend().review_photorealism("x.png", metadata={"seed": 3}) == "YES\nYES"


def truth_objects(world):
    return world.truth_for(world.images[0]["id"])["objects"]


class TestMockTrain:
    def manifest_and_annotations(self, tmp_path, world):
        manifest_path = tmp_path / "manifest.jsonl"
        annotations_path = tmp_path / "annotations.jsonl"
        with open(manifest_path, "w") as mf, open(annotations_path, "w") as af:
            for item in world.images:
                mf.write(json.dumps({
                    "image_id": item["id"],
                    "path": str(world.root / item["file"]),
                }) + "\n")
                for obj in world.truth_for(item["id"])["objects"]:
                    x1, y1, x2, y2 = obj["box"]
                    af.write(json.dumps({
                        "image_id": item["id"], "x1": x1, "y1": y1,
                        "x2": x2, "y2": y2, "score": 0.9,
                        "class": obj["class"], "stage": "approved",
                        "phrase": obj["class"], "prompt_kind": "original",
                    }) + "\n")
        return manifest_path, annotations_path

    def test_train_then_eval_on_train_images_near_perfect(self, tmp_path, world):
        from detforge.evaluate import Detection, GroundTruth, ap_summary

        manifest, annotations = self.manifest_and_annotations(tmp_path, world)
        trainer = MockTrainBackend(tmp_path / "ws")
        job_id = trainer.train(
            {"manifest_ref": str(manifest), "annotations_ref": str(annotations)},
            "detector",
        )
        status = trainer.poll(job_id)
        assert status["status"] == "succeeded"
        detect = MockDetectBackend(world)
        dets, gts = [], []
        for item in world.images:
            ref = str(world.root / item["file"])
            for d in detect.detect(ref, "", model_ref=status["artifact_ref"]):
                dets.append(Detection(item["id"], Box(*d["box"]),
                                      d["score"], d["phrase"]))
            for obj in world.truth_for(item["id"])["objects"]:
                gts.append(GroundTruth(item["id"], Box(*obj["box"]), obj["class"]))
        report = ap_summary(dets, gts)
        assert report.ap50_95 > 0.95

    def test_poll_unknown_job(self, tmp_path):
        trainer = MockTrainBackend(tmp_path / "ws")
        with pytest.raises(ProtocolError) as excinfo:
            trainer.poll("job-nope")
        assert excinfo.value.code == "unknown_job"

    def test_diversify_job_registers_generation_model(self, tmp_path):
        ws = tmp_path / "ws"
        trainer = MockTrainBackend(ws)
        job_id = trainer.train(
            {"instance_name": "TA230", "class_name": "bulldozer",
             "max_steps": 1200, "steps_multiplier": 120},
            "diversify",
        )
        status = trainer.poll(job_id)
        assert status["status"] == "succeeded"
        generator = MockGenerateBackend(ws)
        out = generator.generate(status["artifact_ref"], "a photo", 0, 1)
        assert out[0]["class"] == "bulldozer"


class TestProtocolValidation:
    def test_detect_defaults(self):
        req = validate_detect_request({"image_ref": "x.png", "prompt": "crane"})
        assert req["box_threshold"] == 0.27
        assert req["text_threshold"] == 0.25

    def test_detect_missing_field(self):
        with pytest.raises(ProtocolError) as excinfo:
            validate_detect_request({"prompt": "crane"})
        assert excinfo.value.code == "validation"

    def test_round_trip_identity(self):
        req = validate_detect_request({"image_ref": "x.png", "prompt": "crane"})
        resp = detect_response(req, [{"box": [0, 0, 1, 1], "score": 0.5, "phrase": "crane"}])
        assert json.loads(json.dumps(resp)) == resp
        gen = validate_generate_request(
            {"model_ref": "m", "prompt": "p", "seed": 3, "count": 2}
        )
        assert json.loads(json.dumps(gen)) == gen
        rev = validate_review_request({"task": "boxes", "image_ref": "o.png"})
        assert json.loads(json.dumps(rev)) == rev
        train = validate_train_request({"job_type": "detector", "job": {"a": 1}})
        assert json.loads(json.dumps(train)) == train

    def test_error_payload_shape(self):
        err = ProtocolError("validation", "nope")
        body = err.to_json()
        assert body["error"]["code"] == "validation"
        assert body["protocol_version"] == PROTOCOL_VERSION


class TestHttpServerAndClient:
    @pytest.fixture()
    def served(self, world, tmp_path):
        server = MockModelServer(world.root, tmp_path / "server_ws")
        httpd = serve(server)
        host, port = httpd.server_address
        yield f"http://{host}:{port}", server, world
        httpd.shutdown()

    def test_contract_cases_pass(self, served):
        base_url, _, world = served
        item = world.images[0]
        failures = run_all(base_url, str(world.root / item["file"]))
        assert failures == {}, failures
        assert len(load_cases()) >= 15

    def test_client_round_trip(self, served, tmp_path):
        base_url, server, world = served
        item = world.images[0]
        endpoint = BackendEndpoint(role="detect", base_url=base_url)
        client = make_client(endpoint)
        dets = client.detect(str(world.root / item["file"]), "bulldozer")
        assert dets and all(set(d) == {"box", "score", "phrase"} for d in dets)

    def test_train_poll_generate_over_http(self, served):
        base_url, _, _ = served
        train_client = HttpBackendClient(BackendEndpoint(role="train", base_url=base_url))
        job_id = train_client.train(
            {"instance_name": "X1", "class_name": "bulldozer",
             "max_steps": 800, "steps_multiplier": 120},
            "diversify",
        )
        status = train_client.poll(job_id)
        assert status["status"] == "succeeded"
        gen_client = HttpBackendClient(BackendEndpoint(role="generate", base_url=base_url))
        out = gen_client.generate(status["artifact_ref"], "a photo", 4, 2)
        assert len(out) == 2

    def test_protocol_error_not_retried(self, served):
        base_url, _, _ = served
        client = HttpBackendClient(BackendEndpoint(role="detect", base_url=base_url))
        with pytest.raises(ProtocolError) as excinfo:
            client.detect("missing.png", "bulldozer")
        assert excinfo.value.code == "validation"

    def test_transport_retry_with_backoff_and_stable_idempotency_key(self):
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        attempts = []

        class Flaky(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                self.rfile.read(length)
                attempts.append(self.headers.get("Idempotency-Key"))
                if len(attempts) < 3:
                    self.send_response(503)
                    self.end_headers()
                    return
                body = json.dumps({"protocol_version": "1", "detections": [],
                                   "thresholds": {"box": 0.27, "text": 0.25}}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        httpd = ThreadingHTTPServer(("127.0.0.1", 0), Flaky)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        try:
            sleeps = []
            client = HttpBackendClient(
                BackendEndpoint(role="detect",
                                base_url=f"http://127.0.0.1:{httpd.server_address[1]}",
                                max_retries=3),
                sleep=sleeps.append,
            )
            dets = client.detect("x.png", "crane")
            assert dets == []
            assert len(attempts) == 3
            assert len(set(attempts)) == 1  # same idempotency key on every retry
            assert sleeps == [0.1, 0.2]  # exponential backoff
        finally:
            httpd.shutdown()

    def test_transport_gives_up_after_retries(self):
        client = HttpBackendClient(
            BackendEndpoint(role="detect", base_url="http://127.0.0.1:9",
                            max_retries=1, timeout=0.2),
            sleep=lambda s: None,
        )
        with pytest.raises(TransportError):
            client.detect("x.png", "crane")


class TestTokenBucket:
    def test_unlimited_when_rate_zero(self):
        bucket = TokenBucket(0.0)
        for _ in range(100):
            bucket.acquire()  # must never block

    def test_limits_with_fake_clock(self):
        now = [0.0]
        waits = []

        def clock():
            return now[0]

        def sleep(t):
            waits.append(t)
            now[0] += t

        bucket = TokenBucket(rate_per_sec=2.0, capacity=1.0, clock=clock, sleep=sleep)
        bucket.acquire()  # consumes the initial token
        bucket.acquire()  # must wait 0.5s for the next
        assert waits == [pytest.approx(0.5)]

    def test_auth_header_from_env(self, monkeypatch):
        monkeypatch.setenv("REVIEW_TOKEN", "secret123")
        endpoint = BackendEndpoint(role="review", base_url="http://x",
                                   auth_token_env="REVIEW_TOKEN")
        client = HttpBackendClient(endpoint)
        headers = client._headers("key")
        assert headers["Authorization"] == "Bearer secret123"
