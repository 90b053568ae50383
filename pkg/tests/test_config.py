import json

import pytest

from detforge.config import ConfigError, load_config


def write_config(tmp_path, **overrides):
    world = tmp_path / "images"
    world.mkdir(exist_ok=True)
    catalog = tmp_path / "catalog.json"
    catalog.write_text(json.dumps({"version": "1", "classes": [{"name": "crane"}]}))
    raw = {
        "catalog": str(catalog),
        "images_dir": str(world),
        "output_dir": str(tmp_path / "out"),
        "seed": 3,
        "endpoints": {"detect": {"base_url": "mock:///w"}},
    }
    raw.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


class TestLoadConfig:
    def test_defaults(self, tmp_path):
        config = load_config(write_config(tmp_path))
        assert config.box_threshold == 0.27
        assert config.text_threshold == 0.25
        assert config.filter_threshold == 0.5
        assert config.nms_threshold == 0.5
        assert config.split_fractions == (0.64, 0.16, 0.20)
        assert config.dedup_exact == 0
        assert config.dedup_near == 10

    def test_seed_override(self, tmp_path):
        config = load_config(write_config(tmp_path), seed_override=99)
        assert config.seed == 99

    def test_env_interpolation(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DETECT_URL", "http://models.internal:9000")
        path = write_config(
            tmp_path,
            endpoints={"detect": {"base_url": "${DETECT_URL}",
                                  "auth_token_env": "DETECT_TOKEN"}},
        )
        config = load_config(path)
        assert config.endpoints["detect"].base_url == "http://models.internal:9000"
        assert config.endpoints["detect"].auth_token_env == "DETECT_TOKEN"

    def test_missing_env_var_errors(self, tmp_path):
        path = write_config(
            tmp_path, endpoints={"detect": {"base_url": "${NOT_SET_ANYWHERE}"}}
        )
        with pytest.raises(ConfigError, match="NOT_SET_ANYWHERE"):
            load_config(path)

    def test_review_endpoint_gets_single_retry_default(self, tmp_path):
        path = write_config(
            tmp_path,
            endpoints={
                "detect": {"base_url": "mock:///w"},
                "review": {"base_url": "mock:///w"},
            },
        )
        config = load_config(path)
        assert config.endpoints["review"].max_retries == 1
        assert config.endpoints["detect"].max_retries == 3

    def test_threshold_range_validated(self, tmp_path):
        path = write_config(tmp_path, thresholds={"box": 1.5})
        with pytest.raises(ConfigError, match="box_threshold"):
            load_config(path)

    def test_nms_threshold_open_interval(self, tmp_path):
        path = write_config(tmp_path, thresholds={"nms": 1.0})
        with pytest.raises(ConfigError, match="nms_threshold"):
            load_config(path)

    def test_missing_catalog_file(self, tmp_path):
        path = write_config(tmp_path, catalog=str(tmp_path / "ghost.json"))
        with pytest.raises(ConfigError, match="catalog"):
            load_config(path)

    def test_fractions_must_sum(self, tmp_path):
        path = write_config(tmp_path, split={"fractions": [0.5, 0.1, 0.1]})
        with pytest.raises(ConfigError, match="sum to 1"):
            load_config(path)

    def test_detect_endpoint_required(self, tmp_path):
        path = write_config(tmp_path, endpoints={})
        with pytest.raises(ConfigError, match="detect"):
            load_config(path)
