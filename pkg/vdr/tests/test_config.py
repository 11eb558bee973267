from pathlib import Path

import pytest

from vdr.config import LIVE_KEYS, Mode, interpolate_env, load_config, parse_config
from vdr.errors import ConfigError

SHIPPED = Path(__file__).resolve().parents[2] / "config" / "engine.yaml"


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config.backend == "sim"
        assert config.budgets.build().max_turns == 50
        assert config.vision.scales == [1.0, 1.5, 2.5]
        assert config.safeguards.repetition().ngram == 32
        assert config.rollout.mode is Mode.CIS_TS

    def test_shipped_config_loads(self):
        config = load_config(SHIPPED)
        assert config.world.latency["code_exec"].distribution == "constant"
        assert config.mix.sft.text_only == 8000

    def test_environment_interpolation(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VDR_TEST_POLICY_URL", "http://policy:9000/v1")
        path = tmp_path / "engine.yaml"
        path.write_text("endpoints:\n  policy:\n    base_url: ${VDR_TEST_POLICY_URL}\n")
        assert load_config(path).endpoints.policy.base_url == "http://policy:9000/v1"

    def test_missing_variable(self, monkeypatch):
        monkeypatch.delenv("VDR_TEST_UNSET", raising=False)
        with pytest.raises(ConfigError, match="VDR_TEST_UNSET"):
            interpolate_env("key: ${VDR_TEST_UNSET}")

    def test_field_errors_name_their_location(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"budgets": {"max_turns": 0}, "vision": {"scales": [1.0, -2.0]}})
        joined = " ".join(info.value.messages)
        assert "budgets.max_turns" in joined
        assert "vision.scales" in joined

    def test_unknown_keys_are_rejected(self):
        with pytest.raises(ConfigError, match="budget"):
            parse_config({"budget": {"max_turns": 3}})

    def test_latency_bounds(self):
        with pytest.raises(ConfigError):
            parse_config({"world": {"latency": {"web_search": {"low_ms": 900, "high_ms": 100}}}})

    def test_live_backend_requires_keys(self, monkeypatch):
        for key in LIVE_KEYS:
            monkeypatch.delenv(key, raising=False)
        with pytest.raises(ConfigError, match="VDR_MODEL_API_KEY"):
            parse_config({"backend": "live"})
        for key in LIVE_KEYS:
            monkeypatch.setenv(key, "k")
        assert parse_config({"backend": "live"}).backend == "live"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(tmp_path / "nope.yaml")

    def test_top_level_must_be_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)


class TestMode:
    def test_flags(self):
        assert not Mode.DIRECT.visual_search
        assert Mode.WIS.visual_search and not Mode.WIS.crops and not Mode.WIS.text_search
        assert Mode.CIS_TS.crops and Mode.CIS_TS.text_search
