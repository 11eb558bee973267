"""
Engine configuration.

A single YAML document, `${VAR}` references expanded from the environment
before validation. Secrets never live in the file itself.
"""
import os
import re
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from vdr.budget import Budgets
from vdr.errors import ConfigError
from vdr.safeguards import RepetitionParams

ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
LIVE_KEYS = ("VDR_MODEL_API_KEY", "VDR_JUDGE_API_KEY", "VDR_SEARCH_API_KEY")


class Mode(str, Enum):
    """Rollout tool policy, one per ablation row."""
    DIRECT = "direct"
    WIS = "wis"
    WIS_TS = "wis_ts"
    CIS = "cis"
    CIS_TS = "cis_ts"

    @property
    def visual_search(self) -> bool:
        return self is not Mode.DIRECT

    @property
    def crops(self) -> bool:
        return self in (Mode.CIS, Mode.CIS_TS)

    @property
    def text_search(self) -> bool:
        return self in (Mode.WIS_TS, Mode.CIS_TS)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RetryPolicy(_Section):
    max_attempts: int = Field(3, ge=1)
    backoff_base_ms: int = Field(500, ge=0)


class ModelEndpoint(_Section):
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "sim"
    max_in_flight: int = Field(8, ge=1)
    timeout_ms: int = Field(60000, ge=1)
    retry: RetryPolicy = RetryPolicy()
    api_key_env: str = "VDR_MODEL_API_KEY"
    temperature: float = 0.6
    max_tokens: int = Field(4096, ge=1)
    context_window: int = Field(131072, ge=1)


class Endpoints(_Section):
    policy: ModelEndpoint = ModelEndpoint()
    foundation: ModelEndpoint = ModelEndpoint()
    mllm: ModelEndpoint = ModelEndpoint()
    judge: ModelEndpoint = ModelEndpoint(api_key_env="VDR_JUDGE_API_KEY")
    selector: ModelEndpoint = ModelEndpoint()
    summarizer: ModelEndpoint = ModelEndpoint()
    verifier: ModelEndpoint = ModelEndpoint(api_key_env="VDR_JUDGE_API_KEY")


class LiveSettings(_Section):
    search_base_url: str = "http://localhost:8080"
    page_timeout_s: float = Field(10.0, gt=0)
    rate_limit_delay_s: float = Field(0.5, ge=0)
    retries: int = Field(3, ge=1)


class BudgetSettings(_Section):
    max_turns: int = Field(50, ge=1)
    max_context_tokens: int = Field(65536, ge=1)
    max_turn_tokens: int = Field(4096, ge=1)

    def build(self) -> Budgets:
        return Budgets(self.max_turns, self.max_context_tokens, self.max_turn_tokens)


class VisionSettings(_Section):
    scales: List[float] = [1.0, 1.5, 2.5]
    max_regions: int = Field(4, ge=1)
    vision_turn_cap: int = Field(8, ge=1)

    @field_validator("scales")
    @classmethod
    def scales_positive(cls, scales: List[float]) -> List[float]:
        if not scales:
            raise ValueError("at least one scale is required")
        if any(s <= 0 for s in scales):
            raise ValueError("scales must be positive")
        return scales


class RolloutSettings(_Section):
    mode: Mode = Mode.CIS_TS
    concurrency: int = Field(64, ge=1)
    tool_pool_size: int = Field(32, ge=1)
    tool_timeout_ms: int = Field(30000, ge=1)
    max_page_chars: int = Field(4000, ge=200)
    samples: int = Field(1, ge=1)


class SafeguardSettings(_Section):
    ngram: int = Field(32, ge=2)
    min_chars: int = Field(1024, ge=0)
    min_repeats: int = Field(4, ge=2)
    max_consecutive_errors: int = Field(3, ge=1)

    def repetition(self) -> RepetitionParams:
        return RepetitionParams(self.ngram, self.min_chars, self.min_repeats)


class RlSettings(_Section):
    group_size: int = Field(8, ge=2)
    error_step_fraction: float = Field(0.5, gt=0, le=1)
    format_penalty: float = Field(0.0, ge=0)


class SftMix(_Section):
    curated: int = Field(16000, ge=0)
    text_only: int = Field(8000, ge=0)
    fuzzy: int = Field(6000, ge=0)


class RlMix(_Section):
    curated: int = Field(10000, ge=0)
    fuzzy: int = Field(5000, ge=0)


class MixSettings(_Section):
    sft: SftMix = SftMix()
    rl: RlMix = RlMix()


class LatencySpec(_Section):
    distribution: Literal["constant", "uniform", "normal"] = "uniform"
    low_ms: float = Field(200.0, ge=0)
    high_ms: float = Field(800.0, ge=0)
    mean_ms: float = Field(500.0, ge=0)
    std_ms: float = Field(100.0, ge=0)

    @model_validator(mode="after")
    def ordered(self) -> "LatencySpec":
        if self.high_ms < self.low_ms:
            raise ValueError("high_ms must be >= low_ms")
        return self


class WorldSettings(_Section):
    seed: int = 7
    n_entities: int = Field(60, ge=1)
    n_pages: int = Field(80, ge=1)
    n_images: Optional[int] = Field(None, ge=1)
    hit_fraction: float = Field(0.4, gt=0, le=1)
    perfect_match_fraction: float = Field(0.9, gt=0, le=1)
    latency: Dict[str, LatencySpec] = {}
    latency_scale: float = Field(1.0, ge=0)


class EngineConfig(_Section):
    backend: Literal["sim", "live"] = "sim"
    endpoints: Endpoints = Endpoints()
    live: LiveSettings = LiveSettings()
    budgets: BudgetSettings = BudgetSettings()
    vision: VisionSettings = VisionSettings()
    rollout: RolloutSettings = RolloutSettings()
    safeguards: SafeguardSettings = SafeguardSettings()
    rl: RlSettings = RlSettings()
    mix: MixSettings = MixSettings()
    world: WorldSettings = WorldSettings()
    code_timeout_s: float = Field(10.0, gt=0)
    prompts_dir: Optional[Path] = None

    @model_validator(mode="after")
    def check_references(self) -> "EngineConfig":
        if self.prompts_dir is not None and not self.prompts_dir.is_dir():
            raise ValueError(f"prompts_dir {self.prompts_dir} does not exist")
        if self.backend == "live":
            missing = [key for key in LIVE_KEYS if not os.environ.get(key)]
            if missing:
                raise ValueError(f"live backend requires {', '.join(missing)}")
        return self


def interpolate_env(text: str) -> str:
    """Replace ${VAR} with its environment value; unknown variables are an error."""
    missing = []

    def substitute(match):
        value = os.environ.get(match.group(1))
        if value is None:
            missing.append(match.group(1))
            return ""
        return value

    result = ENV_PATTERN.sub(substitute, text)
    if missing:
        raise ConfigError([f"environment variable {name} is not set" for name in missing])
    return result


def _field_messages(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        messages.append(f"{location}: {item['msg']}")
    return messages


def parse_config(data: Optional[dict]) -> EngineConfig:
    try:
        return EngineConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(_field_messages(e)) from e


def load_config(path: Optional[Union[str, Path]] = None) -> EngineConfig:
    """Load and validate a config file; no path means all defaults."""
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        data = yaml.safe_load(interpolate_env(path.read_text()))
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: invalid YAML ({e})"]) from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(data)
