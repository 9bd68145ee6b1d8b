"""
Configuration settings loader
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from backend.errors import ConfigError
from data_gen.dataset import DatasetConfig
from detector.models import EvalConfig, TrainConfig

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent


class EnvSettings(BaseSettings):
    """Process-level defaults read from TINYDET_* variables or a .env file"""

    model_config = SettingsConfigDict(env_prefix="TINYDET_", env_file=".env", extra="ignore")

    output_root: str = "runs"
    log_level: str = "INFO"


class RunSettings(BaseModel):
    """One config document: dataset, training and evaluation sections"""

    model_config = {"extra": "forbid"}

    seed: int = Field(default=0, ge=0)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunSettings":
        """Propagate a top-level seed into the dataset and training sections"""
        return self.model_copy(
            update={
                "seed": seed,
                "dataset": self.dataset.model_copy(update={"seed": seed}),
                "train": self.train.model_copy(update={"seed": seed}),
            }
        )


def config_hash(payload: Union[BaseModel, Dict[str, Any]]) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON of a config"""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _error_field(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "-"


def parse_run_settings(
    payload: Dict[str, Any], unsafe_ranges: bool = False, seed: Optional[int] = None
) -> RunSettings:
    """
    Validate a config document

    Args:
        payload (Dict[str, Any]): Parsed JSON
        unsafe_ranges (bool): Skip the hyperparameter interval checks
        seed (Optional[int]): Overrides the document's seed everywhere

    Returns:
        RunSettings: validated settings
    """
    try:
        settings = RunSettings.model_validate(payload, context={"unsafe_ranges": unsafe_ranges})
    except ValidationError as e:
        field = _error_field(e)
        message = e.errors()[0]["msg"]
        logger.error(f"Invalid config field {field}: {message}")
        raise ConfigError(f"{field}: {message}", field=field) from e
    if seed is not None:
        settings = settings.with_seed(seed)
    elif "seed" in payload:
        # The top-level seed drives sections that did not set their own
        dataset_seed = payload.get("dataset", {}).get("seed", settings.seed)
        train_seed = payload.get("train", {}).get("seed", settings.seed)
        settings = settings.model_copy(
            update={
                "dataset": settings.dataset.model_copy(update={"seed": dataset_seed}),
                "train": settings.train.model_copy(update={"seed": train_seed}),
            }
        )
    return settings


def load_run_config(
    path: Union[str, Path], unsafe_ranges: bool = False, seed: Optional[int] = None
) -> RunSettings:
    """Load and validate a JSON config file"""
    config_path = Path(path)

    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}", field="config")

    try:
        with open(config_path, "r") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_path} is not valid JSON: {e}", field="config") from e

    if not isinstance(payload, dict):
        raise ConfigError(f"{config_path} must hold a JSON object", field="config")
    return parse_run_settings(payload, unsafe_ranges=unsafe_ranges, seed=seed)
