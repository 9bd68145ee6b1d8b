# Versioned JSON bundle of model parameters, EMA states and the config they came from

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from backend.errors import DatasetIOError, StateError
from config.settings import config_hash
from detector.models import ModelParams, TrainConfig
from detector.objective import DetectorStates

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


@dataclass
class Snapshot:
    params: ModelParams
    states: DetectorStates
    config: TrainConfig
    epochs_completed: int = 0

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "config_hash": self.config_hash,
            "config": self.config.model_dump(mode="json"),
            "epochs_completed": self.epochs_completed,
            "params": self.params.to_dict(),
            "states": self.states.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Snapshot":
        version = payload.get("version")
        if version != SNAPSHOT_VERSION:
            raise StateError(f"Unsupported snapshot version {version}, expected {SNAPSHOT_VERSION}")
        config = TrainConfig.unchecked(**payload["config"])
        snapshot = cls(
            params=ModelParams.from_dict(payload["params"]),
            states=DetectorStates.from_dict(payload["states"]),
            config=config,
            epochs_completed=int(payload.get("epochs_completed", 0)),
        )
        if snapshot.config_hash != payload.get("config_hash"):
            raise StateError("Snapshot config hash does not match its stored config")
        return snapshot


def save_snapshot(path: Union[str, Path], snapshot: Snapshot) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(snapshot.to_dict(), sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Failed to write snapshot {path}: {e}", str(path)) from e
    logger.info(f"Saved snapshot ({snapshot.epochs_completed} epochs) to {path}")
    return path


def load_snapshot(path: Union[str, Path]) -> Snapshot:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetIOError(f"Failed to read snapshot {path}: {e}", str(path)) from e
    except json.JSONDecodeError as e:
        raise DatasetIOError(f"Snapshot {path} is not valid JSON: {e}", str(path)) from e
    return Snapshot.from_dict(payload)
