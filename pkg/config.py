"""Configuration management for faultflow."""
import json
import os
from pathlib import Path
from typing import Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from errors import ConfigError

# Load environment variables
load_dotenv()

ModelT = TypeVar("ModelT", bound=BaseModel)


def _int_list(raw: str) -> list:
    return [int(item) for item in raw.split(",") if item.strip()]


class Config:
    """Environment-level defaults for the faultflow tools."""

    # Project paths
    BASE_DIR = Path(__file__).parent
    OUT_DIR = Path(os.getenv("FAULTFLOW_OUT_DIR", "runs"))

    # Experiment defaults
    JOBS = int(os.getenv("FAULTFLOW_JOBS", "1"))
    SPLITS = int(os.getenv("FAULTFLOW_SPLITS", "7"))
    SEEDS = _int_list(os.getenv("FAULTFLOW_SEEDS", "0,1,2,3,4"))

    # Scoring sanity check: scaled windows should stay near [0, 1]
    SCALE_WARN_LOW = float(os.getenv("FAULTFLOW_SCALE_WARN_LOW", "-1.0"))
    SCALE_WARN_HIGH = float(os.getenv("FAULTFLOW_SCALE_WARN_HIGH", "2.0"))

    @classmethod
    def validate(cls):
        """Validate the environment-provided settings."""
        if cls.JOBS < 1:
            print(f"⚠️  [config] FAULTFLOW_JOBS={cls.JOBS} is not positive, using 1")
            cls.JOBS = 1
        if not cls.SEEDS:
            print("⚠️  [config] FAULTFLOW_SEEDS is empty, using seed 0")
            cls.SEEDS = [0]
        if cls.SPLITS < 1:
            raise ConfigError(f"FAULTFLOW_SPLITS must be positive, got {cls.SPLITS}")
        return True


def build_model(model_cls: Type[ModelT], values: dict) -> ModelT:
    """Validate a dict into a pydantic model, raising ConfigError on failure."""
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or model_cls.__name__
        raise ConfigError(f"{model_cls.__name__}: {location}: {first['msg']}") from e


def read_json(path) -> dict:
    """Load a JSON document, raising ConfigError when it is unreadable."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e


def load_model(model_cls: Type[ModelT], path) -> ModelT:
    """Load a JSON config file into a pydantic model."""
    return build_model(model_cls, read_json(path))


def write_json(path, payload: dict):
    """Write a JSON document with stable key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
