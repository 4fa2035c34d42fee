"""Run configuration: JSON schema, validation, overrides.

Schema (all keys optional unless noted; defaults shown):

    {
      "data": {
        "root": "<path>",              # required for train/evaluate
        "train_classes": ["..."],      # class ids, disjoint from test
        "test_classes": ["..."]
      },
      "model": { ...ModelConfig fields... },
      "train": {
        "epochs": 10, "batch_size": 2, "lr": 3e-4,
        "warmup_frac": 0.05, "weight_decay": 0.01,
        "queue_fraction": 0.05, "task_mix": [2, 2, 1],
        "precision": "float32"
      },
      "loss": {
        "lambda_txt": 1.0, "lambda_seg": 1.0, "lambda_align": 0.5,
        "lambda_bce": 2.0, "lambda_dice": 0.5
      },
      "seed": 0,
      "out": "runs/default"
    }

Every field is validated before any work starts; the model geometry
is checked by actually instantiating the projector configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..errors import ConfigError, ProtocolError
from ..pipeline import ModelConfig
from ..seghead import LossWeights

PRECISIONS = ("float32", "float64")


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 2
    lr: float = 3e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    queue_fraction: float = 0.05
    task_mix: Tuple[float, float, float] = (2.0, 2.0, 1.0)
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 < self.queue_fraction <= 1.0:
            raise ConfigError("queue_fraction must lie in (0, 1]")
        self.task_mix = tuple(float(v) for v in self.task_mix)
        if len(self.task_mix) != 3 or any(v < 0 for v in self.task_mix) \
                or sum(self.task_mix) == 0:
            raise ConfigError("task_mix needs 3 non-negative weights "
                              "with a positive sum")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")


@dataclass
class DataSettings:
    root: Optional[str] = None
    train_classes: List[str] = field(default_factory=list)
    test_classes: List[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise ProtocolError(
                f"classes appear in both splits: {sorted(overlap)}")
        for side in (self.train_classes, self.test_classes):
            if len(set(side)) != len(side):
                raise ConfigError("duplicate class ids in split")


@dataclass
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        # exercise the projector geometry checks up front
        h, w = self.model.image_hw
        if h % self.model.patch or w % self.model.patch:
            raise ConfigError(f"patch {self.model.patch} must divide "
                              f"image {self.model.image_hw}")
        grid = h // self.model.patch
        self.model.compressor_config().validate(grid,
                                                self.model.enc_levels)

    # -- (de)serialization ----------------------------------------------

    def to_dict(self) -> Dict:
        return {
            "data": {"root": self.data.root,
                     "train_classes": list(self.data.train_classes),
                     "test_classes": list(self.data.test_classes)},
            "model": self.model.to_dict(),
            "train": {"epochs": self.train.epochs,
                      "batch_size": self.train.batch_size,
                      "lr": self.train.lr,
                      "warmup_frac": self.train.warmup_frac,
                      "weight_decay": self.train.weight_decay,
                      "queue_fraction": self.train.queue_fraction,
                      "task_mix": list(self.train.task_mix),
                      "precision": self.train.precision},
            "loss": {"lambda_txt": self.loss.lambda_txt,
                     "lambda_seg": self.loss.lambda_seg,
                     "lambda_align": self.loss.lambda_align,
                     "lambda_bce": self.loss.lambda_bce,
                     "lambda_dice": self.loss.lambda_dice},
            "seed": self.seed,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "RunConfig":
        known = {"data", "model", "train", "loss", "seed", "out"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        def build(section, ctor):
            payload = dict(raw.get(section, {}))
            fields = {f.name for f in ctor.__dataclass_fields__.values()}
            bad = set(payload) - fields
            if bad:
                raise ConfigError(f"unknown keys in '{section}': "
                                  f"{sorted(bad)}")
            return ctor(**payload)

        return cls(data=build("data", DataSettings),
                   model=ModelConfig.from_dict(raw.get("model", {})),
                   train=build("train", TrainSettings),
                   loss=build("loss", LossWeights),
                   seed=int(raw.get("seed", 0)),
                   out=str(raw.get("out", "runs/default")))


def read_raw_config(path) -> Dict:
    """Parse a config file into a plain dict, without validating it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(read_raw_config(path))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict, overrides) -> Dict:
    """Apply dotted ``key=value`` strings onto a raw config dict.

    Values parse as JSON when they can (numbers, lists, booleans) and
    fall back to plain strings, so ``train.lr=0.001`` and
    ``data.root=path/to/data`` both work.
    """
    out = json.loads(json.dumps(raw))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r} has an empty key part")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a "
                                  "non-object")
        node[parts[-1]] = _parse_value(value.strip())
    return out


def save_config(path, config: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
