"""
Run configuration: a JSON document with a fixed schema, overlaid by command-line flags
"""
import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .engine import vit
from .engine.datagen import DatagenConfig
from .engine.errors import ConfigurationError
from .engine.lora import POSITION_PRESETS
from .engine.losses import LossConfig
from .engine.model import BACKBONE_MODES
from .engine.trainer import FINETUNE_ITERATIONS, TrainConfig

Number = (int, float)
OptionalStr = (str, type(None))

# section -> key -> (accepted types, default); None in a backbone field means "take it from the preset"
SCHEMA = {
    "backbone": {
        "preset": (str, "base"),
        "image_size": ((int, type(None)), None),
        "patch_size": ((int, type(None)), None),
        "embed_dim": ((int, type(None)), None),
        "num_blocks": ((int, type(None)), None),
        "num_heads": ((int, type(None)), None),
        "mlp_ratio": ((int, float, type(None)), None),
        "final_norm": (bool, True),
        "mode": (str, "frozen"),
        "warmup_steps": (int, 200),
        "warmup_lr": (Number, 1e-3),
    },
    "lora": {
        "rank": (int, 4),
        "positions": (str, "qv_proj"),
    },
    "decoder": {
        "groups": (int, 4),
    },
    "loss": {
        "beta": (Number, 5.0),
        "alpha_conf": (Number, 0.1),
        "focal_gamma": (Number, 2.0),
        "reduction": (str, "mean"),
        "use_confidence": (bool, True),
    },
    "datagen": {
        "n": (int, 512),
        "eval_n": (int, 256),
        "split": (str, "train"),
        "threshold": (Number, 0.3),
        "forced_fail": (Number, 0.2),
        "amplitude_range": (list, [0.15, 0.9]),
        "region_range": (list, [50, 350]),
        "coverage_range": (list, [0.10, 0.60]),
        "filtering": (bool, True),
        "foreground": (bool, True),
        "extractor": (str, "backbone"),
        "chunk_size": (int, 16),
        "n_train_objects": (int, 6),
        "n_eval_objects": (int, 2),
        "n_object_tags": ((int, type(None)), None),
        "split_seed": (int, 0),
        "vocabulary": (OptionalStr, None),
    },
    "train": {
        "iterations": (int, 500),
        "batch_size": (int, 8),
        "lr": (Number, 1e-4),
        "weight_decay": (Number, 0.01),
        "adam_betas": (list, [0.9, 0.999]),
        "eps": (Number, 1e-8),
        "grad_clip": ((int, float, type(None)), 1.0),
    },
    "finetune": {
        "shots": (int, 4),
        "iterations": (int, FINETUNE_ITERATIONS),
        "checkpoint": (OptionalStr, None),
    },
    "eval": {
        "smoothing_sigma": (Number, 0.0),
        "save_maps": (bool, False),
    },
    "sweep": {
        "knob": (str, "threshold"),
        "values": ((list, type(None)), None),
    },
    "benchmark": {
        "seeds": (list, [0, 1, 2]),
        "ablations": (bool, False),
    },
    "paths": {
        "dataset": (OptionalStr, None),
        "eval_dataset": (OptionalStr, None),
        "checkpoint": (OptionalStr, None),
    },
}

TOP_LEVEL = {
    "seed": (int, 0),
    "out": (OptionalStr, None),
    "workers": (int, 1),
}


def _check_type(key: str, value, types):
    types = types if isinstance(types, tuple) else (types,)
    # bool is an int subclass; only accept it where bool is asked for
    if isinstance(value, bool) and bool not in types:
        raise ConfigurationError(f"'{key}' must be {_type_names(types)}, got a boolean")
    if not isinstance(value, types):
        raise ConfigurationError(f"'{key}' must be {_type_names(types)}, got {type(value).__name__} {value!r}")


def _type_names(types: tuple) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def default_document(seed: int = 0, out: Optional[str] = None, workers: int = 1) -> dict:
    document = {section: {key: copy.deepcopy(spec[1]) for key, spec in fields.items()} for section, fields in SCHEMA.items()}
    document.update({"seed": seed, "out": out, "workers": workers})
    return document


def _merge(document: dict, layer: dict, origin: str):
    for key, value in layer.items():
        if key in TOP_LEVEL:
            _check_type(key, value, TOP_LEVEL[key][0])
            document[key] = value
            continue
        if key not in SCHEMA:
            raise ConfigurationError(f"Unknown configuration section '{key}' in {origin}")
        if not isinstance(value, dict):
            raise ConfigurationError(f"Section '{key}' in {origin} must be an object")
        for field_name, field_value in value.items():
            if field_name not in SCHEMA[key]:
                raise ConfigurationError(f"Unknown configuration key '{key}.{field_name}' in {origin}")
            _check_type(f"{key}.{field_name}", field_value, SCHEMA[key][field_name][0])
            document[key][field_name] = field_value


def _nest(overrides: dict) -> dict:
    """{"train.lr": 1e-3, "seed": 3} -> {"train": {"lr": 1e-3}, "seed": 3}; None values are dropped"""
    nested: dict = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            nested.setdefault(section, {})[key] = value
        else:
            nested[dotted] = value
    return nested


@dataclass
class RunConfig:
    data: dict

    def __getitem__(self, section: str):
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def workers(self) -> int:
        return self.data["workers"]

    @property
    def out(self) -> Optional[Path]:
        return Path(self.data["out"]) if self.data["out"] else None

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted-key overrides applied, e.g. ``{"lora.rank": 32}``"""
        document = copy.deepcopy(self.data)
        _merge(document, _nest(overrides), "overrides")
        return RunConfig(document).validate()

    def backbone_config(self) -> vit.BackboneConfig:
        section = self.data["backbone"]
        explicit = {
            key: section[key]
            for key in ("image_size", "patch_size", "embed_dim", "num_blocks", "num_heads", "mlp_ratio")
            if section[key] is not None
        }
        return vit.preset_config(
            section["preset"], adapter_rank=self.data["lora"]["rank"], final_norm=section["final_norm"], **explicit
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.data["loss"])

    def datagen_config(self) -> DatagenConfig:
        section = self.data["datagen"]
        backbone = self.backbone_config()
        return DatagenConfig(
            image_size=backbone.image_size,
            patch_size=backbone.patch_size,
            threshold=float(section["threshold"]),
            forced_fail=float(section["forced_fail"]),
            amplitude_range=_pair(section, "amplitude_range"),
            region_range=_pair(section, "region_range"),
            coverage_range=_pair(section, "coverage_range"),
            filtering=section["filtering"],
            foreground=section["foreground"],
            extractor=section["extractor"],
            chunk_size=section["chunk_size"],
        )

    def train_config(self) -> TrainConfig:
        section = self.data["train"]
        return TrainConfig(
            iterations=section["iterations"],
            batch_size=section["batch_size"],
            lr=float(section["lr"]),
            weight_decay=float(section["weight_decay"]),
            adam_betas=_pair(self.data["train"], "adam_betas", "train"),
            eps=float(section["eps"]),
            seed=self.seed,
            freeze_backbone=self.data["backbone"]["mode"] != "scratch",
            grad_clip=section["grad_clip"],
            loss=self.loss_config(),
        )

    def validate(self):
        """Build every typed config once so validation errors surface before any work starts"""
        self.backbone_config()
        self.loss_config()
        self.datagen_config()
        self.train_config()
        if self.data["workers"] < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.data['workers']}")
        if self.data["datagen"]["split"] not in ("train", "eval"):
            raise ConfigurationError(f"datagen.split must be 'train' or 'eval', got '{self.data['datagen']['split']}'")
        if self.data["backbone"]["mode"] not in BACKBONE_MODES:
            raise ConfigurationError(f"backbone.mode must be one of {BACKBONE_MODES}, got '{self.data['backbone']['mode']}'")
        if self.data["lora"]["positions"] not in POSITION_PRESETS:
            raise ConfigurationError(
                f"lora.positions must be one of {sorted(POSITION_PRESETS)}, got '{self.data['lora']['positions']}'"
            )
        if not self.data["benchmark"]["seeds"] or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in self.data["benchmark"]["seeds"]
        ):
            raise ConfigurationError("benchmark.seeds must be a non-empty list of integers")
        return self


def _pair(section: dict, key: str, prefix: str = "datagen") -> tuple:
    value = section[key]
    if len(value) != 2 or not all(isinstance(v, Number) and not isinstance(v, bool) for v in value):
        raise ConfigurationError(f"{prefix}.{key} must be a pair of numbers, got {value!r}")
    return tuple(value)


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[dict] = None,
    defaults: Optional[dict] = None,
) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (flags win)"""
    document = default_document(**(defaults or {}))
    if path:
        try:
            layer = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigurationError(f"Could not read config file {path}: {e}") from e
        except ValueError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(layer, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        _merge(document, layer, str(path))
    _merge(document, _nest(overrides or {}), "command-line flags")
    return RunConfig(document).validate()
