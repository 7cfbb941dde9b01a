"""Experiment configuration.

A config is a JSON object of flat sections (``data``, ``noise``,
``noise_b``, ``model``, ``train``, ``denoise``, ``eval``) plus ``out_dir``
and ``seed``. Missing keys take their defaults, so every config
canonicalizes to a complete form that round-trips unchanged.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

from appdirs import user_data_dir
from jsonschema import ValidationError as SchemaError
from jsonschema import validate

from .denoising import DenoiseConfig, Scheme
from .error_handler import ConfigurationError, ValidationError
from .networks import PRESETS
from .noise_zoo import NoiseSpec, NoiseVariant
from .nr_generators import Relation, Transform, Variant
from .training import FilterMode, TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = Path(user_data_dir("nrgan")) / "runs" / "default"
CONFIG_PACKAGE = "nrgan.resources.configs"
ENV_OUT_DIR = "NRGAN_OUT_DIR"
ENV_SEED = "NRGAN_SEED"


@dataclass
class DataSettings:
    dataset: str = "synthetic_toy"  # synthetic_toy, image_folder
    image_folder: str = ""
    image_size: int = 8
    channels: int = 3
    num_train: int = 2000
    num_test: int = 2000
    noise_rate: float = 1.0
    mixed: bool = False
    mixture_rate: float = 0.0


@dataclass
class ModelSettings:
    variant: str = "SI1"
    preset: str = "tiny"
    z_dim: int = 128
    sigma_max: float = 1.0
    transforms: Optional[List[str]] = None  # None picks the variant default
    relation: Optional[str] = None


@dataclass
class EvalSettings:
    num_real: int = 2000
    num_fake: int = 2000
    extractor: str = "random_projection"  # random_projection, external
    extractor_seed: int = 0
    extractor_dim: int = 64
    extractor_path: str = ""
    grid_rows: int = 4
    grid_cols: int = 4
    eval_every: int = 0  # 0 evaluates at the end only


def _default_noise() -> NoiseSpec:
    return NoiseSpec.preset(NoiseVariant.A)


@dataclass
class ExperimentConfig:
    data: DataSettings = field(default_factory=DataSettings)
    noise: NoiseSpec = field(default_factory=_default_noise)
    noise_b: Optional[NoiseSpec] = None
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    out_dir: str = str(DEFAULT_OUT_DIR)
    seed: int = 0

    def validate(self) -> None:
        """Cross-section checks that the schema cannot express."""
        d = self.data
        if not 0.0 <= d.noise_rate <= 1.0:
            raise ValidationError(f"noise_rate must lie in [0, 1] (got {d.noise_rate})")
        if not 0.0 <= d.mixture_rate <= 1.0:
            raise ValidationError(f"mixture_rate must lie in [0, 1] (got {d.mixture_rate})")
        if d.mixed and self.noise_b is None:
            raise ValidationError("mixed datasets need a second noise spec (noise_b)")
        if d.mixed and d.noise_rate != 1.0:
            raise ValidationError(
                f"mixed datasets corrupt every image; noise_rate must be 1 (got {d.noise_rate})"
            )
        if d.num_train < 1:
            raise ValidationError("the dataset is empty (num_train must be >= 1)")
        if d.num_test < 2:
            raise ValidationError("num_test must be >= 2")
        if d.dataset == "image_folder" and not d.image_folder:
            raise ValidationError("dataset=image_folder needs data.image_folder")
        if self.model.preset != "oracle" and PRESETS[self.model.preset].image_size != d.image_size:
            raise ConfigurationError(
                f"preset '{self.model.preset}' generates {PRESETS[self.model.preset].image_size}px "
                f"images but data.image_size is {d.image_size}"
            )
        if self.eval.extractor == "external" and not self.eval.extractor_path:
            raise ValidationError("eval.extractor=external needs eval.extractor_path")
        self.train.validate()
        self.denoise.validate()
        self.train.check_compatible(self.model.variant, self.noise)
        if self.data.mixed and self.noise_b is not None:
            self.train.check_compatible(self.model.variant, self.noise_b)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data": asdict(self.data),
            "noise": self.noise.to_flat(),
            "noise_b": self.noise_b.to_flat() if self.noise_b else None,
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "denoise": self.denoise.to_dict(),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Validate ``data`` against the schema and fill in defaults."""
        _validate_config(data)

        def section(kind, key):
            return kind(**data.get(key, {}))

        model = section(ModelSettings, "model")
        if model.transforms is not None:
            model.transforms = sorted(model.transforms)
        noise_b = data.get("noise_b")
        config = cls(
            data=section(DataSettings, "data"),
            noise=NoiseSpec.from_flat(data["noise"]) if "noise" in data else _default_noise(),
            noise_b=NoiseSpec.from_flat(noise_b) if noise_b else None,
            model=model,
            train=TrainConfig.from_dict(data.get("train", {})),
            denoise=DenoiseConfig.from_dict(data.get("denoise", {})),
            eval=section(EvalSettings, "eval"),
            out_dir=data.get("out_dir", str(DEFAULT_OUT_DIR)),
            seed=data.get("seed", 0),
        )
        config.validate()
        return config


def _section_schema(kind, enums: Optional[Dict[str, List[str]]] = None) -> Dict[str, Any]:
    types = {int: "integer", float: "number", bool: "boolean", str: "string"}
    props: Dict[str, Any] = {}
    for f in fields(kind):
        default = f.default
        if f.type in ("Optional[List[str]]",):
            props[f.name] = {"type": ["array", "null"], "items": {"type": "string"}}
        elif f.type in ("Optional[str]",):
            props[f.name] = {"type": ["string", "null"]}
        else:
            props[f.name] = {"type": types[type(default)]}
        if enums and f.name in enums:
            nullable = isinstance(props[f.name]["type"], list)
            props[f.name]["enum"] = enums[f.name] + ([None] if nullable else [])
    return {"type": "object", "properties": props, "additionalProperties": False}


_NOISE_SCHEMA = {
    "type": "object",
    "properties": {"variant": {"type": "string", "enum": [v.value for v in NoiseVariant]}},
    "required": ["variant"],
}

_SCHEMA = {
    "type": "object",
    "properties": {
        "data": _section_schema(
            DataSettings, {"dataset": ["synthetic_toy", "image_folder"]}
        ),
        "noise": _NOISE_SCHEMA,
        "noise_b": {"oneOf": [_NOISE_SCHEMA, {"type": "null"}]},
        "model": _section_schema(
            ModelSettings,
            {
                "variant": [v.value for v in Variant],
                "preset": sorted(PRESETS) + ["oracle"],
                "relation": [r.value for r in Relation],
            },
        ),
        "train": _section_schema(TrainConfig, {"filter_mode": [m.value for m in FilterMode]}),
        "denoise": _section_schema(DenoiseConfig, {"scheme": [s.value for s in Scheme]}),
        "eval": _section_schema(EvalSettings, {"extractor": ["random_projection", "external"]}),
        "out_dir": {"type": "string"},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}
_SCHEMA["properties"]["model"]["properties"]["transforms"]["items"]["enum"] = [t.value for t in Transform]


def _validate_config(data: Dict[str, Any]) -> None:
    try:
        validate(data, _SCHEMA)
    except SchemaError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"invalid config at {where}: {exc.message} (schema)") from None


def canonicalize(data: Dict[str, Any]) -> Dict[str, Any]:
    """Complete form of ``data``; ``canonicalize(canonicalize(d)) == canonicalize(d)``."""
    return ExperimentConfig.from_dict(data).to_dict()


def apply_env_overrides(data: Dict[str, Any]) -> Dict[str, Any]:
    """Apply ``NRGAN_OUT_DIR`` and ``NRGAN_SEED`` on top of ``data``."""
    out = dict(data)
    if os.getenv(ENV_OUT_DIR):
        out["out_dir"] = os.environ[ENV_OUT_DIR]
    if os.getenv(ENV_SEED):
        try:
            out["seed"] = int(os.environ[ENV_SEED])
        except ValueError:
            raise ValidationError(f"{ENV_SEED} must be an integer") from None
    return out


def load_preset(name: str) -> Dict[str, Any]:
    """Raw config document of a packaged preset, e.g. ``toy_si1``."""
    filename = name if name.endswith(".json") else f"{name}.json"
    path = resources.files(CONFIG_PACKAGE).joinpath(filename)
    if not path.is_file():
        raise ValidationError(f"unknown config preset '{name}' (available: {available_presets()})")
    with path.open("r", encoding="utf-8") as f:
        return json.load(f)


def available_presets() -> List[str]:
    root = resources.files(CONFIG_PACKAGE)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_config_file(path: str | Path) -> Dict[str, Any]:
    """Raw config document stored at ``path``."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return data


def load(path: str | Path | None = None, preset: str | None = None) -> ExperimentConfig:
    """Load a config file (or packaged preset) with environment overrides applied."""
    if path is not None:
        data = read_config_file(path)
    elif preset is not None:
        data = load_preset(preset)
    else:
        data = {}
    return ExperimentConfig.from_dict(apply_env_overrides(data))


def save(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return path
