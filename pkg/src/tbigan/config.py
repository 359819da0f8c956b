"""Experiment configuration: assembly, validation, and the flat key-value
config format (``section.field = value`` lines; flags override file values).

A resolved config written next to a run's outputs is sufficient to re-run
the experiment identically given the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .errors import UsageError
from .models import ArchitectureConfig
from .trainer import MODEL_TAGS, TrainConfig

QUERY_SPLITS = ("test", "validation")

# CLI option name -> (config key, type tag). 'int_tuple' is comma-separated.
_TOP_KEYS = {
    "dataset": str,
    "data_root": str,
    "model": str,
    "output_dir": str,
}
_EVAL_KEYS = {"k": int, "query_split": str}
_ARCH_KEYS = {
    "latent_dim": int,
    "image_shape": "int_tuple",
    "encoder_channels": "int_tuple",
    "generator_channels": "int_tuple",
    "dx_channels": "int_tuple",
    "dz_channels": "int_tuple",
    "dxz_channels": "int_tuple",
    "leaky_slope": float,
}
_TRAIN_KEYS = {
    "lambda": float,
    "warmup_epochs": int,
    "total_epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "n_per_class": int,
    "latent_dim": int,
    "seed": int,
    "hard_negatives": bool,
    "checkpoint_every": int,
    "model_tag": str,
    "deterministic": bool,
}


@dataclass
class ExperimentConfig:
    """One experiment: dataset, model variant, architecture, training, eval."""

    dataset: str
    data_root: str
    model_tag: str
    arch: ArchitectureConfig
    train: TrainConfig
    k: int = 9
    query_split: str = "test"
    output_dir: str = "runs/run"

    def __post_init__(self):
        if self.model_tag not in MODEL_TAGS:
            raise UsageError(f"unknown model {self.model_tag!r}; expected one of {MODEL_TAGS}")
        if self.model_tag != self.train.model_tag:
            raise UsageError("model and train.model_tag disagree")
        if self.query_split not in QUERY_SPLITS:
            raise UsageError(f"query_split must be one of {QUERY_SPLITS}")
        if self.k < 1:
            raise UsageError("k must be >= 1")

    def to_kv_text(self) -> str:
        lines = [
            f"dataset = {self.dataset}",
            f"data_root = {self.data_root}",
            f"model = {self.model_tag}",
            f"output_dir = {self.output_dir}",
            f"eval.k = {self.k}",
            f"eval.query_split = {self.query_split}",
        ]
        for name, kind in _ARCH_KEYS.items():
            lines.append(f"arch.{name} = {_format_value(getattr(self.arch, name), kind)}")
        for name, kind in _TRAIN_KEYS.items():
            attr = "lambda_triplet" if name == "lambda" else name
            lines.append(f"train.{name} = {_format_value(getattr(self.train, attr), kind)}")
        return "\n".join(lines) + "\n"


def _format_value(value, kind) -> str:
    if kind == "int_tuple":
        return ",".join(str(v) for v in value)
    if kind is bool:
        return "true" if value else "false"
    return str(value)


def _parse_value(raw: str, kind, key: str):
    try:
        if kind == "int_tuple":
            return tuple(int(v) for v in raw.split(","))
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise UsageError(f"bad value {raw!r} for config key {key}") from exc


def parse_kv_text(text: str) -> dict:
    """Parse the flat key-value format into a {dotted_key: typed value} dict."""
    schemas = {"": _TOP_KEYS, "eval": _EVAL_KEYS, "arch": _ARCH_KEYS, "train": _TRAIN_KEYS}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {lineno} is not 'key = value': {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        section, _, name = key.rpartition(".")
        schema = schemas.get(section)
        if schema is None or name not in schema:
            raise UsageError(f"unknown config key {key!r} on line {lineno}")
        values[key] = _parse_value(raw, schema[name], key)
    return values


def load_kv_file(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    return parse_kv_text(path.read_text())


def dataset_image_shape(dataset: str) -> tuple[int, int, int]:
    return (1, 16, 16) if dataset == "synthetic" else (3, 32, 32)


def assemble_experiment(options: dict) -> ExperimentConfig:
    """Build a full ExperimentConfig from a dotted-key option dict.

    Derives the architecture preset from the dataset's image shape, the
    latent size, and an optional width override; enforces the model-variant
    constraints (bigan pins lambda to 0, triplet has no warm-up and no
    adversarial lambda).
    """
    opts = dict(options)
    dataset = opts.get("dataset", "synthetic")
    model = opts.get("model", "triplet-bigan")
    if model not in MODEL_TAGS:
        raise UsageError(f"unknown model {model!r}; expected one of {MODEL_TAGS}")

    lam = opts.get("train.lambda")
    if model == "bigan" and lam not in (None, 0.0):
        raise UsageError("--lambda conflicts with --model bigan (lambda is pinned to 0)")
    if model == "triplet" and lam is not None:
        raise UsageError("--lambda conflicts with --model triplet (no adversarial term)")
    warmup = opts.get("train.warmup_epochs")
    if model == "triplet" and warmup not in (None, 0):
        raise UsageError("--warmup-epochs conflicts with --model triplet (no warm-up phase)")

    train_kwargs = {}
    for name in _TRAIN_KEYS:
        key = f"train.{name}"
        if key in opts and opts[key] is not None:
            train_kwargs["lambda_triplet" if name == "lambda" else name] = opts[key]
    train_kwargs["model_tag"] = model
    if model == "bigan":
        train_kwargs["lambda_triplet"] = 0.0
    if model == "triplet":
        train_kwargs["warmup_epochs"] = 0
    train = TrainConfig(**train_kwargs)

    arch_overrides = {k.split(".", 1)[1]: v for k, v in opts.items() if k.startswith("arch.") and v is not None}
    if set(arch_overrides) >= set(_ARCH_KEYS) - {"leaky_slope"}:
        arch = ArchitectureConfig(**{**arch_overrides, "latent_dim": train.latent_dim})
    else:
        image_shape = tuple(arch_overrides.get("image_shape", dataset_image_shape(dataset)))
        arch = ArchitectureConfig.preset(train.latent_dim, image_shape, width=opts.get("width"))

    return ExperimentConfig(
        dataset=dataset,
        data_root=str(opts.get("data_root", "") or ""),
        model_tag=model,
        arch=arch,
        train=train,
        k=opts.get("eval.k") or 9,
        query_split=opts.get("eval.query_split") or "test",
        output_dir=str(opts.get("output_dir", "runs/run")),
    )
