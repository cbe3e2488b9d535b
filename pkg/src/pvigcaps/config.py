"""Run configuration: ``key = value`` files with sections, plus ``--set`` overrides.

Precedence, lowest first: built-in defaults, the preset's values, the
config file, overrides.  Keys are unique across sections, so an override
may be written ``epochs=10`` or ``train.epochs=10``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .data import HAM_CLASSES, SplitSpec
from .exceptions import ConfigError
from .training import TrainConfig

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"height", "width", "in_channels", "stem_channels"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

# key -> (section, type); type is one of int, float, bool, str, "ints", "floats"
SCHEMA: dict[str, tuple[str, object]] = {
    "preset": ("model", str),
    "input_size": ("model", int),
    "dims": ("model", "ints"),
    "depths": ("model", "ints"),
    "ffn_ratio": ("model", int),
    "k": ("model", int),
    "num_heads": ("model", int),
    "head": ("model", str),
    "num_classes": ("model", int),
    "pos_embed": ("model", bool),
    "primary_dim": ("model", int),
    "capsule_dim": ("model", int),
    "routing_iters": ("model", int),
    "mlp_hidden": ("model", int),
    "epochs": ("train", int),
    "batch_size": ("train", int),
    "lr": ("train", float),
    "start_lr": ("train", float),
    "warmup_epochs": ("train", float),
    "beta1": ("train", float),
    "beta2": ("train", float),
    "eps": ("train", float),
    "weight_decay": ("train", float),
    "loss": ("train", str),
    "m_plus": ("train", float),
    "m_minus": ("train", float),
    "lam": ("train", float),
    "augment": ("train", bool),
    "train_acc": ("train", str),
    "seed": ("train", int),
    "precision": ("train", str),
    "synthetic": ("data", bool),
    "synthetic_per_class": ("data", int),
    "synthetic_noise": ("data", float),
    "metadata": ("data", str),
    "images": ("data", str),
    "fractions": ("split", "floats"),
    "split_seed": ("split", int),
    "out": ("run", str),
    "eval_split": ("run", str),
}
SECTIONS = ("model", "train", "data", "split", "run")

BASE_DEFAULTS = {
    "preset": "micro",
    "synthetic": True,
    "synthetic_per_class": 20,
    "synthetic_noise": 0.1,
    "metadata": "",
    "images": "",
    "fractions": (0.8, 0.1, 0.1),
    "out": "runs/latest",
    "eval_split": "val",
}

PRESET_TRAIN = {
    "tiny": {},
    # desk-scale: long enough to overfit small synthetic sets, no warmup so
    # short smoke runs stay valid
    "micro": {"epochs": 300, "warmup_epochs": 0.0, "train_acc": "eval"},
}


def _parse_value(raw: str, kind, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        name = kind if isinstance(kind, str) else kind.__name__
        raise ConfigError(f"{where}: expected {name}, got {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_file(path) -> dict[str, tuple[object, str]]:
    """Map key -> (value, location) for every assignment in the file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def parse_text(text: str, source: str = "<config>") -> dict[str, tuple[object, str]]:
    out: dict[str, tuple[object, str]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("[") and body.endswith("]"):
            section = body[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        expected = SCHEMA[key][0]
        if section is not None and section != expected:
            raise ConfigError(f"{where}: key {key!r} belongs in [{expected}], not [{section}]")
        out[key] = (_parse_value(raw, SCHEMA[key][1], where), where)
    return out


def parse_overrides(items) -> dict[str, tuple[object, str]]:
    out = {}
    for i, item in enumerate(items or (), 1):
        where = f"--set #{i} ({item})"
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
            if SCHEMA.get(key, (None,))[0] != section:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        out[key] = (_parse_value(raw, SCHEMA[key][1], where), where)
    return out


@dataclass
class RunConfig:
    values: dict
    model: ModelConfig
    train: TrainConfig
    split: SplitSpec
    sources: dict = field(default_factory=dict)

    @property
    def synthetic(self) -> bool:
        return bool(self.values["synthetic"])

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    def to_text(self) -> str:
        """A config file that reproduces this run."""
        lines = ["# resolved configuration"]
        for section in SECTIONS:
            lines.append(f"\n[{section}]")
            for key, (sec, _) in SCHEMA.items():
                if sec == section:
                    lines.append(f"{key} = {_format_value(self.values[key])}")
        return "\n".join(lines) + "\n"


def resolve(raw: dict[str, tuple[object, str]]) -> RunConfig:
    preset = raw.get("preset", (BASE_DEFAULTS["preset"], "default"))[0]
    try:
        model_defaults = ModelConfig.preset(preset)
    except ConfigError as exc:
        raise ConfigError(f"{raw.get('preset', (None, 'default'))[1]}: {exc}") from None
    values: dict = dict(BASE_DEFAULTS)
    values.update({k: v for k, v in model_defaults.to_dict().items() if k in _MODEL_FIELDS})
    values["input_size"] = model_defaults.height
    values.update(TrainConfig().to_dict())
    values.update(PRESET_TRAIN.get(preset, {}))
    sources = {k: "default" for k in values}
    for key, (value, where) in raw.items():
        values[key], sources[key] = value, where
    values.setdefault("split_seed", values["seed"])
    if "split_seed" not in raw:
        values["split_seed"] = values["seed"]
    if not values["synthetic"]:
        if "num_classes" not in raw:
            values["num_classes"] = len(HAM_CLASSES)
        elif values["num_classes"] != len(HAM_CLASSES):
            raise ConfigError(f"{sources['num_classes']}: a HAM10000-style dataset has {len(HAM_CLASSES)} classes")
        for key in ("metadata", "images"):
            if not values[key]:
                raise ConfigError(f"missing required key {key!r} in [data] (or pass --synthetic)")
    if values["eval_split"] not in ("train", "val", "test"):
        raise ConfigError(f"{sources['eval_split']}: eval_split must be train, val or test")

    model_kw = {k: values[k] for k in _MODEL_FIELDS}
    for key in ("dims", "depths"):
        model_kw[key] = tuple(model_kw[key])
    try:
        model = ModelConfig(height=values["input_size"], width=values["input_size"], **model_kw).validate()
        train = TrainConfig(**{k: values[k] for k in _TRAIN_FIELDS}).validate()
        split = SplitSpec(tuple(values["fractions"]), values["split_seed"])
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(values, model, train, split, sources)


def parse_config(path=None, overrides=None) -> RunConfig:
    """Resolve a run configuration from an optional file and ``--set`` overrides."""
    raw = parse_file(path) if path else {}
    raw.update(parse_overrides(overrides))
    return resolve(raw)
