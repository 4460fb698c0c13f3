"""Named presets, YAML config files and ``key=value`` overrides."""

import copy
import hashlib
import json
import os
from dataclasses import fields

import yaml

from advcritic import data
from advcritic.defense import TrainConfig


class ConfigError(ValueError):
    pass


MNIST5K = {
    "dir": "data/mnist5k",
    "images": "images-idx3-ubyte.gz",
    "labels": "labels-idx1-ubyte.gz",
    "test_images": None,
    "test_labels": None,
    "split": [0.8, 0.0, 0.2],
    "split_seed": 0,
    "train_limit": None,
}

MNIST_FULL = {
    "dir": "data/mnist",
    "images": "train-images-idx3-ubyte.gz",
    "labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
    # 5000 of the 60000 training images held out for validation
    "split": [55 / 60, 5 / 60, 0.0],
    "split_seed": 0,
    "train_limit": None,
}

_MLP = {"architecture": "mlp", "hidden": [1200, 1200, 1200], "lam": 0.5}
_LENET = {"architecture": "lenet5", "hidden": [], "lam": 0.1}

PRESETS = {
    "mnist-mlp-paper": {"train": dict(_MLP, epochs=100), "data": MNIST_FULL},
    "mnist-lenet5-paper": {"train": dict(_LENET, epochs=100), "data": MNIST_FULL},
    "mnist-mlp-desk": {"train": dict(_MLP, epochs=10), "data": MNIST5K},
    "mnist-lenet5-desk": {"train": dict(_LENET, epochs=10), "data": MNIST5K},
}
DEFAULT_PRESET = "mnist-mlp-desk"

_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_TRAIN_KEYS = set(_TRAIN_FIELDS)


def _coerce(name, value):
    # YAML 1.1 reads "1e-3" as a string; cast by the field's default type
    default = _TRAIN_FIELDS[name].default
    if isinstance(value, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            return type(default)(float(value)) if isinstance(default, float) else int(value)
        except ValueError as exc:
            raise ConfigError(f"train.{name}: expected a number, got {value!r}") from exc
    return value


def base_config(preset=DEFAULT_PRESET):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    doc = copy.deepcopy(PRESETS[preset])
    doc["preset"] = preset
    return doc


def _merge(dst, src):
    for key, val in src.items():
        if isinstance(val, dict) and isinstance(dst.get(key), dict):
            _merge(dst[key], val)
        else:
            dst[key] = copy.deepcopy(val)


def parse_override(text):
    """``train.lam=0.3`` -> (["train", "lam"], 0.3); the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad value in override {text!r}: {exc}") from exc
    return key.strip().split("."), value


def resolve(preset=None, path=None, overrides=()):
    """Preset, then config file, then overrides (later wins)."""
    file_doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                file_doc = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(file_doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
    doc = base_config(preset or file_doc.get("preset", DEFAULT_PRESET))
    _merge(doc, file_doc)
    for item in overrides:
        keys, value = parse_override(item) if isinstance(item, str) else item
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {'.'.join(keys)} crosses a scalar")
        node[keys[-1]] = value
    train_config(doc)
    doc["train"] = {k: _coerce(k, v) for k, v in doc.get("train", {}).items()}
    return doc


def train_config(doc):
    section = dict(doc.get("train", {}))
    unknown = set(section) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    section = {k: _coerce(k, v) for k, v in section.items()}
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _path(section, key):
    name = section.get(key)
    if name is None:
        return None
    return name if os.path.isabs(name) else os.path.join(section.get("dir", "."), name)


def load_datasets(doc):
    """(train, val, test) datasets described by the ``data`` section."""
    sec = doc.get("data", {})
    try:
        full = data.load_idx(_path(sec, "images"), _path(sec, "labels"), split="train")
        fractions = sec.get("split", [1.0, 0.0, 0.0])
        train, val, test = data.split(full, fractions, sec.get("split_seed", 0))
        if sec.get("test_images"):
            test = data.load_idx(
                _path(sec, "test_images"), _path(sec, "test_labels"), split="test"
            )
    except (OSError, data.DataError) as exc:
        raise ConfigError(f"cannot load data: {exc}") from exc
    limit = sec.get("train_limit")
    if limit:
        train = train.head(int(limit))
    return train, val, test


def fingerprint(doc):
    """Stable hash of a resolved config."""
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def dump(doc, path):
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
