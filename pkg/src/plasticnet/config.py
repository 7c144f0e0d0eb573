"""Flat key=value run configuration: file parsing, defaults, overrides.

Every key has a default; unknown keys are rejected by name. The same
schema feeds the config-file parser and the CLI flag generator, so flags
and file keys can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .data import (LabeledDataset, exponential_imbalance_counts, ingest_idx,
                   subsample_to_profile, synth_gaussian_mixture)
from .errors import ConfigError, InputError
from .plasticity import PlasticityConfig
from .trainer import TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> list[int]:
    raw = raw.strip()
    if not raw:
        return []
    try:
        return [int(tok) for tok in raw.split(",")]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated ints, got {raw!r}") from exc


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    help: str


SCHEMA: dict[str, Key] = {
    "epochs": Key(60, int, "training epochs"),
    "batch_size": Key(64, int, "mini-batch size"),
    "optimizer": Key("adamw", str, "adamw or sgd"),
    "lr": Key(1e-3, float, "learning rate"),
    "beta1": Key(0.9, float, "adamw first-moment decay"),
    "beta2": Key(0.999, float, "adamw second-moment decay"),
    "momentum": Key(0.9, float, "sgd momentum"),
    "weight_decay": Key(1e-4, float, "weight decay"),
    "class_weighted_loss": Key(False, _parse_bool, "weight the loss by class"),
    "criterion": Key("accumulated_gradient", str,
                     "accumulated_gradient | final_batch_gradient | l1_norm | random"),
    "ledger_mode": Key("mean", str, "mean or ema score aggregation"),
    "ema_decay": Key(0.9, float, "ema decay when ledger_mode=ema"),
    "magnitude_norm": Key("l2", str, "l2 or l1 gradient block norm"),
    "alpha": Key(0.3, float, "fraction of each layer modified per event"),
    "e_mod": Key(10, int, "epochs between modification events"),
    "sigma": Key(0.1, float, "std of norm-parameter perturbation"),
    "nam": Key(True, _parse_bool, "enable structural modification"),
    "gr": Key(True, _parse_bool, "enable gradient reweighting"),
    "ws": Key(True, _parse_bool, "enable weight scaling"),
    "gda": Key(True, _parse_bool, "enable norm randomization for new neurons"),
    "init_scheme": Key("fresh", str, "fresh or clone incoming weights"),
    "arch": Key("mlp", str, "mlp or cnn"),
    "hidden_widths": Key([128, 64], _parse_int_list, "mlp hidden layer widths"),
    "channel_widths": Key([8, 16], _parse_int_list, "cnn block channel counts"),
    "seed": Key(0, int, "run seed (init, data order, surgery)"),
    "score_dump": Key("", str, "CSV path for per-event neuron scores"),
    "dataset": Key("synth", str, "synth or idx:<images>,<labels>[,<test_images>,<test_labels>]"),
    "num_classes": Key(10, int, "classes in the synthetic mixture"),
    "dim": Key(20, int, "synthetic feature dimension"),
    "separation": Key(3.0, float, "synthetic class-mean separation"),
    "n_max": Key(500, int, "samples in the largest class"),
    "p": Key(100.0, float, "imbalance factor (largest/smallest class)"),
    "test_per_class": Key(100, int, "balanced test samples per class"),
    "data_seed": Key(-1, int, "dataset seed; -1 follows the run seed"),
}


def default_values() -> dict[str, Any]:
    return {key: spec.default for key, spec in SCHEMA.items()}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    try:
        return SCHEMA[key].parse(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_file(path) -> dict[str, Any]:
    """Read `key = value` lines; '#' starts a comment."""
    values: dict[str, Any] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
            key, raw = (part.strip() for part in text.split("=", 1))
            values[key] = parse_value(key, raw)
    return values


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then config file, then explicit overrides."""
    values = default_values()
    for layer in (file_values or {}, overrides or {}):
        for key, val in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = val
    return values


def make_train_config(values: dict) -> TrainConfig:
    plast = PlasticityConfig(
        alpha=values["alpha"], e_mod=values["e_mod"], sigma=values["sigma"],
        nam=values["nam"], gr=values["gr"], ws=values["ws"], gda=values["gda"],
        init_scheme=values["init_scheme"])
    return TrainConfig(
        epochs=values["epochs"], batch_size=values["batch_size"],
        optimizer=values["optimizer"], lr=values["lr"], beta1=values["beta1"],
        beta2=values["beta2"], momentum=values["momentum"],
        weight_decay=values["weight_decay"],
        class_weighted_loss=values["class_weighted_loss"],
        criterion=values["criterion"], ledger_mode=values["ledger_mode"],
        ema_decay=values["ema_decay"], magnitude_norm=values["magnitude_norm"],
        arch=values["arch"], hidden_widths=tuple(values["hidden_widths"]),
        channel_widths=tuple(values["channel_widths"]), plasticity=plast,
        seed=values["seed"], score_dump=values["score_dump"])


def _split_idx_spec(spec: str) -> list[str]:
    paths = [p for p in spec.split(",") if p]
    if len(paths) not in (2, 4):
        raise ConfigError(
            f"dataset=idx needs 2 or 4 comma-separated paths, got {len(paths)}")
    return paths


def _holdout_balanced(dataset: LabeledDataset, per_class: int,
                      rng: np.random.Generator) -> tuple[LabeledDataset, LabeledDataset]:
    test_idx = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size <= per_class:
            raise InputError(f"class {c} too small for a {per_class}-sample holdout")
        test_idx.append(rng.choice(idx, size=per_class, replace=False))
    test_idx = np.concatenate(test_idx)
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    train = LabeledDataset(dataset.features[mask], dataset.labels[mask],
                           dataset.num_classes, split="train")
    test = LabeledDataset(dataset.features[test_idx], dataset.labels[test_idx],
                          dataset.num_classes, split="test")
    return train, test


def make_dataset(values: dict) -> tuple[LabeledDataset, LabeledDataset]:
    """Build the (train, test) pair described by the config values."""
    seed = values["data_seed"] if values["data_seed"] >= 0 else values["seed"]
    spec = values["dataset"]
    if spec == "synth":
        counts = exponential_imbalance_counts(values["n_max"], values["num_classes"],
                                              values["p"])
        return synth_gaussian_mixture(values["num_classes"], values["dim"],
                                      values["separation"], counts, seed=seed,
                                      test_per_class=values["test_per_class"])
    if spec.startswith("idx:"):
        paths = _split_idx_spec(spec[len("idx:"):])
        pool = ingest_idx(paths[0], paths[1])
        if len(paths) == 4:
            test_all = ingest_idx(paths[2], paths[3])
            test = LabeledDataset(test_all.features, test_all.labels,
                                  pool.num_classes, split="test")
            train_pool = pool
        else:
            train_pool, test = _holdout_balanced(
                pool, values["test_per_class"], np.random.default_rng(seed))
        counts = exponential_imbalance_counts(values["n_max"], train_pool.num_classes,
                                              values["p"])
        train = subsample_to_profile(train_pool, counts, seed=seed)
        return train, test
    raise ConfigError(f"unknown dataset spec {spec!r}")
