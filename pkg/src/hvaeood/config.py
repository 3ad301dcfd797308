"""Flat key=value run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .distributions import FreeBitsSchedule
from .model import HvaeConfig


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable config file."""


def _parse_int_list(text: str):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(tok) for tok in text.split(","))


_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "output_dir")

# key -> (parser, default); None default means "derived later" or optional
_SCHEMA = {
    "train_images": (str, None),
    "train_labels": (str, None),
    "test_images": (str, None),
    "test_labels": (str, None),
    "dataset_name": (str, None),
    "output_dir": (str, "out"),
    "num_layers": (int, 3),
    "latent_dims": (_parse_int_list, (64, 32, 16)),
    "hidden_dim": (int, 256),
    "blocks_per_transform": (int, 2),
    "epochs": (int, 200),
    "batch_size": (int, 128),
    "learning_rate": (float, 3e-4),
    "seed": (int, 0),
    "free_bits": (float, 2.0),
    "warmup_epochs": (int, None),
    "free_bits_constant_epochs": (int, None),
    "free_bits_anneal_epochs": (int, None),
    "eval_ks": (_parse_int_list, (1, 2)),
    "eval_ls": (_parse_int_list, ()),
    "importance_samples": (int, 1),
    "flag_quantile": (float, 0.95),
    "eval_examples": (int, 0),
}


@dataclass
class RunConfig:
    values: dict
    base_dir: Path

    def __getattr__(self, key):
        values = object.__getattribute__(self, "values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    def path(self, key: str) -> Path | None:
        value = self.values.get(key)
        if value is None:
            return None
        return (self.base_dir / value).resolve()

    def hvae_config(self) -> HvaeConfig:
        v = self.values
        tenth = max(1, v["epochs"] // 10)
        schedule = FreeBitsSchedule(
            lambda_nats=v["free_bits"],
            constant_epochs=_or(v["free_bits_constant_epochs"], tenth),
            anneal_epochs=_or(v["free_bits_anneal_epochs"], tenth),
        )
        return HvaeConfig(
            num_layers=v["num_layers"],
            latent_dims=v["latent_dims"],
            hidden_dim=v["hidden_dim"],
            blocks_per_transform=v["blocks_per_transform"],
            free_bits=schedule,
            warmup_epochs=_or(v["warmup_epochs"], tenth),
            learning_rate=v["learning_rate"],
            batch_size=v["batch_size"],
            epochs=v["epochs"],
            seed=v["seed"],
        )


def _or(value, default):
    return default if value is None else value


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read a key=value file (# comments) and apply --set style overrides.

    Unknown keys are an error. Relative paths resolve against the config
    file's directory (or the working directory if no file was given).
    """
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        base_dir = path.parent.resolve()
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = stripped.partition("=")
            _apply(values, key.strip(), raw.strip(), f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        _apply(values, key.strip(), raw.strip(), "--set")
    return RunConfig(values=values, base_dir=base_dir)


def _apply(values: dict, key: str, raw: str, where: str) -> None:
    if key not in _SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    parser, _ = _SCHEMA[key]
    try:
        values[key] = parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc
