"""Flat key = value experiment configuration.

One assignment per line, `#` starts a comment, `explainer` and `metric` may
repeat to build lists. The RFXG_SEED environment variable, when set, wins
over the seed in the file so batch drivers can fan a config out across seeds
without editing it.
"""

import os
from dataclasses import dataclass, field, replace

from .core import MaskFill, DEFAULT_ALPHAS

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "load_config"]

KNOWN_EXPLAINERS = (
    "gradient", "integrated-gradients", "gradcam", "occlusion", "random",
)
KNOWN_METRICS = ("ccs", "cgc", "pgs", "cgs", "deletion")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output: str = "out"
    dataset: str = "synthetic"       # "synthetic" or dir:<path>
    eval_images: int = 200
    model: str = "train"             # train | checkpoint:<path> | remote:<command>
    hierarchy: str = "synthetic"     # "synthetic" or a file path
    explainers: tuple = ("gradient", "integrated-gradients", "gradcam",
                         "occlusion", "random")
    metrics: tuple = KNOWN_METRICS
    schedule: tuple = DEFAULT_ALPHAS
    fill: MaskFill = field(default_factory=MaskFill.black)
    ig_steps: int = 64
    occlusion_patch: int = 4
    occlusion_stride: int = 2
    overlays: int = 8                # images that get overlay renderings
    min_group_size: int = 5
    train_epochs: int = 40
    train_batch: int = 16
    train_lr: float = 0.1
    train_images_per_class: int = 40

    def __post_init__(self):
        if self.eval_images < 0:
            raise ConfigError("eval-images must be >= 0")
        if self.overlays < 0:
            raise ConfigError("overlays must be >= 0")
        for name in self.explainers:
            if name not in KNOWN_EXPLAINERS:
                raise ConfigError(f"unknown explainer {name!r}")
        if not self.explainers:
            raise ConfigError("at least one explainer is required")
        for name in self.metrics:
            if name not in KNOWN_METRICS:
                raise ConfigError(f"unknown metric {name!r}")
        if not self.metrics:
            raise ConfigError("at least one metric is required")


_INT_KEYS = {
    "seed": "seed",
    "eval-images": "eval_images",
    "ig-steps": "ig_steps",
    "occlusion-patch": "occlusion_patch",
    "occlusion-stride": "occlusion_stride",
    "overlays": "overlays",
    "min-group-size": "min_group_size",
    "train-epochs": "train_epochs",
    "train-batch": "train_batch",
    "train-images-per-class": "train_images_per_class",
}
_FLOAT_KEYS = {"train-lr": "train_lr"}
_STR_KEYS = {
    "output": "output",
    "dataset": "dataset",
    "model": "model",
    "hierarchy": "hierarchy",
}


def parse_config(text):
    """Parse config text into an ExperimentConfig."""
    fields = {}
    explainers = []
    metrics = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        if key == "explainer":
            explainers.append(value)
        elif key == "metric":
            metrics.append(value)
        elif key in _INT_KEYS:
            try:
                fields[_INT_KEYS[key]] = int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} needs an integer")
        elif key in _FLOAT_KEYS:
            try:
                fields[_FLOAT_KEYS[key]] = float(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} needs a number")
        elif key in _STR_KEYS:
            fields[_STR_KEYS[key]] = value
        elif key == "fill":
            try:
                fields["fill"] = MaskFill.parse(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}")
        elif key == "schedule":
            try:
                alphas = tuple(float(v) for v in value.split(","))
            except ValueError:
                raise ConfigError(f"line {lineno}: schedule needs comma floats")
            fields["schedule"] = alphas
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if explainers:
        fields["explainers"] = tuple(dict.fromkeys(explainers))
    if metrics:
        fields["metrics"] = tuple(dict.fromkeys(metrics))
    try:
        cfg = ExperimentConfig(**fields)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    return _apply_env(cfg)


def _apply_env(cfg):
    env = os.environ.get("RFXG_SEED")
    if env is None:
        return cfg
    try:
        seed = int(env)
    except ValueError:
        raise ConfigError(f"RFXG_SEED must be an integer, got {env!r}")
    return replace(cfg, seed=seed)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    cfg = parse_config(text)
    _check_paths(cfg)
    return cfg


def _check_paths(cfg):
    """Referenced files must exist before the run starts, not mid-flight."""
    if cfg.dataset.startswith("dir:"):
        path = cfg.dataset[4:]
        if not os.path.isdir(path):
            raise ConfigError(f"dataset directory {path!r} does not exist")
    elif cfg.dataset != "synthetic":
        raise ConfigError(f"dataset must be synthetic or dir:<path>, "
                          f"got {cfg.dataset!r}")
    if cfg.model.startswith("checkpoint:"):
        path = cfg.model[len("checkpoint:"):]
        if not os.path.isfile(path):
            raise ConfigError(f"checkpoint {path!r} does not exist")
    elif cfg.model != "train" and not cfg.model.startswith("remote:"):
        raise ConfigError(f"model must be train, checkpoint:<path>, or "
                          f"remote:<command>, got {cfg.model!r}")
    if cfg.hierarchy != "synthetic" and not os.path.isfile(cfg.hierarchy):
        raise ConfigError(f"hierarchy file {cfg.hierarchy!r} does not exist")
