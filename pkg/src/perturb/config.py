"""Run configuration: INI-style files mapped onto the dataclass configs.

Every key is optional (defaults below match the shipped experiment
defaults); unknown sections or keys are rejected by name rather than
ignored, so typos fail loudly.  ``lambda`` and ``alpha`` are the file
keys for the clustering grid/intensity weights.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .clustering import ClusterConfig
from .data import AugmentConfig, Dataset, load_dataset_dir
from .models import ModelSpec
from .synthetic import make_glyph_dataset, occlude_regions
from .training import RlrpConfig, TrainConfig

ENV_DATA_DIR = "PERTURB_DATA_DIR"


class ConfigError(Exception):
    """Unknown key/section or unparseable value; message names the culprit."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "dir"
    dir: str = ""
    n_train: int = 3000
    n_val: int = 600
    n_test: int = 600
    data_seed: int = 0
    occlude_eval: bool = False  # synthetic only: swap the test split for its occluded variant

    def __post_init__(self):
        if self.source not in ("synthetic", "dir"):
            raise ConfigError(f"data.source must be 'synthetic' or 'dir', got {self.source!r}")


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    pool_after: tuple[int, ...] = (1, 2, 3)
    attention_after: tuple[int, ...] = (2,)
    attention_kernel: int = 7


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def attention_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(
            variant="attention_classifier",
            conv_channels=m.conv_channels,
            kernel_size=m.kernel_size,
            pool_after=m.pool_after,
            attention_after=m.attention_after,
            attention_kernel=m.attention_kernel,
        )

    def predictor_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(
            variant="predictor",
            conv_channels=m.conv_channels,
            kernel_size=m.kernel_size,
            pool_after=m.pool_after,
            attention_after=(),
            attention_kernel=m.attention_kernel,
        )

    def load_dataset(self) -> Dataset:
        d = self.data
        if d.source == "synthetic":
            ds = make_glyph_dataset(n_train=d.n_train, n_val=d.n_val, n_test=d.n_test, seed=d.data_seed)
            if d.occlude_eval:
                ds = Dataset(
                    ds.train_images, ds.train_labels,
                    ds.val_images, ds.val_labels,
                    occlude_regions(ds.test_images, seed=d.data_seed), ds.test_labels,
                )
            return ds
        if d.occlude_eval:
            raise ConfigError("data.occlude_eval is only defined for the synthetic source")
        path = d.dir or os.environ.get(ENV_DATA_DIR, "")
        if not path:
            raise ConfigError(f"data.dir is empty and ${ENV_DATA_DIR} is not set")
        base = os.environ.get(ENV_DATA_DIR)
        if base and not os.path.isabs(path) and d.dir:
            path = os.path.join(base, path)
        return load_dataset_dir(path)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip() != "")
        if kind == "fill":
            return "mean" if raw == "mean" else float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {where} (expected {kind})") from None
    raise AssertionError(kind)


_SCHEMA = {
    "data": {
        "source": "str", "dir": "str", "n_train": "int", "n_val": "int", "n_test": "int",
        "data_seed": "int", "occlude_eval": "bool",
    },
    "model": {
        "conv_channels": "ints", "kernel_size": "int", "pool_after": "ints",
        "attention_after": "ints", "attention_kernel": "int",
    },
    "train": {
        "epochs": "int", "batch_size": "int", "lr0": "float", "momentum": "float",
        "nesterov": "bool", "weight_decay": "float", "seed": "int", "augment": "bool",
        "workers": "int", "eval_batch_size": "int", "attention_batch_size": "int",
    },
    "rlrp": {"factor": "float", "patience": "int", "min_lr": "float", "threshold": "float"},
    "augment": {
        "flip_prob": "float", "crop_pad": "int", "erase_prob": "float",
        "erase_area_lo": "float", "erase_area_hi": "float",
        "erase_aspect_lo": "float", "erase_aspect_hi": "float",
    },
    "cluster": {
        "k": "int", "lambda": "float", "alpha": "float", "max_iter": "int",
        "tol": "float", "restarts": "int", "seed": "int",
    },
    "mask": {"prob": "float", "fill": "fill"},
}


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            kind = _SCHEMA[section].get(key)
            if kind is None:
                raise ConfigError(f"{origin}: unknown key {key!r} in section [{section}]")
            values[section][key] = _parse(kind, raw, f"[{section}] {key}")

    def sec(name):
        return values.get(name, {})

    def pick(section, dataclass_type, rename=None, **extra):
        kwargs = dict(sec(section))
        for old, new in (rename or {}).items():
            if old in kwargs:
                kwargs[new] = kwargs.pop(old)
        kwargs.update(extra)
        try:
            return dataclass_type(**kwargs)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{origin}: invalid [{section}] settings: {exc}") from exc

    data = pick("data", DataConfig)
    model = pick("model", ModelConfig)
    rlrp = pick("rlrp", RlrpConfig)
    cluster = pick("cluster", ClusterConfig, rename={"lambda": "grid_weight", "alpha": "intensity_weight"})
    aug_raw = dict(sec("augment"))
    aug_kwargs = {}
    for base in ("erase_area", "erase_aspect"):
        lo, hi = aug_raw.pop(f"{base}_lo", None), aug_raw.pop(f"{base}_hi", None)
        if lo is not None or hi is not None:
            default = AugmentConfig().__getattribute__(base)
            aug_kwargs[base] = (lo if lo is not None else default[0], hi if hi is not None else default[1])
    aug_kwargs.update(aug_raw)
    try:
        augment = AugmentConfig(**aug_kwargs)
    except Exception as exc:
        raise ConfigError(f"{origin}: invalid [augment] settings: {exc}") from exc
    train_raw = dict(sec("train"))
    augment_enabled = train_raw.pop("augment", True)
    mask_raw = dict(sec("mask"))
    try:
        train = TrainConfig(
            **train_raw,
            augment_enabled=augment_enabled,
            augment=augment,
            rlrp=rlrp,
            cluster=cluster,
            mask_prob=mask_raw.get("prob", TrainConfig.mask_prob),
            fill_value=mask_raw.get("fill", TrainConfig.fill_value),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{origin}: invalid [train] settings: {exc}") from exc
    return RunConfig(data=data, model=model, train=train)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), origin=str(p))


def render_config(cfg: RunConfig) -> str:
    """Serialize every setting explicitly (load(render(cfg)) == cfg)."""
    t = cfg.train
    a = t.augment
    c = t.cluster
    r = t.rlrp
    d = cfg.data
    m = cfg.model

    def ints(v):
        return ",".join(str(i) for i in v)

    lines = [
        "[data]",
        f"source = {d.source}",
        f"dir = {d.dir}",
        f"n_train = {d.n_train}",
        f"n_val = {d.n_val}",
        f"n_test = {d.n_test}",
        f"data_seed = {d.data_seed}",
        f"occlude_eval = {str(d.occlude_eval).lower()}",
        "",
        "[model]",
        f"conv_channels = {ints(m.conv_channels)}",
        f"kernel_size = {m.kernel_size}",
        f"pool_after = {ints(m.pool_after)}",
        f"attention_after = {ints(m.attention_after)}",
        f"attention_kernel = {m.attention_kernel}",
        "",
        "[train]",
        f"epochs = {t.epochs}",
        f"batch_size = {t.batch_size}",
        f"lr0 = {t.lr0!r}",
        f"momentum = {t.momentum!r}",
        f"nesterov = {str(t.nesterov).lower()}",
        f"weight_decay = {t.weight_decay!r}",
        f"seed = {t.seed}",
        f"augment = {str(t.augment_enabled).lower()}",
        f"workers = {t.workers}",
        f"eval_batch_size = {t.eval_batch_size}",
        f"attention_batch_size = {t.attention_batch_size}",
        "",
        "[rlrp]",
        f"factor = {r.factor!r}",
        f"patience = {r.patience}",
        f"min_lr = {r.min_lr!r}",
        f"threshold = {r.threshold!r}",
        "",
        "[augment]",
        f"flip_prob = {a.flip_prob!r}",
        f"crop_pad = {a.crop_pad}",
        f"erase_prob = {a.erase_prob!r}",
        f"erase_area_lo = {a.erase_area[0]!r}",
        f"erase_area_hi = {a.erase_area[1]!r}",
        f"erase_aspect_lo = {a.erase_aspect[0]!r}",
        f"erase_aspect_hi = {a.erase_aspect[1]!r}",
        "",
        "[cluster]",
        f"k = {c.k}",
        f"lambda = {c.grid_weight!r}",
        f"alpha = {c.intensity_weight!r}",
        f"max_iter = {c.max_iter}",
        f"tol = {c.tol!r}",
        f"restarts = {c.restarts}",
        f"seed = {c.seed}",
        "",
        "[mask]",
        f"prob = {t.mask_prob!r}",
        f"fill = {t.fill_value if isinstance(t.fill_value, str) else repr(t.fill_value)}",
        "",
    ]
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(render_config(cfg))


def default_config() -> RunConfig:
    return RunConfig()
