"""Run configuration: one INI file with fixed sections and typed keys.

Unknown sections or keys are rejected. ``RunConfig.to_ini`` writes the fully
resolved configuration, defaults included, so a run can be repeated from it.

Example::

    [data]
    n_train = 500
    seed = 7

    [optim]
    fast_steps = 2000

    [run]
    out_dir = runs/desk
    seed = 0
"""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Any, Callable, Sequence

from .data import DataConfig
from .distill import DistillConfig
from .encoders import DualEncoderConfig, EncoderConfig
from .slow import DecoderConfig, SlowConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item: Callable) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(item(p.strip()) for p in text.split(",") if p.strip())
    return parse


def _strs(text: str) -> tuple[str, ...]:
    return _list(str)(text)


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _show(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_show(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_DATA, _ENC, _DEC = DataConfig(), EncoderConfig(), DecoderConfig()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "data": {
        "seed": (int, 7),
        "n_train": (int, _DATA.n_train),
        "n_val": (int, _DATA.n_val),
        "n_test": (int, _DATA.n_test),
        "grid": (int, _DATA.grid),
        "raster": (int, _DATA.raster),
        "min_objects": (int, _DATA.min_objects),
        "max_objects": (int, _DATA.max_objects),
        "shapes": (_strs, _DATA.shapes),
        "colors": (_strs, _DATA.colors),
        "sizes": (_strs, _DATA.sizes),
        "captions_per_scene": (int, _DATA.captions_per_scene),
        "twin_fraction": (float, _DATA.twin_fraction),
        "unique_gold": (_bool, _DATA.unique_gold),
        "max_caption_len": (int, _DATA.max_caption_len),
    },
    "model": {
        "encoder_widths": (_list(int), _ENC.widths),
        "d": (int, _ENC.d),
        "fusion_eps": (float, _ENC.eps),
        "target_resolution": (int, _ENC.target),
        "embed_dim": (int, 64),
        "d_model": (int, _DEC.d_model),
        "n_heads": (int, _DEC.n_heads),
        "n_layers": (int, _DEC.n_layers),
        "ffn_mult": (int, _DEC.ffn_mult),
        "share_embeddings": (_bool, _DEC.share_embeddings),
    },
    "optim": {
        "slow_lr": (float, 2e-3),
        "fast_lr": (float, 1e-2),
        "warmup": (int, 100),
        "clip_norm": (_optional_float, 10.0),
        "weight_decay": (float, 0.0),
        "slow_steps": (int, 2000),
        "slow_batch": (int, 16),
        "fast_steps": (int, 2000),
        "fast_batch": (int, 8),
    },
    "distill": {
        "tau": (float, 10.0),
        "alpha_over_tau2": (float, 0.001),
        "sweep_tau": (_list(float), (1.0, 10.0)),
        "sweep_alpha_over_tau2": (_list(float), (0.0, 0.1, 1.0, 10.0)),
    },
    "index": {
        "kind": (str, "exact"),
        "M": (int, 8),
        "Kc": (int, 256),
        "iters": (int, 25),
        "seed": (int, 0),
        "student": (str, "distilled"),
    },
    "pipeline": {
        "K": (int, 10),
        "beta": (float, 0.0),
        "split": (str, "test"),
        "precompute": (_bool, True),
        "curve_K": (_list(int), (1, 2, 5, 10, 20, 50)),
        "curve_beta": (_list(float), (0.0, 0.01, 0.1, 1.0)),
        "bench_warmup": (int, 3),
        "bench_queries": (int, 20),
        "top": (int, 10),
    },
    "run": {
        "out_dir": (str, "runs/default"),
        "seed": (int, 0),
        "timings": (_bool, True),
    },
}

CHOICES = {("index", "kind"): ("exact", "pq"), ("index", "student"): ("fast", "distilled"),
           ("pipeline", "split"): ("train", "val", "test")}


class Section:
    def __init__(self, name: str, values: dict[str, Any]):
        self._name, self._values = name, values

    def __getattr__(self, key: str) -> Any:
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(f"[{self._name}] has no key {key!r}") from None

    def items(self):
        return self._values.items()


class RunConfig:
    def __init__(self, values: dict[str, dict[str, Any]]):
        self.values = values
        for name, section in values.items():
            setattr(self, name, Section(name, section))

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str, overrides: Sequence[str] = (), source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys are case-sensitive (M, Kc, K)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
        raw: dict[str, dict[str, str]] = {s: dict(parser.items(s)) for s in parser.sections()}
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            raw.setdefault(section, {})[name] = value.strip()
        cfg = cls.defaults()
        for section, keys in raw.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, text_value in keys.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                conv = SCHEMA[section][key][0]
                try:
                    value = conv(text_value)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key} = {text_value!r}: {exc}") from None
                allowed = CHOICES.get((section, key))
                if allowed and value not in allowed:
                    raise ConfigError(f"[{section}] {key} must be one of {', '.join(allowed)}")
                cfg.values[section][key] = value
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "RunConfig":
        if path is None:
            return cls.parse("", overrides)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.parse(text, overrides, str(path))

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_show(v)}" for k, v in keys.items())
            lines.append("")
        return "\n".join(lines)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    # ------------------------------------------------------------ builders

    def data_config(self) -> DataConfig:
        kw = {k: v for k, v in self.values["data"].items() if k != "seed"}
        return DataConfig(**kw)

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        if len(m.encoder_widths) != 3:
            raise ConfigError("[model] encoder_widths needs three values")
        return EncoderConfig(raster=self.data.raster, widths=tuple(m.encoder_widths), d=m.d,
                             eps=m.fusion_eps, target=m.target_resolution)

    def slow_config(self, vocab_size: int) -> SlowConfig:
        m = self.model
        dec = DecoderConfig(vocab_size=vocab_size, d_model=m.d_model, n_heads=m.n_heads, n_layers=m.n_layers,
                            max_len=self.data.max_caption_len + 2, d_visual=m.d,
                            share_embeddings=m.share_embeddings, ffn_mult=m.ffn_mult)
        return SlowConfig(self.encoder_config(), dec)

    def fast_config(self, vocab_size: int) -> DualEncoderConfig:
        return DualEncoderConfig(self.encoder_config(), vocab_size, self.model.embed_dim)

    def train_config(self, kind: str, steps: int | None = None) -> TrainConfig:
        o = self.optim
        if kind == "slow":
            n_steps, batch, lr = o.slow_steps, o.slow_batch, o.slow_lr
        else:  # the plain and the distilled dual encoder share one schedule
            n_steps, batch, lr = o.fast_steps, o.fast_batch, o.fast_lr
        return TrainConfig(steps=n_steps if steps is None else steps, batch_size=batch, lr=lr,
                           warmup=o.warmup, seed=self.run.seed, clip_norm=o.clip_norm,
                           weight_decay=o.weight_decay, timings=self.run.timings)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.distill.tau, self.distill.alpha_over_tau2)
