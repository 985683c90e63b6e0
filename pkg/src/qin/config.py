"""Run configuration: typed defaults, flat ``section.key = value`` files and
command-line overrides (CLI > file > default)."""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .dataset import SyntheticConfig
from .model import FauConfig
from .rsu import RsuConfig
from .training import TrainConfig

CACHE_ENV = "QIN_CACHE_ROOT"
ALL_VARIANTS = ("QIN", "QIN_s", "QIN_id", "DIF_style", "SELF_ATTN_style", "DIN_style", "MEAN",
                "RSU_one", "RSU_SIM")


class UsageError(ValueError):
    """Bad configuration or missing input; maps to exit code 2."""


def _dc_defaults(cls):
    return {f.name: f.default for f in fields(cls)}


def defaults() -> dict:
    return {
        "data": {"source": "synthetic", "name": "", "raw": "", "meta": "", "seed": 0},
        "synthetic": _dc_defaults(SyntheticConfig),
        "train": _dc_defaults(TrainConfig),
        "model": {"variant": "QIN", **_dc_defaults(FauConfig)},
        "rsu": _dc_defaults(RsuConfig),
        "bench": {"N": 10_000, "M": 100, "D": 8, "K1": 50, "K2": 10, "trials": 5},
        "run": {
            "seeds": (0,),
            "variants": ALL_VARIANTS,
            "alphas": (0.0, 0.25, 0.5, 0.75, 1.0),
            "workers": 1,
            "out": "qin_runs",
            "checkpoint": "",
            "cache_root": "",
        },
    }


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from exc
    return raw


class RunConfig:
    """Sectioned settings; later ``set`` calls win."""

    def __init__(self):
        self.values = defaults()

    def set(self, key: str, raw):
        section, _, name = key.partition(".")
        if not name or section not in self.values or name not in self.values[section]:
            raise UsageError(f"unknown config key {key!r}")
        default = self.values[section][name]
        self.values[section][name] = _coerce(key, raw, default) if isinstance(raw, str) else raw

    def get(self, key: str):
        section, _, name = key.partition(".")
        return self.values[section][name]

    def load_file(self, path):
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'section.key = value'")
            key, value = line.split("=", 1)
            self.set(key.strip(), value)
        return self

    # -- typed views ---------------------------------------------------------

    def _build(self, cls, section, **extra):
        kw = {f.name: self.values[section][f.name] for f in fields(cls)}
        kw.update(extra)
        try:
            obj = cls(**kw)
            obj.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return obj

    def synthetic(self) -> SyntheticConfig:
        return self._build(SyntheticConfig, "synthetic")

    def train(self, seed=None) -> TrainConfig:
        extra = {} if seed is None else {"seed": int(seed)}
        return self._build(TrainConfig, "train", **extra)

    def fau(self) -> FauConfig:
        return self._build(FauConfig, "model")

    def rsu(self) -> RsuConfig:
        return self._build(RsuConfig, "rsu")

    def cache_root(self) -> Path:
        root = self.values["run"]["cache_root"] or os.environ.get(CACHE_ENV) or ".qin_cache"
        return Path(root)

    def dataset_name(self) -> str:
        d = self.values["data"]
        if d["name"]:
            return d["name"]
        if d["source"] == "synthetic":
            return f"synthetic-s{d['seed']}"
        return Path(d["raw"]).name.split(".")[0] or d["source"]

    def to_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                v = self.values[section][key]
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{section}.{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict:
    """Read a ``section.key = value`` document into a flat dict of strings."""
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
