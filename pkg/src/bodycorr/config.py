"""Flat ``key = value`` run configuration with dotted section prefixes."""
import hashlib
from dataclasses import fields

import numpy as np

from .network import NetConfig, paper_config


class ConfigError(ValueError):
    pass


def _net_defaults(cfg):
    return {f"net.{f.name}": getattr(cfg, f.name) for f in fields(NetConfig)}


DESK = {
    "run.preset": "desk",
    "run.seed": 0,
    "run.out_dir": "run",
    "body.density": 32.0,
    "body.shape_variation": 0.0,
    "poses.train": 8,
    "poses.heldout": 1,
    "poses.scale": 0.6,
    "segment.k": 20,
    "segment.candidates": 20,
    "segment.max_count": 5,
    "segment.initial_seeds": 5,
    "render.views": 16,
    "render.size": 64,
    "render.fov": float(np.pi / 3),
    "render.body_fraction": 0.5,
    "render.noise": 0.0,
    "filter.threshold": 0.10,
    "eval.radii": "1,2,5,10,20",
    "eval.geodesic": False,
    **_net_defaults(NetConfig()),
    # an identity output trains markedly faster at desk scale
    "net.final_activation": "idn",
}

PAPER = {
    **DESK,
    "run.preset": "paper",
    "segment.k": 500,
    "segment.candidates": 100,
    "segment.max_count": 10,
    "render.views": 144,
    "render.size": 512,
    **_net_defaults(paper_config()),
}

PRESETS = {"desk": DESK, "paper": PAPER}

# keys each stage depends on (upstream stages are folded in by the pipeline)
STAGE_KEYS = {
    "synth": ("run.seed", "body.", "poses."),
    "segment": ("segment.",),
    "render": ("render.",),
    "train": ("net.",),
    "extract": (),
    "match": ("filter.",),
    "eval": ("eval.",),
    "report": (),
}


def _coerce(value, default, key):
    if isinstance(default, bool):
        low = str(value).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return str(value)


class RunConfig:
    """All settings of one pipeline run, keyed ``section.name``."""

    def __init__(self, values=None, preset="desk"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        self.values = dict(PRESETS[preset])
        self.values["run.preset"] = preset
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(value, self.values[key], key)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text, preset=None):
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            pairs[k] = v
        preset = preset or pairs.pop("run.preset", "desk")
        pairs.pop("run.preset", None)
        return cls(pairs, preset)

    @classmethod
    def load(cls, path, preset=None):
        with open(path) as fh:
            return cls.parse(fh.read(), preset)

    def dump(self):
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))

    def section_hash(self, prefixes):
        keys = sorted(k for k in self.values if any(k.startswith(p) for p in prefixes))
        text = ";".join(f"{k}={self.values[k]!r}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def net_config(self):
        kw = {f.name: self.values[f"net.{f.name}"] for f in fields(NetConfig)}
        kw["input_size"] = self.values["render.size"]
        kw["rng_seed"] = self.values["run.seed"] + kw["rng_seed"]
        return NetConfig(**kw)

    @property
    def radii(self):
        try:
            return tuple(float(r) for r in str(self.values["eval.radii"]).split(","))
        except ValueError:
            raise ConfigError("eval.radii must be comma-separated numbers") from None

    def validate(self):
        v = self.values
        if v["poses.train"] < 1 or v["poses.heldout"] < 1:
            raise ConfigError("need at least one training and one held-out pose")
        if v["segment.k"] < 2 or v["segment.candidates"] < 1 or v["segment.max_count"] < 1:
            raise ConfigError("bad segmentation settings")
        if v["render.views"] < 1:
            raise ConfigError("need at least one view")
        if not v["filter.threshold"] > 0:
            raise ConfigError("filter.threshold must be positive")
        self.radii
        try:
            self.net_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self
