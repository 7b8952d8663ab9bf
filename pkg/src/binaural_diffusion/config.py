"""Run configuration: TOML sections with typed scalars, validated against a fixed schema.

Two built-in profiles provide every default.  ``toy`` is the desk-scale
setup used by the tests; ``paper`` records the full-size network and 48 kHz
audio and is not meant to be trained on a laptop.  A config file selects a
profile with a top-level ``profile = "..."`` key and overrides any subset of
keys; keys outside the schema are errors.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .denoiser import NetConfig
from .diffusion import DEFAULT_INFER_BETAS, NoiseSchedule, make_schedule
from .dsp_render import ShoeboxRoom
from .errors import ConfigError
from .metrics import MetricConfig, StftConfig
from .two_stage import OptimConfig

FLOAT, INT, STR = "float", "int", "str"
VEC3, FLOATS, PAIRS, ABSORPTION = "vec3", "floats", "pairs", "absorption"

SCHEMA = {
    "audio": {"sample_rate": FLOAT, "speed_of_sound": FLOAT, "ear_offset_left": VEC3, "ear_offset_right": VEC3},
    "schedule": {"train_steps": INT, "beta_start": FLOAT, "beta_end": FLOAT, "infer_betas": FLOATS},
    "net": {"residual_blocks": INT, "layers_per_block": INT, "hidden": INT, "step_embed_dim": INT,
            "dilation_cycle": INT},
    "train": {"lr": FLOAT, "beta1": FLOAT, "beta2": FLOAT, "adam_eps": FLOAT, "steps": INT, "seed": INT,
              "batch_size": INT, "crop_samples": INT},
    "synth": {"seed": INT},
    "data": {"n_clips": INT, "clip_seconds": FLOAT, "seed": INT, "room_dims": VEC3, "absorption": ABSORPTION,
             "max_order": INT, "hrtf_dir": STR},
    "metrics": {"fft_size": INT, "hop": INT, "resolutions": PAIRS, "pesq_command": STR},
}

_TOY = {
    "audio": {"sample_rate": 8000.0, "speed_of_sound": 343.0,
              "ear_offset_left": [0.0, -0.09, 0.0], "ear_offset_right": [0.0, 0.09, 0.0]},
    "schedule": {"train_steps": 200, "beta_start": 1e-4, "beta_end": 0.05, "infer_betas": list(DEFAULT_INFER_BETAS)},
    "net": {"residual_blocks": 1, "layers_per_block": 3, "hidden": 16, "step_embed_dim": 128, "dilation_cycle": 10},
    "train": {"lr": 2e-4, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "steps": 3000, "seed": 0,
              "batch_size": 1, "crop_samples": 0},
    "synth": {"seed": 0},
    "data": {"n_clips": 4, "clip_seconds": 1.0, "seed": 0, "room_dims": [6.0, 5.0, 3.0], "absorption": 0.7,
             "max_order": 1, "hrtf_dir": ""},
    "metrics": {"fft_size": 1024, "hop": 256, "resolutions": [[512, 128], [1024, 256], [2048, 512]],
                "pesq_command": ""},
}

_PAPER = copy.deepcopy(_TOY)
_PAPER["audio"]["sample_rate"] = 48000.0
_PAPER["net"].update(residual_blocks=3, layers_per_block=10, hidden=128, step_embed_dim=128)
_PAPER["train"]["steps"] = 1_000_000

PROFILES = {"toy": _TOY, "paper": _PAPER}


def _coerce(section, key, kind, value):
    where = f"[{section}] {key}"

    def num(v, cast=float):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {v!r}")
        if cast is int and not (isinstance(v, int) or float(v).is_integer()):
            raise ConfigError(f"{where}: expected an integer, got {v!r}")
        return cast(v)

    if kind == FLOAT:
        return num(value)
    if kind == INT:
        return num(value, int)
    if kind == STR:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if kind == VEC3:
        if not isinstance(value, list) or len(value) != 3:
            raise ConfigError(f"{where}: expected a list of 3 numbers, got {value!r}")
        return [num(v) for v in value]
    if kind == FLOATS:
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a non-empty list of numbers, got {value!r}")
        return [num(v) for v in value]
    if kind == PAIRS:
        if not isinstance(value, list) or not value or not all(isinstance(p, list) and len(p) == 2 for p in value):
            raise ConfigError(f"{where}: expected a list of [fft_size, hop] pairs, got {value!r}")
        return [[num(a, int), num(b, int)] for a, b in value]
    if kind == ABSORPTION:
        if isinstance(value, list):
            if len(value) != 6:
                raise ConfigError(f"{where}: expected one number or six, got {value!r}")
            return [num(v) for v in value]
        return num(value)
    raise AssertionError(kind)


@dataclass(frozen=True)
class RunConfig:
    profile: str
    values: dict

    def __getitem__(self, section):
        return self.values[section]

    def net_config(self) -> NetConfig:
        n = self.values["net"]
        return NetConfig(residual_blocks=n["residual_blocks"], layers_per_block=n["layers_per_block"],
                         hidden=n["hidden"], step_embed_dim=n["step_embed_dim"], dilation_cycle=n["dilation_cycle"],
                         diffusion_steps=self.values["schedule"]["train_steps"])

    def train_schedule(self) -> NoiseSchedule:
        s = self.values["schedule"]
        return make_schedule("linear", s["train_steps"], s["beta_start"], s["beta_end"])

    @property
    def infer_betas(self) -> list:
        return list(self.values["schedule"]["infer_betas"])

    def optim(self) -> OptimConfig:
        t = self.values["train"]
        return OptimConfig(lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"], eps=t["adam_eps"], steps=t["steps"],
                           batch=t["batch_size"], crop=t["crop_samples"])

    def room(self) -> ShoeboxRoom:
        d = self.values["data"]
        a = d["absorption"]
        return ShoeboxRoom(tuple(d["room_dims"]), tuple(a) if isinstance(a, list) else a, d["max_order"])

    @property
    def ear_offsets(self) -> np.ndarray:
        a = self.values["audio"]
        return np.array([a["ear_offset_left"], a["ear_offset_right"]])

    def metric_config(self) -> MetricConfig:
        m = self.values["metrics"]
        return MetricConfig(StftConfig(m["fft_size"], m["hop"]), tuple(tuple(r) for r in m["resolutions"]),
                            m["pesq_command"])


def build_config(overrides: dict | None = None, profile: str | None = None) -> RunConfig:
    """Merge ``overrides`` (parsed TOML) onto a profile and validate everything."""
    overrides = dict(overrides or {})
    file_profile = overrides.pop("profile", None)
    name = profile or file_profile or "toy"
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    values = copy.deepcopy(PROFILES[name])
    for section, body in overrides.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = value
    for section, keys in SCHEMA.items():
        for key, kind in keys.items():
            values[section][key] = _coerce(section, key, kind, values[section][key])
    cfg = RunConfig(name, values)
    _validate_ranges(cfg)
    return cfg


def _validate_ranges(cfg: RunConfig) -> None:
    try:
        cfg.net_config()
        cfg.train_schedule()
        NoiseSchedule(cfg.infer_betas)
        cfg.room()
        cfg.metric_config()
        cfg.optim()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    a = cfg["audio"]
    if a["sample_rate"] <= 0 or a["sample_rate"] > 48000:
        raise ConfigError("[audio] sample_rate must lie in (0, 48000]")
    if a["speed_of_sound"] <= 0:
        raise ConfigError("[audio] speed_of_sound must be positive")
    if cfg["train"]["steps"] < 1:
        raise ConfigError("[train] steps must be >= 1")
    if cfg["data"]["n_clips"] < 0 or cfg["data"]["clip_seconds"] <= 0:
        raise ConfigError("[data] n_clips must be >= 0 and clip_seconds > 0")


def load_config(path=None, profile: str | None = None) -> RunConfig:
    overrides = {}
    if path is not None:
        try:
            overrides = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(overrides, profile)
