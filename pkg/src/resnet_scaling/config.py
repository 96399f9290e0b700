"""Experiment configuration: flat ``key = value`` lines with dotted sections.

Example::

    dataset.kind = synthetic
    sweep.depths = 4,8,16,32
    train.learning_rate = 0.01

Blank lines and lines starting with ``#`` are ignored. Unknown or repeated
keys are errors, every value is validated before anything runs, and
``serialize`` writes the canonical form (every key, schema order), so
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from importlib import resources

from .resnet import ACTIVATIONS, DELTA_MODES, TrainConfig

STAGES = ("data", "train", "diagnose", "limits")
PRESETS = ("quickstart", "ode", "sde")


class ConfigError(ValueError):
    """A config problem, tagged with the offending key or section."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class _Key:
    name: str
    kind: str  # int, float, bool, str, ints, strs
    default: object
    choices: tuple = ()


SCHEMA = [
    _Key("dataset.kind", "str", "synthetic", ("synthetic", "mnist")),
    _Key("dataset.seed", "int", 0),
    _Key("dataset.n", "int", 1024),
    _Key("dataset.d", "int", 10),
    _Key("dataset.k_steps", "int", 100),
    _Key("dataset.images", "str", ""),
    _Key("dataset.labels", "str", ""),
    _Key("model.activation", "str", "tanh", ACTIVATIONS),
    _Key("model.delta_mode", "str", "shared", DELTA_MODES),
    _Key("model.width", "int", 10),
    _Key("sweep.depths", "ints", ()),
    _Key("sweep.L_min", "int", 0),
    _Key("sweep.L_max", "int", 0),
    _Key("sweep.seeds", "int", 1),
    _Key("sweep.seed", "int", 0),
    _Key("train.batch_size", "int", 32),
    _Key("train.learning_rate", "float", 0.01),
    _Key("train.early_stop", "float", 0.01),
    _Key("train.max_updates", "int", 160),
    _Key("diagnostics.window", "str", "auto"),
    _Key("diagnostics.h1_increment_slope", "float", -0.1),
    _Key("diagnostics.h1_noise_fraction", "float", 0.2),
    _Key("diagnostics.h2_min_beta", "float", 0.5),
    _Key("diagnostics.bounded_rss_slope", "float", 0.1),
    _Key("diagnostics.sparse_max_slope", "float", -0.05),
    _Key("limits.mode", "str", "ode", ("ode", "sde")),
    _Key("limits.d", "int", 1),
    _Key("limits.Abar", "float", 0.0),
    _Key("limits.bbar", "float", 0.0),
    _Key("limits.U_A", "float", 0.0),
    _Key("limits.U_b", "float", 0.0),
    _Key("limits.q_A", "float", 0.0),
    _Key("limits.q_b", "float", 0.0),
    _Key("limits.alpha", "float", 0.0),
    _Key("limits.beta", "float", 1.0),
    _Key("limits.activation", "str", "tanh", ("tanh", "curved")),
    _Key("limits.curvature", "float", 0.0),
    _Key("limits.x0", "float", 1.0),
    _Key("limits.depths", "ints", ()),
    _Key("limits.paths", "int", 200),
    _Key("limits.L_ref", "int", 0),
    _Key("limits.seed", "int", 0),
    _Key("limits.rate_min", "float", -math.inf),
    _Key("limits.rate_max", "float", math.inf),
    _Key("limits.require_monotone", "bool", False),
    _Key("limits.ito_check", "bool", False),
    _Key("limits.ito_depth", "int", 4096),
    _Key("limits.ito_paths", "int", 10000),
    _Key("output.dir", "str", "out"),
    _Key("run.stages", "strs", ("data", "train", "diagnose"), STAGES),
]
_BY_NAME = {k.name: k for k in SCHEMA}


def _parse_value(key: _Key, text: str):
    text = text.strip()
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if key.kind == "ints":
            return tuple(int(p) for p in text.split(",") if p.strip())
        if key.kind == "strs":
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(key.name, f"cannot read {text!r} as {key.kind}") from None


def _format_value(key: _Key, value) -> str:
    if key.kind == "float":
        return repr(float(value))
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    return str(value)


class ExperimentConfig:
    """Validated configuration; values are read with ``cfg["section.key"]``."""

    def __init__(self, values: dict):
        merged = {k.name: k.default for k in SCHEMA}
        for name, v in values.items():
            if name not in _BY_NAME:
                raise ConfigError(name, "unknown key")
            merged[name] = v
        self._values = merged
        self.validate()

    def __getitem__(self, name: str):
        return self._values[name]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._values == other._values

    def as_dict(self) -> dict:
        return dict(self._values)

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with keys replaced; use ``__`` for the dot, e.g. ``dataset__seed=3``."""
        vals = self.as_dict()
        vals.update({k.replace("__", "."): v for k, v in updates.items()})
        return ExperimentConfig(vals)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(dataset__seed=seed, sweep__seed=seed, limits__seed=seed)

    def serialize(self) -> str:
        return "".join(f"{k.name} = {_format_value(k, self._values[k.name])}\n" for k in SCHEMA)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def section_fingerprint(self, section: str) -> str:
        text = "".join(line for line in self.serialize().splitlines(True) if line.startswith(section + "."))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def stages(self) -> tuple:
        return self["run.stages"]

    def sweep_depths(self) -> list[int]:
        """Explicit depth list, or the powers of two in [L_min, L_max]."""
        if self["sweep.depths"]:
            return sorted(set(self["sweep.depths"]))
        lo, hi = self["sweep.L_min"], self["sweep.L_max"]
        if lo < 1 or hi < lo:
            return []
        out, L = [], 1
        while L <= hi:
            if L >= lo:
                out.append(L)
            L *= 2
        return out

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self["train.batch_size"], self["train.learning_rate"], self["train.early_stop"],
                           self["train.max_updates"], seed)

    def window(self) -> int | None:
        w = self["diagnostics.window"]
        return None if w == "auto" else int(w)

    def validate(self) -> None:
        v = self._values
        for k in SCHEMA:
            val = v[k.name]
            if k.choices:
                vals = val if k.kind == "strs" else (val,)
                for item in vals:
                    if item not in k.choices:
                        raise ConfigError(k.name, f"{item!r} is not one of {', '.join(k.choices)}")
            if k.kind == "float" and math.isnan(val):
                raise ConfigError(k.name, "NaN is not allowed")
        stages = v["run.stages"]
        if not stages:
            raise ConfigError("run.stages", "no stages requested")
        if len(set(stages)) != len(stages) or list(stages) != sorted(stages, key=STAGES.index):
            raise ConfigError("run.stages", f"stages must be distinct and in the order {', '.join(STAGES)}")
        if "train" in stages and "data" not in stages:
            raise ConfigError("run.stages", "train needs the data stage")
        if "diagnose" in stages and "train" not in stages:
            raise ConfigError("run.stages", "diagnose needs the train stage (use the diagnose subcommand for checkpoints)")
        if "data" in stages:
            self._validate_dataset()
        if "train" in stages:
            self._validate_sweep()
        if "diagnose" in stages:
            self._validate_diagnostics()
        if "limits" in stages:
            self._validate_limits()
        if not v["output.dir"]:
            raise ConfigError("output.dir", "must not be empty")

    def _validate_dataset(self):
        v = self._values
        for key in ("dataset.n", "dataset.d", "dataset.k_steps"):
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")
        if v["dataset.kind"] == "mnist":
            for key in ("dataset.images", "dataset.labels"):
                if not v[key]:
                    raise ConfigError(key, "path required for the mnist dataset")
            if v["dataset.d"] < 10:
                raise ConfigError("dataset.d", "mnist needs d >= 10 for one-hot targets")

    def _validate_sweep(self):
        v = self._values
        if v["model.width"] != v["dataset.d"]:
            raise ConfigError("model.width", f"must equal dataset.d ({v['dataset.d']})")
        if any(L < 1 for L in v["sweep.depths"]):
            raise ConfigError("sweep.depths", "depths must be >= 1")
        if not self.sweep_depths():
            raise ConfigError("sweep", "empty depth sweep: set sweep.depths or 1 <= sweep.L_min <= sweep.L_max")
        if v["sweep.seeds"] < 1:
            raise ConfigError("sweep.seeds", "must be >= 1")
        try:
            self.train_config(0)
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from None

    def _validate_diagnostics(self):
        if len(self.sweep_depths()) < 3:
            raise ConfigError("sweep", "diagnostics need at least 3 distinct depths")
        w = self._values["diagnostics.window"]
        if w != "auto":
            try:
                ok = int(w) >= 1 and int(w) % 2 == 1
            except ValueError:
                ok = False
            if not ok:
                raise ConfigError("diagnostics.window", "must be 'auto' or a positive odd integer")

    def _validate_limits(self):
        v = self._values
        depths = v["limits.depths"]
        if not depths:
            raise ConfigError("limits.depths", "no depths given")
        if depths[0] < 1 or any(b <= a for a, b in zip(depths, depths[1:])):
            raise ConfigError("limits.depths", "depths must be >= 1 and strictly increasing")
        if v["limits.paths"] < 1:
            raise ConfigError("limits.paths", "need at least 1 path")
        if v["limits.d"] < 1:
            raise ConfigError("limits.d", "must be >= 1")
        if v["limits.alpha"] < 0 or v["limits.beta"] < 0:
            raise ConfigError("limits", "alpha and beta must be >= 0")
        if v["limits.L_ref"] and any(v["limits.L_ref"] % L for L in depths):
            raise ConfigError("limits.L_ref", "must be a multiple of every depth")
        if v["limits.rate_min"] > v["limits.rate_max"]:
            raise ConfigError("limits.rate_min", "exceeds limits.rate_max")
        if v["limits.ito_check"]:
            if v["limits.ito_depth"] < 1:
                raise ConfigError("limits.ito_depth", "must be >= 1")
            if v["limits.ito_paths"] < 2:
                raise ConfigError("limits.ito_paths", "need at least 2 paths for a standard error")


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        name, _, value = line.partition("=")
        name = name.strip()
        if name not in _BY_NAME:
            raise ConfigError(name, "unknown key")
        if name in values:
            raise ConfigError(name, f"repeated on line {lineno}")
        values[name] = _parse_value(_BY_NAME[name], value)
    return ExperimentConfig(values)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError("config", f"unknown preset {name!r}; bundled presets: {', '.join(PRESETS)}")
    return resources.files("resnet_scaling").joinpath("configs", f"{name}.cfg").read_text(encoding="utf-8")


def load_config(path_or_preset: str) -> ExperimentConfig:
    """Read a config file, or a bundled preset by name."""
    from pathlib import Path

    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(encoding="utf-8"))
    if path_or_preset in PRESETS:
        return parse_config(preset_text(path_or_preset))
    raise ConfigError("config", f"no such file or preset: {path_or_preset}")
