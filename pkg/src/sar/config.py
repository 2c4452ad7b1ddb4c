"""Flat ``section.key = value`` run configuration.

Lines starting with ``#`` are comments. Tuples are comma separated
(``arch.input_shape = 64,64,32``); nested pairs use ``:``
(``transform.paint_block_extent_range = 2:4,2:4,1:2``); nested records list
their fields in order (``synth.ct = 0.3,0.1,1.3`` for mean, std, smoothing);
a per-axis value inside a record uses ``:`` (``synth.mri = 0.6,0.15,1.3:1.3:3.5``).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from sar.errors import ConfigError
from sar.model import Arch
from sar.sampler import SamplingPlan
from sar.synth import SynthSpec
from sar.trainer import FinetuneConfig, PretrainConfig
from sar.transforms import TransformConfig

SEED_ENV = "SAR_SEED"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    n_seg_cases: int = 12
    seg_dims: tuple[int, int, int] = (96, 96, 64)
    test_fraction: float = 1 / 3
    n_trials: int = 1


# Keys that live in their own sections or in ``run.seed``.
_EXCLUDED = {"pretrain": {"arch", "plan", "transform", "seed"}, "finetune": {"arch", "seed", "init"}, "synth": {"seed"}, "plan": {"rng_seed", "target_shape"}}


def desk_defaults() -> dict:
    """Section defaults for the CLI, sized for a CPU laptop."""
    return {
        "run": RunSection(),
        "synth": SynthSpec(n_ct=3, n_mri=3),
        "plan": SamplingPlan(4, 2, 2),
        "transform": TransformConfig(),
        "arch": Arch(),
        # The 1e0/1e-1/1e-3 rates diverge at this scale; see README.
        "pretrain": PretrainConfig(max_epochs=5, lr_unet=0.01, lr_sa=0.01, lr_mial=0.01, plateau_patience=10),
        "finetune": FinetuneConfig(max_epochs=10, patches_per_case=2),
        "eval": EvalSection(),
    }


@dataclass
class RunConfig:
    sections: dict = field(default_factory=desk_defaults)

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def seed(self) -> int:
        return self.sections["run"].seed

    def pretrain_config(self) -> PretrainConfig:
        arch = self.sections["arch"]
        plan = replace(self.sections["plan"], target_shape=arch.input_shape, rng_seed=self.seed)
        return replace(self.sections["pretrain"], arch=arch, plan=plan, transform=self.sections["transform"], seed=self.seed)

    def finetune_config(self, init: str = "scratch") -> FinetuneConfig:
        return replace(self.sections["finetune"], arch=self.sections["arch"], seed=self.seed, init=init)

    def synth_spec(self) -> SynthSpec:
        return replace(self.sections["synth"], seed=self.seed)

    def seg_spec(self) -> SynthSpec:
        return replace(self.synth_spec(), dims=self.sections["eval"].seg_dims)

    def items(self):
        for sec, obj in self.sections.items():
            skip = _EXCLUDED.get(sec, set())
            for f in fields(obj):
                if f.name not in skip:
                    yield f"{sec}.{f.name}", getattr(obj, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def format_value(v) -> str:
    if v is None:
        return "none"
    if dataclasses.is_dataclass(v):
        return ",".join(_format_field(getattr(v, f.name)) for f in fields(v))
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return ",".join(":".join(str(x) for x in pair) for pair in v)
        return ",".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _format_field(v) -> str:
    # Record fields are comma separated, so a per-axis tuple inside one uses ':'.
    if isinstance(v, (tuple, list)):
        return ":".join(format_value(x) for x in v)
    return format_value(v)


def _scalar(text: str, like):
    if ":" in text and isinstance(like, (float, tuple)):
        return tuple(float(p) for p in text.split(":"))
    if isinstance(like, tuple):
        return float(text)
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_value(text: str, default, name: str = ""):
    text = text.strip()
    if name == "paint_block_extent_range":
        if text.lower() == "none":
            return None
        pairs = [p.split(":") for p in text.split(",")]
        if any(len(p) != 2 for p in pairs):
            raise ValueError("expected lo:hi pairs")
        return tuple((int(a), int(b)) for a, b in pairs)
    if dataclasses.is_dataclass(default):
        parts = text.split(",")
        fs = fields(default)
        if len(parts) != len(fs):
            raise ValueError(f"expected {len(fs)} comma-separated values ({', '.join(f.name for f in fs)})")
        return type(default)(**{f.name: _scalar(p.strip(), getattr(default, f.name)) for f, p in zip(fs, parts)})
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated values")
        return tuple(_scalar(p, d) for p, d in zip(parts, default))
    return _scalar(text, default)


def _apply(sections: dict, key: str, value: str, where: str) -> None:
    sec, _, name = key.partition(".")
    if sec not in sections or not name:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    obj = sections[sec]
    names = {f.name for f in fields(obj)} - _EXCLUDED.get(sec, set())
    if name not in names:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    try:
        sections[sec] = replace(obj, **{name: parse_value(value, getattr(obj, name), name)})
    except ConfigError as exc:
        raise ConfigError(f"{where}: {key}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (``key=value``), then ``SAR_SEED``."""
    sections = desk_defaults()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            _apply(sections, key, value, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        _apply(sections, key, value, "--set")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        _apply(sections, "run.seed", env[SEED_ENV], SEED_ENV)
    cfg = RunConfig(sections)
    # Cross-section checks surface as config errors.
    try:
        cfg.pretrain_config()
        cfg.finetune_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


__all__ = ["EvalSection", "RunConfig", "RunSection", "desk_defaults", "load_config"]
