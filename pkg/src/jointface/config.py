"""Run configuration and its flat ``section.key = value`` text form.

Example::

    # toy run
    run.mode = "joint"
    run.iterations = 3000
    run.decay_iters = (1500, 2250)
    run.base_lr = 0.01
    model.fc_dim = 256
    gen.style = "line"

Values are Python literals; a bare word that is not a literal is kept as a string.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import GenConfig

MODES = ("joint", "cropped-baseline", "aligned-baseline")


@dataclass
class RunConfig:
    data: str = ""
    mode: str = "joint"
    seed: int = 7
    iterations: int = 3000
    decay_iters: tuple = (1500, 2250)
    base_lr: float = 0.01
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    finetune_lr_scale: float = 0.1
    hflip: bool = True
    images_per_batch: int = 4
    baseline_batch: int = 4
    eval_iou: float = 0.5
    eval_split: str = "test"
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    gen: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        self.decay_iters = tuple(int(d) for d in self.decay_iters)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        d = self.decay_iters
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError(f"decay iterations must be strictly increasing, got {d}")
        if d and (d[0] < 0 or d[-1] >= self.iterations):
            raise ConfigError(f"decay iterations {d} must lie in [0, {self.iterations})")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.images_per_batch < 1:
            raise ConfigError("images_per_batch must be >= 1")
        if self.baseline_batch < 1:
            raise ConfigError("baseline_batch must be >= 1")

    def with_updates(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    # -- text form ----------------------------------------------------------

    def to_flat(self) -> dict:
        flat = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                flat.update({f"model.{k}": val for k, val in v.to_dict().items()})
            elif f.name == "gen":
                flat.update({f"gen.{k}": val for k, val in v.to_dict().items()})
            else:
                flat[f"run.{f.name}"] = v
        return flat

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            v = tuple(v) if isinstance(v, list) else v
            lines.append(f"{k} = {v!r}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_flat(cls, flat: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        run, model, gen = {}, base.model.to_dict(), base.gen.to_dict()
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if not name:
                section, name = "run", section
            target = {"run": run, "model": model, "gen": gen}.get(section)
            if target is None:
                raise ConfigError(f"unknown config section {section!r} in key {key!r}")
            if section == "run" and name not in {f.name for f in fields(cls)} - {"model", "gen"}:
                raise ConfigError(f"unknown run key {name!r}")
            if section == "model" and name not in {f.name for f in fields(ModelConfig)}:
                raise ConfigError(f"unknown model key {name!r}")
            if section == "gen" and name not in {f.name for f in fields(GenConfig)}:
                raise ConfigError(f"unknown gen key {name!r}")
            target[name] = value
        try:
            mcfg = ModelConfig.from_dict(model)
            gcfg = GenConfig.from_dict(gen)
            kw = {f.name: getattr(base, f.name) for f in fields(cls) if f.name not in ("model", "gen")}
            kw.update(run)
            return cls(model=mcfg, gen=gcfg, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        flat[key.strip()] = parse_value(value.strip())
    return flat


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return RunConfig.from_flat(parse_config_text(p.read_text()), base)


def parse_overrides(items) -> dict:
    """``["run.seed=3", "model.fc_dim=128"]`` -> flat dict."""
    return parse_config_text("\n".join(items or []))
