"""Plain-text INI study configuration with strict key checking."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from typing import Iterable

from .errors import ConfigError


@dataclasses.dataclass(frozen=True)
class StudySection:
    seed: int = 0
    out: str = "runs/study"


@dataclasses.dataclass(frozen=True)
class DataSection:
    image_side: int = 32
    n_train: int = 800  # per domain; 100 instances for each of the 8 classes
    n_eval: int = 64
    n_val: int = 20  # held-out objects used by tune-shift


@dataclasses.dataclass(frozen=True)
class BackboneSection:
    patch_size: int = 4
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 12
    n_prompts: int = 8
    mlp_ratio: int = 4


@dataclasses.dataclass(frozen=True)
class AdaptersSection:
    shifter_rank: int = 8
    adapter_rank: int = 8
    switch_dim: int = 16


@dataclasses.dataclass(frozen=True)
class TrainingSection:
    lr: float = 5e-5
    pretrain_lr: float = 5e-5
    stage1_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 10
    batch_size: int = 16
    warmup_steps: int = 100
    prompt_dropout: float = 0.1
    # explicit step budgets; 0 means "derive from epochs"
    pretrain_steps: int = 0
    stage1_steps: int = 0
    finetune_steps: int = 0


@dataclasses.dataclass(frozen=True)
class BindingSection:
    tau_b: float = 0.4
    p_b: float = 0.1


@dataclasses.dataclass(frozen=True)
class SamplerSection:
    steps: int = 50
    cfg_scale: float = 3.0
    b_max: float = 0.3  # fraction of blocks
    t_max: int = 950
    clip: float = 1.0
    sdedit_t: int = 500


@dataclasses.dataclass(frozen=True)
class EvalSection:
    embed_seed: int = 0
    probe_t: int = 500
    prior_fid_max: float = 1e9  # realism gate on the pretrained base
    max_realism_drop: float = 0.1


@dataclasses.dataclass(frozen=True)
class ProbeSection:
    timesteps: tuple[int, ...] = (800, 700, 500, 200)
    n_samples: int = 4


SECTIONS = {
    "study": StudySection,
    "data": DataSection,
    "backbone": BackboneSection,
    "adapters": AdaptersSection,
    "training": TrainingSection,
    "binding": BindingSection,
    "sampler": SamplerSection,
    "eval": EvalSection,
    "probe": ProbeSection,
}


@dataclasses.dataclass(frozen=True)
class StudyConfig:
    study: StudySection = StudySection()
    data: DataSection = DataSection()
    backbone: BackboneSection = BackboneSection()
    adapters: AdaptersSection = AdaptersSection()
    training: TrainingSection = TrainingSection()
    binding: BindingSection = BindingSection()
    sampler: SamplerSection = SamplerSection()
    eval: EvalSection = EvalSection()
    probe: ProbeSection = ProbeSection()

    def replace(self, section: str, **values) -> "StudyConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})


def _coerce(section: str, key: str, raw: str):
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    if key not in hints:
        raise ConfigError(f"unknown key {section}.{key}")
    typ = hints[key]
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typing.get_origin(typ) is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_overrides(pairs: Iterable[str]) -> list[tuple[str, str, str]]:
    out = []
    for pair in pairs:
        key, sep, value = pair.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {pair!r}")
        out.append((section, name, value))
    return out


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> StudyConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides."""
    items: list[tuple[str, str, str]] = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for section in parser.sections():
            items += [(section, k, v) for k, v in parser.items(section)]
    items += parse_overrides(overrides)
    cfg = StudyConfig()
    for section, key, raw in items:
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cfg = cfg.replace(section, **{key: _coerce(section, key, raw)})
    return cfg


def dump_config(cfg: StudyConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        sec = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_echo(cfg: StudyConfig, out_dir: str | os.PathLike) -> str:
    """Write ``config.ini`` next to the outputs; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.ini")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    return path
