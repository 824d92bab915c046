"""Experiment configuration and the ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from diffgan.errors import ConfigError


@dataclass
class TrainSection:
    total_iters: int = 2000
    batch: int = 32
    lrate: float = 0.0025
    adam_b1: float = 0.0
    adam_b2: float = 0.99
    adam_eps: float = 1e-8
    ema_halflife_kimg: float = 2.0
    seed: int = 0
    eval_interval: int = 0
    snapshot_interval: int = 0
    wallclock: bool = True


@dataclass
class LossSection:
    kind: str = "ns"
    saturating: bool = False
    gamma: float = 1.0
    gp_lambda: float = 0.0
    r1_interval: int = 16
    n_probes: int = 1
    probe_eps: float = 1e-3


@dataclass
class DiffusionSection:
    enabled: bool = False
    d_target: float = 0.6
    c_step: int = 2
    t_max: int = 1000
    t_min: int = 4
    p_pi: str = "priority"
    sigma: float = 0.05
    beta_min: float = 1e-4
    beta_max: float = 2e-2


@dataclass
class NetSection:
    arch: str = "auto"
    z_dim: int = 64
    w_dim: int = 64
    map_depth: int = 2
    fmaps: float = 0.5
    ch_base: int = 1024
    ch_max: int = 64
    n_blocks: int = 0
    mbstd: bool = True
    mbstd_group: int = 8
    t_embed: int = 32
    hidden: int = 128
    mlp_layers: int = 3


@dataclass
class EvalSection:
    extractor: str = "auto"
    extractor_seed: int = 0
    extractor_width: int = 64
    n_samples: int = 10000
    k: int = 3
    kid_block: int = 500
    hq_radius: float = 0.0


@dataclass
class Config:
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    net: NetSection = field(default_factory=NetSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "Config":
        t, l, d, n = self.train, self.loss, self.diffusion, self.net
        if t.batch < 2:
            raise ConfigError("train.batch must be >= 2")
        if t.lrate <= 0:
            raise ConfigError("train.lrate must be positive")
        if t.total_iters < 0 or t.eval_interval < 0 or t.snapshot_interval < 0:
            raise ConfigError("iteration counts and intervals must be non-negative")
        if l.kind not in ("ns", "wasserstein"):
            raise ConfigError(f"loss.kind must be 'ns' or 'wasserstein', got {l.kind!r}")
        if l.gamma < 0 or l.gp_lambda < 0 or l.r1_interval < 1 or l.n_probes < 1:
            raise ConfigError("loss.gamma, loss.gp_lambda >= 0; r1_interval, n_probes >= 1")
        if d.p_pi not in ("uniform", "priority"):
            raise ConfigError(f"diffusion.p_pi must be uniform or priority, got {d.p_pi!r}")
        if not 1 <= d.t_min <= d.t_max:
            raise ConfigError("need 1 <= diffusion.t_min <= diffusion.t_max")
        if not 0 < d.d_target < 1:
            raise ConfigError("diffusion.d_target must lie in (0, 1)")
        if n.arch not in ("auto", "conv", "mlp"):
            raise ConfigError(f"net.arch must be auto, conv or mlp, got {n.arch!r}")
        if self.eval.extractor not in ("auto", "raw_pixels", "random_conv"):
            raise ConfigError(f"unknown eval.extractor {self.eval.extractor!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        cfg = cls()
        for sec_name, values in doc.items():
            sec = _section(cfg, sec_name)
            for key, value in values.items():
                _set(sec, sec_name, key, value)
        return cfg.validate()

    def with_overrides(self, **flat) -> "Config":
        """Copy with ``section__key=value`` overrides."""
        doc = self.to_dict()
        for k, v in flat.items():
            sec, key = k.split("__", 1)
            doc.setdefault(sec, {})[key] = v
        return Config.from_dict(doc)

    def dumps(self) -> str:
        lines = []
        for sec in fields(self):
            for f in fields(getattr(self, sec.name)):
                v = getattr(getattr(self, sec.name), f.name)
                lines.append(f"{sec.name}.{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _section(cfg: Config, name: str):
    if name not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown config section {name!r}")
    return getattr(cfg, name)


def _set(sec, sec_name: str, key: str, value) -> None:
    types = {f.name: f.type for f in fields(sec)}
    if key not in types:
        raise ConfigError(f"unknown config key {sec_name}.{key}")
    setattr(sec, key, _coerce(value, types[key], f"{sec_name}.{key}"))


def _coerce(value, typ: str, name: str):
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("true", "1", "yes"):
                return True
            if s in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if typ == "float":
            return float(value)
        return str(value).strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot read {value!r} as {typ}") from None


def parse_config(text: str, source: str = "<config>") -> Config:
    """Parse ``section.key = value`` lines; ``#`` starts a comment.

    Unknown keys and malformed lines raise :class:`ConfigError` naming the line.
    """
    cfg = Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        lhs, value = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"{source}:{lineno}: key {lhs!r} lacks a section")
        sec_name, key = lhs.split(".", 1)
        try:
            _set(_section(cfg, sec_name), sec_name, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


# Reference-configuration hyperparameters next to the keys that carry them here.
# (reference name, reference value, config key, desk-scale default, note)
REFERENCE_KEYS = [
    ("ref_gpus", "8", "-", "1 process", "single-process training; ignored"),
    ("kimg", "25000", "train.total_iters", "2000", "iterations given directly"),
    ("mb", "64", "train.batch", "32", "lower for CPU speed"),
    ("mbstd", "8", "net.mbstd_group", "8", "group size min(batch, 8)"),
    ("fmaps", "0.5", "net.fmaps", "0.5", "channels = fmaps * ch_base / res, capped at ch_max"),
    ("lrate", "0.0025", "train.lrate", "0.0025", "Adam learning rate"),
    ("gamma", "1", "loss.gamma", "1.0", "R1 weight; lazy every loss.r1_interval steps"),
    ("ema", "20", "train.ema_halflife_kimg", "2.0", "half-life in thousands of images"),
    ("ramp", "None", "-", "-", "no learning-rate ramp"),
    ("map", "8", "net.map_depth", "2", "mapping MLP depth (0-8)"),
    ("dtarget", "0.6", "diffusion.d_target", "0.6", "r_d threshold"),
    ("p_pi", "priority", "diffusion.p_pi", "priority", "p(t) proportional to t"),
    ("noise", "0.05", "diffusion.sigma", "0.05", "noise std of the chain"),
]


def describe_keys() -> str:
    """Table of every config key with its default, plus the reference mapping."""
    out = ["key | default", "--- | ---"]
    cfg = Config()
    for sec in fields(cfg):
        for f in fields(getattr(cfg, sec.name)):
            out.append(f"{sec.name}.{f.name} | {_fmt(getattr(getattr(cfg, sec.name), f.name))}")
    out += ["", "reference | reference value | key | desk default | note",
            "--- | --- | --- | --- | ---"]
    out += [" | ".join(row) for row in REFERENCE_KEYS]
    return "\n".join(out)
