"""Pipeline configuration as flat ``section.key = value`` lines.

Example::

    # coarser lattice
    slic.rows = 6
    crf.method = meanfield
    crf.beta = auto
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import SproadError

AUTO = "auto"
METHODS = ("none", "icm", "bp", "meanfield")


class ConfigError(SproadError, ValueError):
    """Malformed line, unknown key or out-of-range value."""


@dataclass(frozen=True)
class SlicSection:
    rows: int = 11
    cols: int = 36
    m: float = 35.0
    iters: int = 10


@dataclass(frozen=True)
class CnnSection:
    lr: float = 0.01
    epochs: int = 200
    batch: int = 1
    seed: int = 0
    dropout: float = 0.5
    val_fraction: float = 0.2  # 0 trains on every image


@dataclass(frozen=True)
class CrfSection:
    method: str = "none"
    alpha: float = 1.0
    beta: float | None = None  # auto: 20 for icm, 1 for bp
    T: float | None = None  # auto: 1e-6 per region pixel
    iters: int = 20
    w1: float = 0.1
    w2: float = 3.0
    sigma_alpha: float = 60.0
    sigma_beta: float = 10.0
    sigma_gamma: float = 1.0


@dataclass(frozen=True)
class IoSection:
    dataset: str = ""
    model: str = ""
    output: str = ""


@dataclass(frozen=True)
class Config:
    slic: SlicSection = field(default_factory=SlicSection)
    cnn: CnnSection = field(default_factory=CnnSection)
    crf: CrfSection = field(default_factory=CrfSection)
    io: IoSection = field(default_factory=IoSection)

    def validate(self) -> "Config":
        s, c, r = self.slic, self.cnn, self.crf
        checks = [
            (s.rows >= 1 and s.cols >= 1, "slic.rows and slic.cols must be >= 1"),
            (s.m > 0, "slic.m must be > 0"),
            (s.iters >= 1, "slic.iters must be >= 1"),
            (c.lr >= 0, "cnn.lr must be >= 0"),
            (c.epochs >= 0, "cnn.epochs must be >= 0"),
            (c.batch >= 1, "cnn.batch must be >= 1"),
            (0 <= c.dropout < 1, "cnn.dropout must be in [0, 1)"),
            (0 <= c.val_fraction < 1, "cnn.val_fraction must be in [0, 1)"),
            (r.method in METHODS, f"crf.method must be one of {', '.join(METHODS)}"),
            (r.iters >= 1, "crf.iters must be >= 1"),
            (min(r.sigma_alpha, r.sigma_beta, r.sigma_gamma) > 0, "crf sigmas must be > 0"),
            (r.alpha >= 0 and r.w1 >= 0 and r.w2 >= 0, "crf.alpha, crf.w1 and crf.w2 must be >= 0"),
            (r.beta is None or r.beta >= 0, "crf.beta must be >= 0"),
            (r.T is None or r.T >= 0, "crf.T must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _convert(raw: str, default, key: str):
    try:
        if key in ("crf.beta", "crf.T"):
            return None if raw.lower() == AUTO else float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse(text: str, base: Config | None = None) -> Config:
    """Parse config text; keys not given keep the values of ``base``."""
    cfg = base or Config()
    updates: dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or "." not in key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        section, _, name = key.partition(".")
        sec = getattr(cfg, section, None) if section in {f.name for f in fields(Config)} else None
        if sec is None or name not in {f.name for f in fields(sec)}:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _convert(value, getattr(SECTION_DEFAULTS[section], name), key)
    for section, vals in updates.items():
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **vals)})
    return cfg.validate()


def load(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse(text)


def dump(cfg: Config) -> str:
    lines = []
    for sec in fields(Config):
        values = getattr(cfg, sec.name)
        for f in fields(values):
            v = getattr(values, f.name)
            text = AUTO if v is None else repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{sec.name}.{f.name} = {text}")
    return "\n".join(lines) + "\n"


SECTION_DEFAULTS = {
    "slic": SlicSection(),
    "cnn": CnnSection(),
    "crf": CrfSection(),
    "io": IoSection(),
}
