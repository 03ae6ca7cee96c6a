"""Flat ``key = value`` run configuration with typed validation."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line when known."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    gamma: float = 1.0
    mass: float = 1.0
    cutoff_base: float = 2.0
    box: float = 2.0
    grid_n: int = 256
    center: tuple[float, ...] = (0.0, 0.0)
    bands: str = "auto"  # "auto" (truncate at the grid scale) or an integer
    seed: int = 0
    walkers: int = 4096
    dt: str = "auto"  # "auto" or a positive float
    t_grid: tuple[float, ...] = (0.01, 0.02, 0.04, 0.07, 0.1)
    radii: tuple[float, ...] = (0.0625, 0.125, 0.25, 0.5)
    x: tuple[float, ...] = (0.0, 0.0)
    q: float = 1.0
    mask: str = "disc:0,0,0.5"
    eigen_k: int = 128
    threads: int = 1
    retain_bands: bool = False
    out: str = "out"

    def validate(self) -> "RunConfig":
        lines = getattr(self, "_lines", {})

        def fail(key, msg):
            where = f"line {lines[key]}: " if key in lines else ""
            raise ConfigError(f"{where}{key}: {msg}")

        if not 0.0 <= self.gamma < 2.0:
            fail("gamma", f"must lie in [0, 2), got {self.gamma}")
        if not self.mass > 0:
            fail("mass", "must be positive")
        if not self.cutoff_base > 1:
            fail("cutoff_base", "must exceed 1")
        if not self.box > 0:
            fail("box", "must be positive")
        if self.grid_n < 2 or self.grid_n & (self.grid_n - 1):
            fail("grid_n", f"must be a power of two, got {self.grid_n}")
        if not (0 <= self.seed < 2**64):
            fail("seed", "must be an unsigned 64-bit integer")
        if self.bands != "auto":
            try:
                if int(self.bands) < 0:
                    raise ValueError
            except ValueError:
                fail("bands", f"must be 'auto' or a non-negative integer, got {self.bands!r}")
        if self.dt != "auto":
            try:
                if not float(self.dt) > 0:
                    raise ValueError
            except ValueError:
                fail("dt", f"must be 'auto' or positive, got {self.dt!r}")
        if self.walkers < 1:
            fail("walkers", "must be positive")
        if any(t <= 0 for t in self.t_grid):
            fail("t_grid", "times must be positive")
        if any(r <= 0 for r in self.radii):
            fail("radii", "radii must be positive")
        if len(self.center) != 2:
            fail("center", "needs two coordinates")
        if len(self.x) != 2:
            fail("x", "needs two coordinates")
        if self.q < 0:
            fail("q", "must be non-negative")
        if self.eigen_k < 1:
            fail("eigen_k", "must be positive")
        if self.threads < 1:
            fail("threads", "must be positive")
        kind = self.mask.split(":", 1)[0]
        if kind not in ("disc", "rect"):
            fail("mask", "must be 'disc:cx,cy,R' or 'rect:x0,x1,y0,y1'")
        try:
            vals = _floats(self.mask.split(":", 1)[1])
        except (IndexError, ValueError):
            fail("mask", f"cannot parse {self.mask!r}")
        if len(vals) != (3 if kind == "disc" else 4):
            fail("mask", f"wrong number of values in {self.mask!r}")
        return self

    def serialize(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    def override(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw).validate()


_PARSERS = {
    float: float,
    int: int,
    str: str,
    bool: lambda s: {"true": True, "false": False, "1": True, "0": False}[s.lower()],
    "floats": _floats,
}


def _parser_for(name: str):
    default = getattr(RunConfig, name, None)
    if isinstance(default, tuple):
        return _floats
    return _PARSERS[type(default)]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(key)(val)
        except (ValueError, KeyError):
            raise ConfigError(f"{source}: line {lineno}: bad value {val!r} for {key}") from None
        lines[key] = lineno
    cfg = RunConfig(**values)
    object.__setattr__(cfg, "_lines", lines)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
