"""INI pipeline configuration.

Example::

    [dataset]
    kind = spin
    n = 32
    n_images = 2000
    noise_ratio = 30

    [lowres]
    size = 8
    q = 4

    [graph]
    kind = sym-knn
    k = 10

    [specvols]
    r = 9
    r_values = 2,3,4,5,6,7,8,9
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError, InvalidSpec
from .simulate import DatasetConfig


@dataclass
class LowResConfig:
    size: int = 8
    q: int = 4
    cg_tol: float = 1e-6
    cg_maxiter: int = 300


@dataclass
class GraphConfig:
    kind: str = "sym-knn"
    k: int = 10
    sigma_w: Optional[float] = None
    alpha: float = 0.0  # density normalization, gaussian graphs only


@dataclass
class SpecvolsConfig:
    r: int = 9
    r_values: tuple = ()
    cg_tol: float = 1e-6
    cg_maxiter: int = 300
    diagonal: bool = False
    precondition: bool = False
    band_limit: bool = True
    tau: float = 0.0
    deterministic: bool = False

    @property
    def solve_for(self) -> tuple:
        return tuple(sorted(set(self.r_values))) if self.r_values else (self.r,)


@dataclass
class EvalConfig:
    n_fsc: int = 256  # 0 = every image
    reconstruct: tuple = ()
    svg: bool = True


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    lowres: LowResConfig = field(default_factory=LowResConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    specvols: SpecvolsConfig = field(default_factory=SpecvolsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: str = "results"

    def validate(self) -> "PipelineConfig":
        if self.specvols.r < 1 or any(r < 1 for r in self.specvols.solve_for):
            raise ConfigError("r must be >= 1")
        if max(self.specvols.solve_for) > self.specvols.r:
            raise ConfigError("r_values may not exceed r")
        if self.lowres.q < 1:
            raise ConfigError("q must be >= 1")
        if self.graph.kind not in ("sym-knn", "knn", "gaussian"):
            raise ConfigError(f"unknown graph kind {self.graph.kind!r}")
        if self.graph.kind == "gaussian" and not self.graph.sigma_w:
            raise ConfigError("gaussian graph needs sigma_w")
        if self.graph.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.lowres.size > self.dataset.n or self.lowres.size % 2:
            raise ConfigError("lowres size must be even and at most n")
        return self


def _convert(value: str, default, name: str):
    kind = type(default)
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            conv = float if name in ("defocus_um",) else int
            return tuple(conv(v) for v in items)
        if default is None:
            if value.strip().lower() in ("", "none"):
                return None
            return int(value) if name == "delta_max" else float(value)
        return kind(value.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for {name}") from exc


def _fill(cls, section: Optional[configparser.SectionProxy], name: str):
    if section is None:
        return cls()
    defaults = cls() if cls is not DatasetConfig else DatasetConfig()
    known = {f.name.lower(): f.name for f in fields(cls)}  # keys are case-insensitive
    kwargs = {}
    for key, raw in section.items():
        if key.lower() not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        attr = known[key.lower()]
        kwargs[attr] = _convert(raw, getattr(defaults, attr), attr)
    try:
        return cls(**kwargs)
    except (InvalidSpec, TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"dataset", "lowres", "graph", "specvols", "eval", "output"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    get = lambda s: cp[s] if cp.has_section(s) else None  # noqa: E731
    out = cp.get("output", "dir", fallback="results") if cp.has_section("output") else "results"
    cfg = PipelineConfig(
        dataset=_fill(DatasetConfig, get("dataset"), "dataset"),
        lowres=_fill(LowResConfig, get("lowres"), "lowres"),
        graph=_fill(GraphConfig, get("graph"), "graph"),
        specvols=_fill(SpecvolsConfig, get("specvols"), "specvols"),
        eval=_fill(EvalConfig, get("eval"), "eval"),
        output=out,
    )
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["dataset"]["defocus_um"] = list(d["dataset"]["defocus_um"])
    return d
