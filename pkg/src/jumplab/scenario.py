"""Flat TOML scenario files.

Every key has a declared type and default; unknown keys are rejected and
every error names the key.  ``to_toml`` writes the canonical form (all keys,
sorted), and parsing it back gives an identical Scenario.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError
from .fields import Potential
from .geometry import BallDomain
from .model import PRESETS, OperatorModel, parse_potential, preset
from .partition import ExitPartition
from .sim import PathConfig

EXPERIMENTS = (
    "exit-time", "harmonic-measure", "dirichlet", "gauge", "schrodinger", "green-row",
    "kato", "certificate", "harnack", "structural",
)
SMALL_JUMPS = ("diffusion-correction", "drop")


@dataclass
class Scenario:
    name: str = "default"
    preset: str = "identity"
    d: int = 3
    c: float = 1.0
    alpha: float = 1.0
    spd_eps: float = 0.1
    potential: str = "zero"
    radius: float = 0.5
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    dt: float = 0.0  # 0 -> R^2/500
    eps: float = 0.0  # 0 -> min(R/10, 1/2)
    small_jumps: str = "diffusion-correction"
    bridge: bool = True
    truncated: bool = False
    t_max: float = 0.0  # 0 -> 1e4 R^2
    n_paths: int = 100_000
    n_paths_fine: int = 400_000
    mesh_cells: int = 8  # cells per radius of the default mesh
    mesh_pair: list = field(default_factory=lambda: [6, 12])
    r_ext: float = 3.0  # in units of R
    probe_spacing: float = 0.0  # 0 -> R/4
    probe_points: list = field(default_factory=list)  # explicit probes override the lattice
    boundary_data: str = "halfspace:1.0,0.37,0.21"
    experiments: list = field(default_factory=lambda: ["exit-time"])
    seed: int = 0
    paper_mode: bool = True
    expect_refusal: bool = False
    out: str = ""

    # ------------------------------------------------------------ checks

    def validate(self, diagnostic_ok: bool = False) -> "Scenario":
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}; expected one of {', '.join(PRESETS)}")
        if self.d < 3:
            raise ConfigError("d: dimension must be >= 3")
        if not 0.0 < self.alpha < 2.0:
            raise ConfigError("alpha: must lie in (0, 2)")
        if not self.c > 0:
            raise ConfigError("c: must be positive")
        if not 0.0 <= self.spd_eps < 10.0:
            raise ConfigError("spd_eps: must lie in [0, 10)")
        if not self.radius > 0:
            raise ConfigError("radius: must be positive")
        if len(self.center) != self.d:
            raise ConfigError(f"center: expected {self.d} coordinates, got {len(self.center)}")
        if not all(math.isfinite(v) for v in self.center):
            raise ConfigError("center: coordinates must be finite")
        diagnostic = self.preset.endswith("diagnostic")
        if self.paper_mode and not diagnostic_ok:
            if diagnostic:
                raise ConfigError(f"preset: {self.preset!r} is a diagnostic preset; pass --diagnostic-ok "
                                  "or set paper_mode = false")
            if self.radius > 0.5:
                raise ConfigError("radius: must lie in (0, 1/2] in paper mode")
        for key in ("dt", "eps", "t_max", "probe_spacing"):
            v = getattr(self, key)
            if v < 0 or not math.isfinite(v):
                raise ConfigError(f"{key}: must be >= 0 (0 selects the default)")
        if self.small_jumps not in SMALL_JUMPS:
            raise ConfigError(f"small_jumps: expected one of {', '.join(SMALL_JUMPS)}")
        if self.n_paths < 10:
            raise ConfigError("n_paths: need at least 10 paths")
        if self.n_paths_fine < self.n_paths:
            raise ConfigError("n_paths_fine: must be >= n_paths")
        if self.mesh_cells < 5:
            raise ConfigError("mesh_cells: need at least 5 cells per radius")
        if len(self.mesh_pair) != 2 or not 5 <= self.mesh_pair[0] < self.mesh_pair[1]:
            raise ConfigError("mesh_pair: expected [coarse, fine] cells per radius with 5 <= coarse < fine")
        if self.mesh_pair[1] != 2 * self.mesh_pair[0]:
            raise ConfigError("mesh_pair: fine must be twice coarse so coarse centers are fine centers")
        if not self.r_ext > 1.0:
            raise ConfigError("r_ext: must exceed 1 (units of R)")
        for i, p in enumerate(self.probe_points):
            if len(p) != self.d:
                raise ConfigError(f"probe_points: point {i} has {len(p)} coordinates, expected {self.d}")
            rel = np.asarray(p, dtype=float) - np.asarray(self.center, dtype=float)
            if not np.linalg.norm(rel) < self.radius:
                raise ConfigError(f"probe_points: point {i} is not inside the ball")
        for e in self.experiments:
            if e not in EXPERIMENTS:
                raise ConfigError(f"experiments: unknown experiment {e!r}; expected one of {', '.join(EXPERIMENTS)}")
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        try:
            parse_potential(self.potential, self.d)
        except ConfigError as exc:
            raise ConfigError(f"potential: {exc}") from None
        self.boundary_function()
        return self

    # ------------------------------------------------------------ builders

    def model(self) -> OperatorModel:
        return preset(self.preset, d=self.d, c=self.c, alpha=self.alpha,
                      potential=self.potential, spd_eps=self.spd_eps)

    def q(self) -> Potential:
        return parse_potential(self.potential, self.d)

    def domain(self) -> BallDomain:
        return BallDomain(np.asarray(self.center, dtype=float), float(self.radius))

    def partition(self) -> ExitPartition:
        return ExitPartition(self.domain(), r_ext=self.r_ext * self.radius)

    def path_config(self, radius: float | None = None) -> PathConfig:
        R = self.radius if radius is None else radius
        kw = dict(small_jumps=self.small_jumps, bridge=self.bridge, truncated=self.truncated,
                  seed=self.seed)
        cfg = PathConfig.for_radius(R, **kw)
        upd = {}
        if self.dt > 0 and radius is None:
            upd["dt"] = self.dt
        if self.eps > 0 and radius is None:
            upd["eps"] = self.eps
        if self.t_max > 0:
            upd["t_max"] = self.t_max
        if upd:
            cfg = PathConfig(**{**asdict(cfg), **upd})
        return cfg

    def spacing(self) -> float:
        return self.probe_spacing if self.probe_spacing > 0 else self.radius / 4.0

    def probes(self) -> np.ndarray:
        """Explicit ``probe_points`` or the lattice of the probe spacing centred at
        x0, strictly inside the ball."""
        if self.probe_points:
            return np.array(self.probe_points, dtype=float)
        dom = self.domain()
        s = self.spacing()
        n = int(math.floor(self.radius / s + 1e-12))
        ax = np.arange(-n, n + 1) * s
        G = np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)
        G = G[np.linalg.norm(G, axis=1) < self.radius * (1 - 1e-9)]
        return dom.center + G

    def boundary_function(self):
        """Parse ``boundary_data``: ``const:v``, ``halfspace:n1,..,nd`` or ``cap:n1,..,nd:cos``."""
        s = self.boundary_data.strip()
        parts = s.split(":")
        c0 = np.asarray(self.center, dtype=float)
        try:
            if parts[0] == "const" and len(parts) == 2:
                v = float(parts[1])
                return lambda y: np.full(np.atleast_2d(y).shape[0], v)
            if parts[0] in ("halfspace", "cap"):
                n = np.array([float(t) for t in parts[1].split(",")])
                if n.size != self.d or not np.linalg.norm(n) > 0:
                    raise ConfigError(f"boundary_data: direction needs {self.d} coordinates, not all zero")
                n = n / np.linalg.norm(n)
                if parts[0] == "halfspace" and len(parts) == 2:
                    return lambda y: ((np.atleast_2d(y) - c0) @ n > 0).astype(float)
                if parts[0] == "cap" and len(parts) == 3:
                    cs = float(parts[2])

                    def cap(y):
                        r = np.atleast_2d(y) - c0
                        return ((r @ n) / np.linalg.norm(r, axis=1) > cs).astype(float)
                    return cap
        except ValueError as exc:
            raise ConfigError(f"boundary_data: cannot parse {s!r}: {exc}") from None
        raise ConfigError(f"boundary_data: unknown form {s!r}")

    # ------------------------------------------------------------ io

    def canonical(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = [list(x) if isinstance(x, list) else x for x in v]
            out[f.name] = v
        return dict(sorted(out.items()))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.canonical())


_TYPES = {f.name: f.type for f in fields(Scenario)}
_DEFAULTS = Scenario()


def _coerce(key: str, value, kind: str):
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        v = float(value)
        if not math.isfinite(v):
            raise ConfigError(f"{key}: must be finite")
        return v
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if kind == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected an array, got {value!r}")
        ref = getattr(_DEFAULTS, key)
        if key == "probe_points":
            out = []
            for p in value:
                if not isinstance(p, list) or not all(
                        isinstance(v, (int, float)) and not isinstance(v, bool) for v in p):
                    raise ConfigError(f"{key}: expected an array of numeric arrays")
                out.append([float(v) for v in p])
            return out
        if ref and isinstance(ref[0], str):
            if not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{key}: expected an array of strings")
            return list(value)
        if ref and isinstance(ref[0], int) and not isinstance(ref[0], bool):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{key}: expected an array of integers")
            return list(value)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected an array of numbers")
        return [float(v) for v in value]
    raise AssertionError(kind)


def from_dict(data: dict, diagnostic_ok: bool = False, validate: bool = True) -> Scenario:
    unknown = sorted(set(data) - set(_TYPES))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    kw = {}
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{k}: nested tables are not allowed (the format is flat)")
        kw[k] = _coerce(k, v, _TYPES[k])
    sc = Scenario(**kw)
    if "center" not in data and sc.d != 3:
        sc.center = [0.0] * sc.d
    return sc.validate(diagnostic_ok) if validate else sc


def loads(text: str, diagnostic_ok: bool = False) -> Scenario:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"<file>: not valid TOML: {exc}") from None
    return from_dict(data, diagnostic_ok)


def load(path, diagnostic_ok: bool = False) -> Scenario:
    with open(path, "rb") as fh:
        raw = fh.read()
    return loads(raw.decode("utf-8"), diagnostic_ok)
