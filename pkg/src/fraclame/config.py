"""Run configuration: JSON schema, validation, deterministic hashing and the
construction of grids, partitions, parameter fields and dictionaries.

Field specs are lists of tagged terms that are summed and then restricted to
omega::

    {"type": "constant", "value": 1.0}
    {"type": "bump", "center": [x, y, z], "radius": r, "amplitude": a}
    {"type": "affine", "gradient": [gx, gy, gz], "offset": c}   # clipped to >= 0

A bare number is shorthand for a constant term.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .forms import LameParameters, NonlinearCoefficients
from .fractional import FracContext
from .grid import (BoxGrid, GeometryError, NodePartition, Region, build_grid, classify_nodes, make_cutoff,
                   scalar_bump)


class ConfigError(ValueError):
    """The run configuration is malformed or violates a module precondition."""


DEFAULTS: dict = {
    "grid": {"L": 1.0, "N": 16},
    "s": 0.5,
    "seed": 0,
    "regions": {
        "omega": {"shape": "box", "center": [0, 0, 0], "half_extents": [0.45, 0.45, 0.45]},
        "w1": {"shape": "frame", "center": [0, 0, 0], "inner": 0.55, "outer": 0.7},
        "w2": {"shape": "frame", "center": [0, 0, 0], "inner": 0.55, "outer": 0.7},
    },
    "obstacles": {
        "d1": {"shape": "ball", "center": [0, 0, 0], "radius": 0.15},
        "d2": {"shape": "ball", "center": [0.1, 0, 0], "radius": 0.15},
    },
    "parameters": {
        "p1": {"lambda0": 0.5, "mu0": 1.0, "lambda": [1.0], "mu": [1.0]},
        "p2": None,
    },
    "nonlinear": {
        "c1": {"A": [0.3], "B": [0.2], "C": [0.1]},
        "c2": None,
    },
    "solver": {"tol": 1e-11, "max_iter": 2000, "newton_tol": 1e-11, "continuation_steps": 4},
    "runge": {"radius": None, "stride": 1, "alpha_rel": 1e-8, "alpha": None, "max_relative_residual": 0.05},
    "psi": {"center": [0, 0, 0], "radii": [0.25, 0.15, 0.2]},
    "forward": {"kind": "linear", "data": [{"center": [0.0, 0.0, 0.625], "radius": [0.3, 0.3, 0.12],
                                            "amplitude": [0.01, 0.0, 0.01]}]},
    "dtn": {"controls": 6, "tests": 6, "radius": None},
    "obstacle_test": {"data": {"center": [0.625, 0.0, 0.0], "radius": [0.12, 0.3, 0.3],
                               "amplitude": [1.0, 0.5, 0.25]},
                      "tests": 12},
}

_TOP_KEYS = set(DEFAULTS) | {"description"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base and path == "" and k != "description":
            raise ConfigError(f"unknown configuration key {k!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k not in ("omega", "w1", "w2", "d1", "d2"):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class RunConfig:
    """Validated configuration plus the objects derived from it."""

    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return RunConfig.from_dict(raw)

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    # ---------------------------------------------------------- derived objects

    def grid(self) -> BoxGrid:
        g = self.raw["grid"]
        return build_grid(g["L"], g["N"])

    def context(self, workers: int = 1) -> FracContext:
        return FracContext(self.grid(), float(self.raw["s"]), workers=workers)

    def region(self, name: str) -> Region:
        spec = self.raw["regions"][name] if name in self.raw["regions"] else self.raw["obstacles"][name]
        return _region(spec, name)

    def partition(self, obstacle: str | None = None) -> NodePartition:
        obs = None if obstacle is None else self.region(obstacle)
        return classify_nodes(self.grid(), self.region("omega"), obs, self.region("w1"), self.region("w2"))

    def lame(self, which: str, omega: np.ndarray) -> LameParameters:
        spec = self.raw["parameters"][which]
        if spec is None:
            spec = self.raw["parameters"]["p1"]
        g = self.grid()
        return LameParameters(float(spec["lambda0"]), float(spec["mu0"]),
                              field_from_spec(spec["lambda"], g, omega, f"{which}.lambda"),
                              field_from_spec(spec["mu"], g, omega, f"{which}.mu"))

    def coefficients(self, which: str, omega: np.ndarray) -> NonlinearCoefficients:
        spec = self.raw["nonlinear"][which]
        if spec is None:
            spec = self.raw["nonlinear"]["c1"]
        g = self.grid()
        return NonlinearCoefficients(*(field_from_spec(spec[k], g, omega, f"{which}.{k}") for k in "ABC"))

    def psi(self) -> tuple:
        """(psi field, psi support region)."""
        p = self.raw["psi"]
        radii = [float(r) for r in p["radii"]]
        sup = Region.box(tuple(p["center"]), tuple(radii))
        return scalar_bump(self.grid(), p["center"], radii), sup

    # ---------------------------------------------------------- validation

    def validate(self):
        r = self.raw
        unknown = set(r) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        try:
            g = self.grid()
        except (GeometryError, KeyError, TypeError) as exc:
            raise ConfigError(f"grid: {exc}") from exc
        s = r["s"]
        if not isinstance(s, (int, float)) or not 0 < s < 1:
            raise ConfigError(f"s must lie in (0, 1), got {s!r}")
        if not isinstance(r["seed"], int) or not 0 <= r["seed"] < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            part = self.partition()
            for name in ("d1", "d2"):
                if r["obstacles"].get(name) is not None:
                    self.partition(name)
        except (GeometryError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"regions: {exc}") from exc
        try:
            for which in ("p1", "p2"):
                self.lame(which, part.omega)
            c1, c2 = (self.coefficients(w, part.omega) for w in ("c1", "c2"))
        except (GeometryError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"parameters: {exc}") from exc
        if not np.array_equal(c1.B_field, c2.B_field):
            raise ConfigError("nonlinear coefficient sets must share B")
        sv = r["solver"]
        for k in ("tol", "newton_tol"):
            if not isinstance(sv[k], (int, float)) or not 0 < sv[k] < 1:
                raise ConfigError(f"solver.{k} must lie in (0, 1)")
        for k in ("max_iter", "continuation_steps"):
            if not isinstance(sv[k], int) or sv[k] < 1:
                raise ConfigError(f"solver.{k} must be a positive integer")
        rg = r["runge"]
        if rg["alpha"] is not None and not (isinstance(rg["alpha"], (int, float)) and rg["alpha"] >= 0):
            raise ConfigError("runge.alpha must be null or nonnegative")
        if not isinstance(rg["alpha_rel"], (int, float)) or rg["alpha_rel"] < 0:
            raise ConfigError("runge.alpha_rel must be nonnegative")
        if not isinstance(rg["stride"], int) or rg["stride"] < 1:
            raise ConfigError("runge.stride must be a positive integer")
        if rg["radius"] is not None and not (isinstance(rg["radius"], (int, float)) and rg["radius"] > 0):
            raise ConfigError("runge.radius must be null or positive")
        try:
            psi, sup = self.psi()
            make_cutoff(sup, self.region("omega"), g)
        except (GeometryError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"psi: {exc}") from exc
        if not np.any(psi):
            raise ConfigError("psi has no nonzero node")
        if r["forward"]["kind"] not in ("linear", "obstacle", "nonlinear"):
            raise ConfigError("forward.kind must be linear, obstacle or nonlinear")
        try:
            self.vector_field(r["forward"]["data"])
            self.vector_field([r["obstacle_test"]["data"]])
        except (GeometryError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"exterior data: {exc}") from exc
        for k in ("controls", "tests"):
            if not isinstance(r["dtn"][k], int) or r["dtn"][k] < 1:
                raise ConfigError(f"dtn.{k} must be a positive integer")

    def vector_field(self, terms: list) -> np.ndarray:
        """Sum of vector bumps ``amplitude * bump(center, radius)``."""
        g = self.grid()
        out = np.zeros((3,) + g.shape)
        if isinstance(terms, dict):
            terms = [terms]
        for t in terms:
            amp = np.asarray(t["amplitude"], dtype=float)
            if amp.shape != (3,):
                raise ConfigError("vector amplitude needs three components")
            out += amp[:, None, None, None] * scalar_bump(g, t["center"], t["radius"])
        return out


def _region(spec: dict, name: str) -> Region:
    if not isinstance(spec, dict) or "shape" not in spec:
        raise ConfigError(f"region {name} needs a shape")
    try:
        return Region.from_dict(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"region {name}: {exc}") from exc


def field_from_spec(spec, grid: BoxGrid, omega: np.ndarray, name: str = "field") -> np.ndarray:
    """Evaluate a summable field spec and restrict it to omega."""
    terms = spec if isinstance(spec, list) else [spec]
    x = grid.coordinates()
    out = np.zeros(grid.shape)
    for t in terms:
        if isinstance(t, (int, float)) and not isinstance(t, bool):
            t = {"type": "constant", "value": t}
        if not isinstance(t, dict) or "type" not in t:
            raise ConfigError(f"{name}: each term needs a type")
        kind = t["type"]
        if kind == "constant":
            out += float(t["value"])
        elif kind == "bump":
            out += float(t["amplitude"]) * scalar_bump(grid, t["center"], t["radius"])
        elif kind == "affine":
            gvec = np.asarray(t["gradient"], dtype=float).reshape(3, 1, 1, 1)
            out += np.maximum(np.sum(gvec * x, axis=0) + float(t.get("offset", 0.0)), 0.0)
        else:
            raise ConfigError(f"{name}: unknown term type {kind!r}")
    if not np.all(np.isfinite(out)):
        raise ConfigError(f"{name}: non-finite values")
    return out * omega


def shipped_config(name: str) -> Path:
    """Path of a configuration shipped with the package (e.g. ``"default"``)."""
    here = Path(__file__).parent / "configs" / f"{name}.json"
    if not here.exists():
        raise ConfigError(f"no shipped configuration named {name!r}")
    return here


def make_setup(cfg: RunConfig, ctx: FracContext, partition: NodePartition, cache_dir=None):
    """Runge setup (dictionaries and regularization) described by the configuration."""
    from .experiments import RungeSetup
    from .runge import build_dictionary

    rg = cfg.raw["runge"]
    controls = build_dictionary(ctx.grid, partition.w1, radius=rg["radius"], stride=rg["stride"])
    if cfg.raw["regions"]["w2"] == cfg.raw["regions"]["w1"]:
        tests = controls
    else:
        tests = build_dictionary(ctx.grid, partition.w2, radius=rg["radius"], stride=rg["stride"])
    if controls.size == 0 or tests.size == 0:
        raise ConfigError("runge dictionary is empty; enlarge W1/W2 or reduce the atom radius")
    return RungeSetup(ctx, partition, controls, tests, alpha_rel=rg["alpha_rel"], alpha=rg["alpha"],
                      max_relative_residual=rg["max_relative_residual"], cache_dir=cache_dir)
