"""Exterior Dirichlet-to-Neumann pairings and gap matrices.

Every map is evaluated in weak form, ``<Lambda g, h> = -B[u_g, h]`` with u_g the
solution generated by the exterior data g.  Test fields h sit at least two
grid steps from omega, so local and nonlinear terms never see them and one
formula covers the linear, obstacle and nonlinear problems.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .forms import (LameParameters, NonlinearCoefficients, bilinear_B, integral_identity_rhs,
                    stiffness_apply)
from .fractional import FracContext, difference_gradient
from .grid import GeometryError, NodePartition
from .solvers import (DirectSolver, NewtonOptions, solve_exterior_linear, solve_exterior_nonlinear,
                      solve_obstacle)

__all__ = ["DtnGapMatrix", "dtn_pair", "dtn_gap_matrix", "dtn_pairing_vector", "integral_identity_rhs",
           "parameter_digest", "check_test_field"]

KINDS = ("linear", "obstacle", "nonlinear")


def parameter_digest(p: LameParameters, c: NonlinearCoefficients | None = None) -> str:
    h = hashlib.sha256()
    h.update(np.array([p.lambda0, p.mu0], dtype="<f8").tobytes())
    for arr in (p.lambda_field, p.mu_field) + (() if c is None else (c.A_field, c.B_field, c.C_field)):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def check_test_field(h: np.ndarray, partition: NodePartition, ctx: FracContext):
    """A test field must vanish on omega together with its centered differences."""
    om = partition.omega
    if np.any(h[..., om] != 0) or np.any(difference_gradient(h, ctx)[..., om] != 0):
        raise GeometryError("test field must keep at least two grid steps from omega")


def _solve(g, p, ctx, partition, kind, c, tol, newton):
    if kind == "linear":
        return solve_exterior_linear(g, p, ctx, partition.without_obstacle(), tol)[0], p
    if kind == "obstacle":
        return solve_obstacle(g, p, ctx, partition, tol)[0], p.restricted(partition.free)
    if kind == "nonlinear":
        if c is None:
            raise ValueError("nonlinear pairing needs a coefficient set")
        return solve_exterior_nonlinear(g, p, c, ctx, partition.without_obstacle(), newton)[0], p
    raise ValueError(f"unknown problem kind {kind!r}; expected one of {KINDS}")


def dtn_pair(g: np.ndarray, h: np.ndarray, p: LameParameters, ctx: FracContext, partition: NodePartition,
             kind: str = "linear", c: NonlinearCoefficients | None = None, tol: float = 1e-11,
             newton: NewtonOptions = NewtonOptions()) -> float:
    """``<Lambda g, h>`` for the chosen problem kind."""
    check_test_field(h, partition, ctx)
    if not np.any(g):
        return 0.0
    u, p_eff = _solve(g, p, ctx, partition, kind, c, tol, newton)
    return -bilinear_B(u, h, p_eff, ctx)


def dtn_pairing_vector(u: np.ndarray, tests: np.ndarray, p: LameParameters, ctx: FracContext) -> np.ndarray:
    """``-B[u, h_b]`` for a batch of test fields, through one representer evaluation."""
    r = stiffness_apply(u, p, ctx)
    flat = r.reshape(r.shape[:-4] + (-1,))
    return -ctx.grid.cell_volume * flat @ tests.reshape(len(tests), -1).T


@dataclass
class DtnGapMatrix:
    """``values[a, b] = <(Lambda1 - Lambda2) g_a, h_b>``."""

    values: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    @property
    def max_abs(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def contract(self, c: np.ndarray, d: np.ndarray) -> float:
        return float(np.asarray(c) @ self.values @ np.asarray(d))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": list(self.values.shape), "max_abs": self.max_abs,
                "values": self.values.tolist(), **self.meta}


def dtn_gap_matrix(p1: LameParameters, p2: LameParameters, controls: np.ndarray, tests: np.ndarray,
                   ctx: FracContext, partition, kind: str = "linear",
                   c1: NonlinearCoefficients | None = None, c2: NonlinearCoefficients | None = None,
                   tol: float = 1e-11, newton: NewtonOptions = NewtonOptions(),
                   direct: bool = False) -> DtnGapMatrix:
    """Gap matrix over batches of control and test fields.

    ``partition`` is one partition or a pair (one per side), the latter for
    comparing obstacles.  Each control is solved once per side; pairings use
    the stiffness representer so the tests cost nothing extra.
    """
    parts = tuple(partition) if isinstance(partition, (tuple, list)) else (partition, partition)
    controls = np.asarray(controls, dtype=float)
    tests = np.asarray(tests, dtype=float)
    if len(controls) == 0 or len(tests) == 0:
        raise ValueError("gap matrices need nonempty dictionaries")
    for h in tests:
        for part in parts:
            check_test_field(h, part, ctx)
    rows = np.zeros((len(controls), len(tests)))
    sides = ((p1, c1, parts[0], 1.0), (p2, c2, parts[1], -1.0))
    for p, c, part, sign in sides:
        if direct and kind != "nonlinear":
            p_eff = p if kind == "linear" else p.restricted(part.free)
            free = part.omega if kind == "linear" else part.free
            u, _ = DirectSolver(p_eff, ctx, free).solve(controls)
            rows += sign * dtn_pairing_vector(u, tests, p_eff, ctx)
            continue
        for a, g in enumerate(controls):
            if not np.any(g):
                continue
            u, p_eff = _solve(g, p, ctx, part, kind, c, tol, newton)
            rows[a] += sign * dtn_pairing_vector(u, tests, p_eff, ctx)
    meta = {"parameters_1": parameter_digest(p1, c1), "parameters_2": parameter_digest(p2, c2)}
    return DtnGapMatrix(rows, kind, meta)
