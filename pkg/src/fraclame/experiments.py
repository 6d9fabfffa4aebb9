"""Inversion experiments: moment recovery of Lamé-parameter differences from DtN
gaps, the constant-elimination systems, obstacle distinguishing, and recovery of
the (A, C) nonlinear coefficients through second linearization.

The uniqueness arguments pair special test states.  Here those states are
Runge-approximated by exterior controls; the DtN gap for the approximating
controls is compared with a direct nodal quadrature of the target moment, and
every comparison carries an a-posteriori error budget built from the actual
approximation residual fields.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dtn import DtnGapMatrix, check_test_field, parameter_digest
from .forms import (LameParameters, NonlinearCoefficients, G_tilde, bilinearized_N_tilde,
                    integral_identity_rhs, stiffness_apply, stress_divergence)
from .fractional import FracContext, difference_gradient, partial_derivative
from .grid import GeometryError, NodePartition, Region, make_cutoff_coordinate
from .runge import ControlDictionary, ResponseSet, build_response_matrix, runge_approximate
from .solvers import DirectSolver, NewtonOptions, solve_exterior_nonlinear, solve_obstacle

log = logging.getLogger(__name__)

AXES = (0, 1, 2)


# ---------------------------------------------------------------- reports

@dataclass
class MomentResult:
    experiment: str
    quantity: str
    axis: int
    recovered: float
    truth: float
    budget: float
    residuals: list
    truth_spectral: float = float("nan")

    @property
    def error(self) -> float:
        return abs(self.recovered - self.truth)

    @property
    def relative_error(self) -> float:
        return self.error / abs(self.truth) if self.truth != 0 else float("inf") if self.error else 0.0

    @property
    def within_budget(self) -> bool:
        return self.error <= self.budget

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(relative_error=self.relative_error, within_budget=self.within_budget)
        return d

    def csv_row(self) -> list:
        return [self.experiment, f"{self.quantity}_moment_{self.axis + 1}", self.recovered, self.truth,
                self.budget, self.relative_error]


@dataclass
class MomentReport:
    results: list = field(default_factory=list)

    def add(self, r: MomentResult):
        self.results.append(r)

    def get(self, quantity: str, axis: int) -> MomentResult:
        for r in self.results:
            if r.quantity == quantity and r.axis == axis:
                return r
        raise KeyError((quantity, axis))

    @property
    def max_relative_error(self) -> float:
        return max((r.relative_error for r in self.results), default=0.0)

    @property
    def all_within_budget(self) -> bool:
        return all(r.within_budget for r in self.results)

    def to_dict(self) -> dict:
        return {"moments": [r.to_dict() for r in self.results],
                "max_relative_error": self.max_relative_error, "all_within_budget": self.all_within_budget}


@dataclass
class ConstantSystemReport:
    experiment: str
    unknowns: tuple
    norms: np.ndarray
    matrix: np.ndarray
    rhs: np.ndarray
    constants: np.ndarray
    residual: float
    summed_coefficient: float  # c_lambda + 4 c_mu (or 6 c_A + 4 c_C) implied by the summed rows
    truth: np.ndarray | None = None

    @property
    def relative_error(self) -> float:
        if self.truth is None:
            return float("nan")
        t = np.asarray(self.truth)
        return float(np.linalg.norm(self.constants - t) / max(np.linalg.norm(t), 1e-300))

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "unknowns": list(self.unknowns), "norms": self.norms.tolist(),
                "matrix": self.matrix.tolist(), "rhs": self.rhs.tolist(), "constants": self.constants.tolist(),
                "residual": self.residual, "summed_coefficient": self.summed_coefficient,
                "truth": None if self.truth is None else np.asarray(self.truth).tolist(),
                "relative_error": self.relative_error}

    def csv_rows(self) -> list:
        t = [float("nan")] * 2 if self.truth is None else list(self.truth)
        rows = []
        for name, val, tv in zip(self.unknowns, self.constants, t):
            rel = abs(val - tv) / abs(tv) if tv not in (0.0,) and np.isfinite(tv) else float("nan")
            rows.append([self.experiment, name, float(val), float(tv), self.residual, rel])
        return rows


@dataclass
class IdentityReport:
    """Gap for Runge-approximated states versus direct quadrature at the targets."""

    recovered: float
    direct: float
    state_identity: float
    budget: float
    residuals: list
    flagged: bool

    @property
    def error(self) -> float:
        return abs(self.recovered - self.direct)

    @property
    def within_budget(self) -> bool:
        return self.error <= self.budget

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(error=self.error, within_budget=self.within_budget)
        return d


@dataclass
class ObstacleReport:
    gaps: np.ndarray
    max_gap: float
    scale: float
    threshold: float
    distinguishable: bool
    nonzero_data: bool

    def to_dict(self) -> dict:
        return {"max_gap": self.max_gap, "scale": self.scale, "threshold": self.threshold,
                "distinguishable": self.distinguishable, "nonzero_data": self.nonzero_data,
                "gaps": self.gaps.tolist()}


# ---------------------------------------------------------------- Runge setup

@dataclass
class RungeSetup:
    """Shared machinery for the Runge-mediated experiments.

    ``controls`` live in W1 and approximate the first state of each pair;
    ``tests`` live in W2 and approximate the second.  Responses are built once
    per parameter set.
    """

    ctx: FracContext
    partition: NodePartition
    controls: ControlDictionary
    tests: ControlDictionary
    alpha_rel: float = 1e-8
    alpha: float | None = None
    max_relative_residual: float = 0.05
    cache_dir: Path | None = None
    _responses: dict = field(default_factory=dict, repr=False)
    _solvers: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.partition.has_obstacle:
            raise GeometryError("Runge experiments use the obstacle-free partition")
        for d, mask, name in ((self.controls, self.partition.w1, "W1"), (self.tests, self.partition.w2, "W2")):
            if d.size and np.any(d.profiles().reshape((-1,) + self.ctx.grid.shape)[:, ~mask] != 0):
                raise GeometryError(f"dictionary atoms leave {name}")

    @property
    def omega(self) -> np.ndarray:
        return self.partition.omega

    def solver(self, p: LameParameters) -> DirectSolver:
        key = parameter_digest(p)
        if key not in self._solvers:
            self._solvers[key] = DirectSolver(p, self.ctx, self.omega)
        return self._solvers[key]

    def responses(self, which: str, p: LameParameters) -> ResponseSet:
        d = self.controls if which == "controls" else self.tests
        key = (which if d is not self.controls else "controls", parameter_digest(p))
        if key not in self._responses:
            cache = None
            if self.cache_dir is not None:
                Path(self.cache_dir).mkdir(parents=True, exist_ok=True)
                cache = Path(self.cache_dir) / f"responses_{key[0]}_{key[1]}.bin"
            self._responses[key] = build_response_matrix(d, p, self.ctx, self.partition,
                                                         solver=self.solver(p), cache=cache)
        return self._responses[key]

    def approximate(self, target: np.ndarray, which: str, p: LameParameters) -> tuple:
        R = self.responses(which, p)
        sol = runge_approximate(target, R, alpha=self.alpha, alpha_rel=self.alpha_rel)
        return sol, R.field(sol.coefficients)


def response_gap_matrix(R1: ResponseSet, R2: ResponseSet, tests: ControlDictionary, p: LameParameters,
                        ctx: FracContext, batch: int = 64) -> DtnGapMatrix:
    """``<(Lambda1 - Lambda2) g_a, h_b>`` from two response sets over one control dictionary.

    Both solutions equal g_a outside omega, so only their difference (supported
    in omega) is paired; this keeps the large control amplitudes out of the
    subtraction.
    """
    if R1.dictionary is not R2.dictionary and R1.dictionary.fingerprint() != R2.dictionary.fingerprint():
        raise ValueError("response sets must share their control dictionary")
    zero = np.zeros((3,) + ctx.grid.shape)
    rows = []
    for s0 in range(0, R1.size, batch):
        diff = R1._extend(R1.values[s0:s0 + batch] - R2.values[s0:s0 + batch], zero)
        rows.append(-tests.project(stiffness_apply(diff, p, ctx)))
    vals = np.concatenate(rows) if rows else np.zeros((0, tests.size))
    return DtnGapMatrix(vals, "linear", {"controls": R1.size, "tests": tests.size})


def _node_norm(G: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(G * G, axis=(-5, -4)))


def identity_budget(f1, f2, u1, u2, p1: LameParameters, p2: LameParameters, ctx: FracContext,
                    omega: np.ndarray) -> float:
    """Bound on |I(u1, u2) - I(f1, f2)| from the approximation residual fields.

    I is bilinear with nodal integrand bounded by (3|dlambda| + 2|dmu|) |Du1| |Du2|.
    """
    c = 3 * np.abs(p2.lambda_field - p1.lambda_field).max() + 2 * np.abs(p2.mu_field - p1.mu_field).max()
    if c == 0:
        return 0.0
    n = lambda v: _node_norm(difference_gradient(v, ctx))[omega]  # noqa: E731
    hv = ctx.grid.cell_volume
    return float(c * hv * np.sum(n(u1 - f1) * n(u2) + n(f1) * n(u2 - f2)))


# ---------------------------------------------------------------- Lame moments

def _check_omega_support(f: np.ndarray, omega: np.ndarray):
    if np.any(f[..., ~omega] != 0):
        raise GeometryError("test state must be supported in omega")


def verify_zero_identity(f1: np.ndarray, f2: np.ndarray, p1: LameParameters, p2: LameParameters,
                         setup: RungeSetup, gap: DtnGapMatrix | None = None) -> IdentityReport:
    """Compare the DtN gap of Runge-approximated states with direct quadrature at (f1, f2)."""
    om = setup.omega
    _check_omega_support(f1, om)
    _check_omega_support(f2, om)
    ctx = setup.ctx
    s1, u1 = setup.approximate(f1, "controls", p1)
    s2, u2 = setup.approximate(f2, "tests", p2)
    if gap is None:
        gap = response_gap_matrix(setup.responses("controls", p1), setup.responses("controls", p2),
                                  setup.tests, p1, ctx)
    recovered = gap.contract(s1.coefficients, s2.coefficients)
    direct = integral_identity_rhs(f1, f2, p1, p2, ctx)
    state = integral_identity_rhs(u1, u2, p1, p2, ctx)
    budget = identity_budget(f1, f2, u1, u2, p1, p2, ctx, om)
    # floating-point floor for the contraction of large coefficients against the gap matrix
    floor = 1e-12 * float(np.abs(s1.coefficients) @ np.abs(gap.values) @ np.abs(s2.coefficients))
    res = [s1.relative_residual, s2.relative_residual]
    flagged = max(res) > setup.max_relative_residual
    if flagged:
        log.warning("Runge residual %.3g exceeds the requested %.3g", max(res), setup.max_relative_residual)
    return IdentityReport(recovered, direct, state, budget + floor, res, flagged)


def _psi_moment(q: np.ndarray, psi: np.ndarray, j: int, ctx: FracContext) -> tuple:
    """Nodal quadrature of ``q d_j psi``: centered-difference and spectral derivative versions."""
    hv = ctx.grid.cell_volume
    fd = hv * float(np.sum(q * difference_gradient(psi[None], ctx)[0, j]))
    sp = hv * float(np.sum(q * partial_derivative(psi, j, ctx)))
    return fd, sp


def _helper_axis(j: int) -> int:
    return (j + 1) % 3


def _unit_field(scalar: np.ndarray, axis: int) -> np.ndarray:
    f = np.zeros((3,) + scalar.shape)
    f[axis] = scalar
    return f


def mu_moment_states(psi: np.ndarray, psi_support: Region, j: int, setup_omega: Region, grid) -> tuple:
    """States whose identity integrand is ``dmu d_j psi``: f1 = x_b e_j (cut off), f2 = psi e_b."""
    b = _helper_axis(j)
    phi = make_cutoff_coordinate(b, psi_support, setup_omega, grid)
    return _unit_field(phi, j), _unit_field(psi, b)


def lambda_moment_states(psi: np.ndarray, psi_support: Region, j: int, setup_omega: Region, grid) -> tuple:
    """States whose identity integrand is ``dlambda d_j psi``: f1 = x_b e_b (cut off), f2 = psi e_j."""
    b = _helper_axis(j)
    phi = make_cutoff_coordinate(b, psi_support, setup_omega, grid)
    return _unit_field(phi, b), _unit_field(psi, j)


def _check_psi(psi: np.ndarray, psi_support: Region, omega_region: Region, setup: RungeSetup):
    x = setup.ctx.grid.coordinates()
    if np.any(psi[~psi_support.contains(x)] != 0):
        raise GeometryError("psi must vanish outside its declared support")
    if not np.any(psi):
        raise ValueError("psi must be nonzero")


def recover_mu_moment(psi: np.ndarray, psi_support: Region, j: int, p1: LameParameters, p2: LameParameters,
                      setup: RungeSetup, omega_region: Region, gap: DtnGapMatrix | None = None,
                      experiment: str = "invert-linear") -> MomentResult:
    """Runge-mediated estimate of ``sum h^3 (mu2 - mu1) D_j psi``."""
    _check_psi(psi, psi_support, omega_region, setup)
    f1, f2 = mu_moment_states(psi, psi_support, j, omega_region, setup.ctx.grid)
    rep = verify_zero_identity(f1, f2, p1, p2, setup, gap)
    fd, sp = _psi_moment(p2.mu_field - p1.mu_field, psi, j, setup.ctx)
    budget = rep.budget + abs(rep.direct - fd)
    return MomentResult(experiment, "mu", j, rep.recovered, fd, budget, rep.residuals, sp)


def recover_lambda_moment(psi: np.ndarray, psi_support: Region, j: int, p1: LameParameters,
                          p2: LameParameters, setup: RungeSetup, omega_region: Region,
                          gap: DtnGapMatrix | None = None, experiment: str = "invert-linear") -> MomentResult:
    """Runge-mediated estimate of ``sum h^3 (lambda2 - lambda1) D_j psi``.

    The mu term of these states vanishes identically (the symmetric gradients
    are orthogonal), so no mu correction is subtracted.
    """
    _check_psi(psi, psi_support, omega_region, setup)
    f1, f2 = lambda_moment_states(psi, psi_support, j, omega_region, setup.ctx.grid)
    rep = verify_zero_identity(f1, f2, p1, p2, setup, gap)
    fd, sp = _psi_moment(p2.lambda_field - p1.lambda_field, psi, j, setup.ctx)
    budget = rep.budget + abs(rep.direct - fd)
    return MomentResult(experiment, "lambda", j, rep.recovered, fd, budget, rep.residuals, sp)


def gradient_norms(psi: np.ndarray, ctx: FracContext) -> np.ndarray:
    """``h^3 sum (D_k psi)^2`` for k = 1, 2, 3."""
    G = difference_gradient(psi[None], ctx)[0]
    return ctx.grid.cell_volume * np.sum(G * G, axis=(1, 2, 3))


def _require_anisotropic(norms: np.ndarray):
    if abs(norms[0] - norms[1]) <= 1e-8 * max(norms[0], norms[1]):
        raise ValueError("psi must satisfy |D_1 psi| != |D_2 psi|; choose an anisotropic bump")


def lame_constant_system(norms: np.ndarray, rhs: np.ndarray, truth=None,
                         experiment: str = "invert-linear") -> ConstantSystemReport:
    """Solve rows ``(c_l + 2 c_m) n_s + c_m sum_{k != s} n_k = rhs_s`` for (c_lambda, c_mu)."""
    norms = np.asarray(norms, dtype=float)
    _require_anisotropic(norms)
    S = norms.sum()
    A = np.array([[norms[s], norms[s] + S] for s in AXES])
    return _solve_system(A, np.asarray(rhs, dtype=float), norms, ("c_lambda", "c_mu"), (1.0, 4.0), S,
                         truth, experiment)


def ac_constant_system(norms: np.ndarray, rhs: np.ndarray, truth=None,
                       experiment: str = "invert-nonlinear") -> ConstantSystemReport:
    """Solve rows ``(4 c_A + 4 c_C) n_s + c_A sum_{k != s} n_k = rhs_s`` for (c_A, c_C)."""
    norms = np.asarray(norms, dtype=float)
    _require_anisotropic(norms)
    S = norms.sum()
    A = np.array([[3 * norms[s] + S, 4 * norms[s]] for s in AXES])
    return _solve_system(A, np.asarray(rhs, dtype=float), norms, ("c_A", "c_C"), (6.0, 4.0), S,
                         truth, experiment)


def _solve_system(A, rhs, norms, names, weights, S, truth, experiment) -> ConstantSystemReport:
    c, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    resid = float(np.linalg.norm(A @ c - rhs))
    # the summed rows read (w0 c0 + w1 c1) S = sum(rhs)
    summed = float(rhs.sum() / S)
    return ConstantSystemReport(experiment, names, norms, A, rhs, c, resid, summed,
                                None if truth is None else np.asarray(truth, dtype=float))


def lame_constant_states(psi: np.ndarray, sigma: int) -> tuple:
    f = _unit_field(psi, sigma)
    return f, f


def recover_constants_lame(psi: np.ndarray, p1: LameParameters, p2: LameParameters, ctx: FracContext,
                           setup: RungeSetup | None = None, gap: DtnGapMatrix | None = None,
                           truth=None, experiment: str = "invert-linear") -> tuple:
    """Constant-difference system for (c_lambda, c_mu).

    Without ``setup`` the right-hand sides are exact quadratures of the identity
    at f1 = f2 = psi e_s (the consistent synthetic system); with ``setup`` they
    are Runge-mediated DtN gaps.  Returns (report, identity reports or None).
    """
    norms = gradient_norms(psi, ctx)
    _require_anisotropic(norms)
    if setup is None:
        rhs = np.array([integral_identity_rhs(*lame_constant_states(psi, s), p1, p2, ctx) for s in AXES])
        return lame_constant_system(norms, rhs, truth, experiment), None
    reps = [verify_zero_identity(*lame_constant_states(psi, s), p1, p2, setup, gap) for s in AXES]
    rhs = np.array([r.recovered for r in reps])
    return lame_constant_system(norms, rhs, truth, experiment), reps


def run_linear_inversion(psi: np.ndarray, psi_support: Region, p1: LameParameters, p2: LameParameters,
                         setup: RungeSetup, omega_region: Region, experiment: str = "invert-linear") -> tuple:
    """All six moments for one parameter pair, sharing one gap matrix."""
    ctx = setup.ctx
    gap = response_gap_matrix(setup.responses("controls", p1), setup.responses("controls", p2),
                              setup.tests, p1, ctx)
    rep = MomentReport()
    for j in AXES:
        rep.add(recover_mu_moment(psi, psi_support, j, p1, p2, setup, omega_region, gap, experiment))
        rep.add(recover_lambda_moment(psi, psi_support, j, p1, p2, setup, omega_region, gap, experiment))
    return rep, gap


# ---------------------------------------------------------------- obstacles

def obstacle_distinguish(g: np.ndarray, p: LameParameters, ctx: FracContext, partitions: tuple,
                         tests: ControlDictionary, tol: float = 1e-10, direct: bool = True) -> ObstacleReport:
    """Gaps ``<(Lambda_D1 - Lambda_D2) g, h_b>`` over a W2 test dictionary."""
    part1, part2 = partitions
    nonzero = bool(np.any(g))
    if not nonzero:
        log.warning("obstacle test with zero exterior data: the uniqueness hypothesis needs g != 0")
        z = np.zeros(tests.size)
        return ObstacleReport(z, 0.0, 0.0, 0.0, False, False)
    pair = []
    for part in (part1, part2):
        pe = p.restricted(part.free)
        if direct:
            u, _ = DirectSolver(pe, ctx, part.free).solve(g)
        else:
            u = solve_obstacle(g, p, ctx, part, tol)[0]
        pair.append(-tests.project(stiffness_apply(u, pe, ctx)))
    gaps = pair[0] - pair[1]
    scale = float(max(np.abs(pair[0]).max(), np.abs(pair[1]).max()))
    threshold = 10 * tol * scale
    mx = float(np.abs(gaps).max())
    return ObstacleReport(gaps, mx, scale, threshold, mx > threshold, True)


# ---------------------------------------------------------------- nonlinear coefficients

def second_linearization_response(v1: np.ndarray, v2: np.ndarray, p: LameParameters,
                                   c: NonlinearCoefficients, setup: RungeSetup) -> np.ndarray:
    """w solving B[w, phi] = <div Ntilde(v1, v2), phi> on omega, w = 0 outside."""
    load = stress_divergence(bilinearized_N_tilde(v1, v2, p, c, setup.ctx), setup.ctx)
    u, _ = setup.solver(p).solve(np.zeros_like(v1), load=load)
    return u


def second_order_gap(v1: np.ndarray, v2: np.ndarray, p: LameParameters, c1: NonlinearCoefficients,
                     c2: NonlinearCoefficients, setup: RungeSetup) -> np.ndarray:
    """``-B[w1 - w2, h_b]`` over the test dictionary (second-order DtN gap)."""
    w1 = second_linearization_response(v1, v2, p, c1, setup)
    w2 = second_linearization_response(v1, v2, p, c2, setup)
    return -setup.tests.project(stiffness_apply(w1 - w2, p, setup.ctx))


def second_order_gap_fd(g1: np.ndarray, g2: np.ndarray, tests: np.ndarray, p: LameParameters,
                        c1: NonlinearCoefficients, c2: NonlinearCoefficients, ctx: FracContext,
                        partition: NodePartition, eps: float = 1e-2,
                        newton: NewtonOptions = NewtonOptions()) -> np.ndarray:
    """Mixed second difference of the nonlinear DtN pairings, for cross-validation.

    ``[Lambda(e g1 + e g2) - Lambda(e g1) - Lambda(e g2) + Lambda(0)] / e^2`` per
    coefficient set, differenced between the sets.
    """
    for h in tests:
        check_test_field(h, partition, ctx)
    out = np.zeros(len(tests))
    for c, sign in ((c1, 1.0), (c2, -1.0)):
        for data, w in ((eps * (g1 + g2), 1.0), (eps * g1, -1.0), (eps * g2, -1.0)):
            u, _ = solve_exterior_nonlinear(data, p, c, ctx, partition, newton)
            r = stiffness_apply(u, p, ctx).ravel()
            out += sign * w * (-ctx.grid.cell_volume) * (tests.reshape(len(tests), -1) @ r)
    return out / eps ** 2


def G_tilde_pairing(f1: np.ndarray, f2: np.ndarray, psi: np.ndarray, i: int, c1: NonlinearCoefficients,
                    c2: NonlinearCoefficients, ctx: FracContext) -> float:
    """``h^3 sum_j Gt_ij(f1, f2) D_j psi`` by direct quadrature."""
    Gt = G_tilde(f1, f2, c1.A_field, c2.A_field, c1.C_field, c2.C_field, ctx)
    Dpsi = difference_gradient(psi[None], ctx)[0]
    return ctx.grid.cell_volume * float(np.sum(Gt[i] * Dpsi))


def ac_moment_states(psi: np.ndarray, psi_support: Region, j: int, quantity: str, omega_region: Region,
                     grid) -> tuple:
    """(f1, f2, test axis i, factor) with ``factor * sum_j Gt_ij D_j psi = moment``.

    A: f1 = x_b e_j, f2 = x_b e_b, i = b gives Gt_bj = dA / 2.
    C: f1 = x_a e_a, f2 = x_c e_c (a, c != j distinct) gives Gt = 2 dC I, i = j.
    """
    if quantity == "A":
        b = _helper_axis(j)
        phi = make_cutoff_coordinate(b, psi_support, omega_region, grid)
        return _unit_field(phi, j), _unit_field(phi, b), b, 2.0
    if quantity == "C":
        a, c = (j + 1) % 3, (j + 2) % 3
        return (_unit_field(make_cutoff_coordinate(a, psi_support, omega_region, grid), a),
                _unit_field(make_cutoff_coordinate(c, psi_support, omega_region, grid), c), j, 0.5)
    raise ValueError(f"unknown coefficient {quantity!r}")


def ac_constant_states(psi: np.ndarray, psi_support: Region, sigma: int, omega_region: Region, grid) -> tuple:
    """f1 = psi e_s, f2 = x_s e_s (cut off), test psi e_s; twice the pairing is row s."""
    phi = make_cutoff_coordinate(sigma, psi_support, omega_region, grid)
    return _unit_field(psi, sigma), _unit_field(phi, sigma), sigma, 2.0


def _g_constant(c1: NonlinearCoefficients, c2: NonlinearCoefficients) -> float:
    return 2 * float(np.abs(c2.A_field - c1.A_field).max()) + 6 * np.sqrt(3) * float(
        np.abs(c2.C_field - c1.C_field).max())


def _trilinear_budget(f1, f2, f3, v1, v2, u3, cG, ctx, omega) -> float:
    """Bound on |sum Gt(v1, v2) : D u3 - sum Gt(f1, f2) : D f3| from the residual fields."""
    if cG == 0:
        return 0.0
    n = lambda v: _node_norm(difference_gradient(v, ctx))[omega]  # noqa: E731
    nf1, nf2 = n(f1), n(f2)
    nv2, nu3 = n(v2), n(u3)
    hv = ctx.grid.cell_volume
    return float(cG * hv * np.sum(n(v1 - f1) * nv2 * nu3 + nf1 * n(v2 - f2) * nu3 + nf1 * nf2 * n(u3 - f3)))


@dataclass
class WeakPairing:
    recovered: float
    direct: float
    budget: float
    residuals: list


def ac_weak_pairing(f1, f2, psi, i, p, c1, c2, setup: RungeSetup) -> WeakPairing:
    """Runge-mediated value of ``sum_j Gt_ij(f1, f2) D_j psi`` via second-order DtN gaps."""
    om = setup.omega
    ctx = setup.ctx
    for f in (f1, f2):
        _check_omega_support(f, om)
    s1, v1 = setup.approximate(f1, "controls", p)
    s2, v2 = setup.approximate(f2, "controls", p)
    f3 = _unit_field(psi, i)
    s3, u3 = setup.approximate(f3, "tests", p)
    m = second_order_gap(v1, v2, p, c1, c2, setup)
    # -B[w1 - w2, u_h] = sum Gt : D u_h, and u_h is the test control's solution
    recovered = float(m @ s3.coefficients)
    direct = G_tilde_pairing(f1, f2, psi, i, c1, c2, ctx)
    budget = _trilinear_budget(f1, f2, f3, v1, v2, u3, _g_constant(c1, c2), ctx, om)
    floor = 1e-12 * float(np.abs(m) @ np.abs(s3.coefficients))
    return WeakPairing(recovered, direct, budget + floor,
                       [s1.relative_residual, s2.relative_residual, s3.relative_residual])


def recover_AC(psi: np.ndarray, psi_support: Region, p: LameParameters, c1: NonlinearCoefficients,
               c2: NonlinearCoefficients, setup: RungeSetup, omega_region: Region,
               truth_constants=None, experiment: str = "invert-nonlinear") -> tuple:
    """Moments of A2 - A1 and C2 - C1 plus the constant system, all Runge-mediated."""
    if not np.array_equal(c1.B_field, c2.B_field):
        raise ValueError("the B coefficient must be shared by both sets")
    if setup.ctx.s < 0.5:
        raise ValueError("nonlinear experiments require s in [1/2, 1)")
    _check_psi(psi, psi_support, omega_region, setup)
    ctx = setup.ctx
    grid = ctx.grid
    rep = MomentReport()
    dq = {"A": c2.A_field - c1.A_field, "C": c2.C_field - c1.C_field}
    for quantity in ("A", "C"):
        for j in AXES:
            f1, f2, i, factor = ac_moment_states(psi, psi_support, j, quantity, omega_region, grid)
            w = ac_weak_pairing(f1, f2, psi, i, p, c1, c2, setup)
            fd, sp = _psi_moment(dq[quantity], psi, j, ctx)
            budget = factor * (w.budget + abs(w.direct - fd / factor))
            rep.add(MomentResult(experiment, quantity, j, factor * w.recovered, fd, budget, w.residuals, sp))
    norms = gradient_norms(psi, ctx)
    rhs = []
    for sigma in AXES:
        f1, f2, i, factor = ac_constant_states(psi, psi_support, sigma, omega_region, grid)
        rhs.append(factor * ac_weak_pairing(f1, f2, psi, i, p, c1, c2, setup).recovered)
    return rep, ac_constant_system(norms, np.array(rhs), truth_constants, experiment)


def synthetic_ac_constants(psi: np.ndarray, psi_support: Region, c1: NonlinearCoefficients,
                           c2: NonlinearCoefficients, ctx: FracContext, omega_region: Region,
                           truth=None) -> ConstantSystemReport:
    """The (c_A, c_C) system with right-hand sides from direct quadrature of Gt."""
    norms = gradient_norms(psi, ctx)
    rhs = []
    for sigma in AXES:
        f1, f2, i, factor = ac_constant_states(psi, psi_support, sigma, omega_region, ctx.grid)
        rhs.append(factor * G_tilde_pairing(f1, f2, psi, i, c1, c2, ctx))
    return ac_constant_system(norms, np.array(rhs), truth, "synthetic-nonlinear")
