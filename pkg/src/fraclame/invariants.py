"""Invariant suites run by ``fraclame validate``.

Each check returns a :class:`Check` with the measured value and its tolerance.
Checks are deterministic given the configuration and seed.
"""
from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, make_setup
from .dtn import dtn_gap_matrix, dtn_pair
from .experiments import (ac_constant_states, ac_moment_states, recover_constants_lame, run_linear_inversion, synthetic_ac_constants)
from .forms import (LameParameters, NonlinearCoefficients, G_tilde, N_stress, bilinear_B,
                    bilinearized_N_tilde, integral_identity_rhs, stiffness_apply)
from .fractional import FracContext, difference_gradient, frac_laplacian, partial_derivative
from .grid import make_cutoff_coordinate
from .runge import build_dictionary, build_response_matrix, load_responses, runge_approximate
from .solvers import (DirectSolver, NewtonOptions, jacobian_apply, nonlinear_residual, solve_exterior_linear,
                      solve_exterior_nonlinear)

log = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    relation: str = "<="

    def to_dict(self) -> dict:
        return {"name": self.name, "value": float(self.value), "tolerance": float(self.tolerance),
                "relation": self.relation, "passed": bool(self.passed)}


def _le(name, value, tol) -> Check:
    return Check(name, float(value), float(tol), bool(value <= tol))


def _ge(name, value, tol) -> Check:
    return Check(name, float(value), float(tol), bool(value >= tol), ">=")


def _smooth_random(rng, ctx: FracContext, shape=(3,), width: float = 0.3) -> np.ndarray:
    """Random field: white noise filtered by a Gaussian symbol (resolved on the grid)."""
    noise = rng.standard_normal(shape + ctx.grid.shape)
    F = ctx.fft(noise)
    xi2 = ctx._tables["xi2"]
    return ctx.ifft(F * np.exp(-0.5 * width ** 2 * xi2))


def _masked_random(rng, ctx, mask, shape=(3,)) -> np.ndarray:
    return rng.standard_normal(shape + ctx.grid.shape) * mask


class Suite:
    """Shared state for the checks (grid, parameters, factorizations)."""

    def __init__(self, cfg: RunConfig, workers: int = 1):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.ctx = cfg.context(workers)
        self.grid = self.ctx.grid
        self.part = cfg.partition()
        self.omega = self.part.omega
        self.p1 = cfg.lame("p1", self.omega)
        self.tol = float(cfg.raw["solver"]["tol"])
        self.timings: dict = {}

    # ------------------------------------------------------------ fractional
    def fractional(self) -> list:
        ctx, g = self.ctx, self.grid
        x = g.coordinates()
        k = np.pi / g.L * np.array([2.0, 1.0, 3.0])
        mode = np.cos(np.tensordot(k, x, axes=1))
        sym = float(np.sum(k * k)) ** ctx.s
        err = np.abs(frac_laplacian(mode, ctx) - sym * mode).max() / sym
        u = _smooth_random(self.rng, ctx)
        d = [[partial_derivative(u[i], j, ctx) for j in range(3)] for i in range(3)]
        cross = []
        for i in range(3):
            for j in range(3):
                a = np.sum(frac_laplacian(d[i][j], ctx) * d[j][i])
                b = np.sum(frac_laplacian(d[i][i], ctx) * d[j][j])
                cross.append(abs(a - b) / max(abs(a), abs(b), 1e-300))
        psi, sup = self.cfg.psi()
        om = self.cfg.region("omega")
        Dpsi = np.any(difference_gradient(psi[None], ctx)[0] != 0, axis=0)
        worst = 0.0
        for b in range(3):
            D = difference_gradient(make_cutoff_coordinate(b, sup, om, g)[None], ctx)[0]
            target = np.zeros_like(D)
            target[b] = 1.0
            worst = max(worst, float(np.abs(D - target)[:, Dpsi].max()))
        return [_le("fractional.fourier_mode", err, 1e-12),
                _le("fractional.cross_term_identity", max(cross), 1e-12),
                _le("grid.cutoff_coordinate_exact_on_psi_stencil", worst, 1e-12)]

    # ------------------------------------------------------------ forms
    def forms(self) -> list:
        ctx, rng, p = self.ctx, self.rng, self.p1
        u, v = _smooth_random(rng, ctx), _smooth_random(rng, ctx)
        buv, bvu = bilinear_B(u, v, p, ctx), bilinear_B(v, u, p, ctx)
        rep = self.grid.cell_volume * float(np.sum(stiffness_apply(u, p, ctx) * v))
        scale = max(abs(buv), 1.0)
        c = self.cfg.coefficients("c1", self.omega)
        c2 = self.cfg.coefficients("c2", self.omega)
        c2 = NonlinearCoefficients(c2.A_field + 0.1 * self.omega, c2.B_field, c2.C_field - 0.05 * self.omega)
        pol = 0.0
        for _ in range(5):
            w = _smooth_random(rng, ctx)
            N = N_stress(w, p, c, ctx)
            pol = max(pol, float(np.abs(bilinearized_N_tilde(w, w, p, c, ctx) - 2 * N).max() / np.abs(N).max()))
        a, b = _smooth_random(rng, ctx), _smooth_random(rng, ctx)
        Gt = G_tilde(a, b, c.A_field, c2.A_field, c.C_field, c2.C_field, ctx)
        diff = bilinearized_N_tilde(a, b, p, c2, ctx) - bilinearized_N_tilde(a, b, p, c, ctx)
        gcons = float(np.abs(Gt - diff).max() / max(np.abs(diff).max(), 1e-300))
        solver = DirectSolver(p, ctx, self.omega)
        lam_min = float(np.linalg.eigvalsh(solver.matrix)[0])
        self.solver = solver
        return [_le("forms.symmetry", abs(buv - bvu) / scale, 1e-12),
                _le("forms.representer", abs(buv - rep) / scale, 1e-12),
                _le("forms.polarization", pol, 1e-12),
                _le("forms.G_tilde_consistency", gcons, 1e-12),
                _ge("forms.coercivity_min_eigenvalue", lam_min, 0.0)]

    # ------------------------------------------------------------ solvers
    def solvers(self) -> list:
        ctx, p, part, rng = self.ctx, self.p1, self.part, self.rng
        gdata = self.cfg.vector_field(self.cfg.raw["forward"]["data"])
        u, rep, r = solve_exterior_linear(gdata, p, ctx, part, self.tol, return_residual=True)
        hv = self.grid.cell_volume
        tests = _masked_random(rng, ctx, self.omega, (50, 3))
        ku = stiffness_apply(u, p, ctx)
        rhs = stiffness_apply(np.where(self.omega, 0.0, gdata), p, ctx) * self.omega
        rn = np.sqrt(hv * np.sum(rhs * rhs))
        orth = max(abs(hv * float(np.sum(ku * t))) / (rn * np.sqrt(hv * np.sum(t * t))) for t in tests)
        ud, _ = self.solver.solve(gdata)
        direct = float(np.abs(ud - u).max() / np.abs(u).max())

        c = self.cfg.coefficients("c1", self.omega)
        base = _smooth_random(rng, ctx) * 0.05
        z = _smooth_random(rng, ctx) * self.omega
        free = self.omega
        R0 = nonlinear_residual(base, p, c, ctx, free)
        Jz = jacobian_apply(base, z, p, c, ctx, free)
        errs = []
        for t in (1e-3, 1e-4, 1e-5):
            Rt = nonlinear_residual(base + t * z, p, c, ctx, free)
            errs.append(float(np.abs((Rt - R0) / t - Jz).max()))
        slopes = [np.log10(errs[i] / errs[i + 1]) for i in range(2)]
        slope_err = max(abs(s - 1.0) for s in slopes)

        checks = [_le("solvers.galerkin_orthogonality", orth, 10 * self.tol),
                  _le("solvers.direct_matches_cg", direct, 1e-8),
                  _le("solvers.jacobian_fd_slope_deviation", slope_err, 0.05)]
        if ctx.s >= 0.5:
            sv = self.cfg.raw["solver"]
            opts = NewtonOptions(tol=sv["newton_tol"], continuation_steps=1)
            ratios = []
            for eps in (1e-2, 1e-3):
                ue, _ = solve_exterior_nonlinear(eps * gdata / np.abs(gdata).max(), p, c, ctx, part, opts)
                ratios.append(np.sqrt(np.sum(ue * ue)) / eps)
            checks.append(_le("solvers.small_data_ratio_spread", abs(ratios[0] / ratios[1] - 1.0), 0.02))
        return checks

    # ------------------------------------------------------------ dtn
    def dtn(self) -> list:
        ctx, p, part, rng = self.ctx, self.p1, self.part, self.rng
        d = build_dictionary(self.grid, part.w1, radius=self.cfg.raw["runge"]["radius"], stride=1)
        pick = np.linspace(0, d.size - 1, 6).astype(int)
        atoms = np.array([d.atoms(a, a + 1)[0] for a in pick])
        u, _ = self.solver.solve(atoms)
        hv = self.grid.cell_volume
        P = -hv * np.einsum("aixyz,bixyz->ab", stiffness_apply(u, p, ctx), atoms)
        sym = float(np.max(np.abs(P - P.T) / np.maximum(np.abs(P), 1.0)))

        om = self.omega
        perturbed = LameParameters(p.lambda0, p.mu0,
                                   p.lambda_field + 0.2 * rng.random(self.grid.shape) * om,
                                   p.mu_field + 0.2 * rng.random(self.grid.shape) * om)
        u2, _ = DirectSolver(perturbed, ctx, om).solve(atoms[:2])
        gap = dtn_pair(atoms[0], atoms[1], p, ctx, part, tol=self.tol) - dtn_pair(
            atoms[0], atoms[1], perturbed, ctx, part, tol=self.tol)
        ident = integral_identity_rhs(u[0], u2[1], p, perturbed, ctx)
        scale = max(abs(P).max(), 1e-300)
        zero = dtn_gap_matrix(p, p, atoms[:2], atoms[2:4], ctx, part, direct=True).max_abs
        return [_le("dtn.symmetry", sym, 1e-9),
                _le("dtn.integral_identity", abs(gap - ident) / scale, 1e-8),
                _le("dtn.equal_parameters_zero_gap", zero / scale, 10 * self.tol)]

    # ------------------------------------------------------------ runge
    def runge(self) -> list:
        ctx, p, part = self.ctx, self.p1, self.part
        d = build_dictionary(self.grid, part.w1, stride=3)
        R = build_response_matrix(d, p, ctx, part, solver=self.solver)
        coeffs = self.rng.standard_normal(d.size)
        target = R.field(coeffs) * self.omega
        exact = runge_approximate(target, R, alpha=0.0 if np.linalg.matrix_rank(R.features()) == d.size
                                  else 1e-12 * R.svd()[1][0] ** 2)
        psi, _ = self.cfg.psi()
        f = np.zeros((3,) + self.grid.shape)
        f[0] = psi
        sols = [runge_approximate(f, R, alpha_rel=a) for a in (1e-12, 1e-10, 1e-8, 1e-6, 1e-4)]
        objs = [s.objective for s in sols]
        mono = all(objs[i] <= objs[i + 1] * (1 + 1e-12) for i in range(len(objs) - 1))
        F = R.features()
        grad = max(s.gradient_norm / (2 * np.linalg.norm(F, 2) * max(s.target_norm, 1e-300)) for s in sols)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "responses.bin"
            R.save(path)
            back = load_responses(path, d, ctx, part.free, R.key)
            same = back is not None and back.values.tobytes() == R.values.tobytes()
        counts = (27, 64, 125)
        res = []
        for k in counts:
            dk = build_dictionary(self.grid, part.w1, count=k)
            Rk = build_response_matrix(dk, p, ctx, part, solver=self.solver)
            res.append(runge_approximate(f, Rk, alpha_rel=1e-10).relative_residual)
        dec = all(res[i + 1] < res[i] for i in range(len(res) - 1))
        return [_le("runge.in_span_relative_residual", exact.relative_residual, 1e-8),
                _le("runge.optimality_gradient", grad, 1e-8),
                Check("runge.objective_nondecreasing_in_alpha", float(mono), 1.0, mono, "=="),
                Check("runge.cache_roundtrip_bitwise", float(same), 1.0, same, "=="),
                Check("runge.residual_decreases_27_64_125", float(dec), 1.0, dec, "==")]

    # ------------------------------------------------------------ experiments
    def experiments(self) -> list:
        ctx, p, om = self.ctx, self.p1, self.omega
        psi, sup = self.cfg.psi()
        omr = self.cfg.region("omega")
        planted = LameParameters(p.lambda0, p.mu0, p.lambda_field + 0.4 * om, p.mu_field - 0.1 * om)
        syn, _ = recover_constants_lame(psi, p, planted, ctx, truth=(0.4, -0.1))
        c1 = self.cfg.coefficients("c1", om)
        c2 = NonlinearCoefficients(c1.A_field + 0.2 * om, c1.B_field, c1.C_field - 0.3 * om)
        ac = synthetic_ac_constants(psi, sup, c1, c2, ctx, omr, truth=(0.2, -0.3))
        # closed forms of Gtilde at the proof's three state choices, on the psi stencil
        mask = np.any(difference_gradient(psi[None], ctx)[0] != 0, axis=0)
        dA, dC = 0.2, -0.3
        errs = []
        f1, f2, _, _ = ac_moment_states(psi, sup, 1, "A", omr, self.grid)
        Gt = G_tilde(f1, f2, c1.A_field, c2.A_field, c1.C_field, c2.C_field, ctx)
        errs.append(np.abs(Gt[2, 1][mask] - dA / 2).max())
        f1, f2, _, _ = ac_moment_states(psi, sup, 0, "C", omr, self.grid)
        Gt = G_tilde(f1, f2, c1.A_field, c2.A_field, c1.C_field, c2.C_field, ctx)
        errs.append(np.abs(Gt[0, 0][mask] - 2 * dC).max())
        f1, f2, _, _ = ac_constant_states(psi, sup, 0, omr, self.grid)
        Gt = G_tilde(f1, f2, c1.A_field, c2.A_field, c1.C_field, c2.C_field, ctx)
        D = difference_gradient(psi[None], ctx)[0]
        row = np.array([2 * dA + 2 * dC, dA / 2, dA / 2])[:, None] * D[:, mask]
        errs.append(np.abs(Gt[0][:, mask] - row).max())
        setup = make_setup(self.cfg, ctx, self.part)
        null, _ = run_linear_inversion(psi, sup, p, p, setup, omr)
        worst_null = max(abs(r.recovered) - r.budget for r in null.results)
        return [_le("experiments.lame_constants_synthetic", np.abs(syn.constants - [0.4, -0.1]).max(), 1e-10),
                _le("experiments.lame_summed_rows", abs(syn.summed_coefficient), 1e-12),
                _le("experiments.ac_constants_synthetic", np.abs(ac.constants - [0.2, -0.3]).max(), 1e-10),
                _le("experiments.ac_summed_rows", abs(ac.summed_coefficient), 1e-12),
                _le("experiments.G_tilde_closed_forms", max(errs), 1e-10),
                _le("experiments.equal_parameters_within_budget", worst_null, 0.0)]


SUITES = ("fractional", "forms", "solvers", "dtn", "runge", "experiments")


def run_suites(cfg: RunConfig, workers: int = 1) -> tuple:
    """Run every suite; returns (checks, timings)."""
    suite = Suite(cfg, workers)
    checks, timings = [], {}
    for name in SUITES:
        t0 = time.perf_counter()
        checks.extend(getattr(suite, name)())
        timings[name] = time.perf_counter() - t0
        log.info("suite %s done in %.1fs", name, timings[name])
    return checks, timings
