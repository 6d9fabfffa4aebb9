"""Forward solvers: linear exterior problem, obstacle problem, nonlinear
exterior problem (Newton with amplitude continuation) and the first/second
linearizations.

Unknowns live on the free node set (omega, or omega minus the obstacle); the
exterior values are assigned exactly.  Linear solves use preconditioned
conjugate gradients on the Galerkin operator; the Newton correction uses
GMRES with the same preconditioner.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, gmres

from .forms import (LameParameters, NonlinearCoefficients, N_stress, bilinearized_N_tilde,
                    local_constant_symbol, stiffness_apply, stress_divergence)
from .fractional import FracContext, difference_gradient
from .grid import NodePartition

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A forward solve failed to reach its tolerance."""


class AmplitudeError(SolverError):
    """Newton diverged: the data amplitude lies outside the admissible ball."""


@dataclass
class SolveReport:
    iterations: int
    residual: float
    tolerance: float
    wall_time: float
    converged: bool = True
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "tolerance": self.tolerance, "converged": self.converged}


@dataclass(frozen=True)
class NewtonOptions:
    max_iter: int = 30
    tol: float = 1e-11
    continuation_steps: int = 4
    linear_tol: float = 1e-13

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Newton tolerance must be positive")


def _inner(a: np.ndarray, b: np.ndarray, hv: float) -> np.ndarray:
    return hv * np.sum(a * b, axis=(-4, -3, -2, -1))


class SpectralPreconditioner:
    """Inverse of a constant-coefficient Lame symbol, applied per Fourier mode and
    projected back onto the free node set."""

    def __init__(self, p: LameParameters, ctx: FracContext, free: np.ndarray):
        self.ctx, self.free = ctx, free
        lam_bar, mu_bar = local_constant_symbol(p, free)
        m = ctx.multiplier
        k2 = sum(kk ** 2 for kk in ctx.k)
        l2 = sum(kk ** 2 for kk in ctx.kl)
        # symbol a |k|^2 I + b k k^T with the local part folded into a spectral surrogate
        a = p.mu0 * m * k2 + mu_bar * l2
        b = (p.lambda0 + p.mu0) * m * k2 + (lam_bar + mu_bar) * l2
        floor = np.min(a[a > 0])
        a = np.where(a > 0, a, floor)
        self.inv_a = 1.0 / a
        with np.errstate(invalid="ignore", divide="ignore"):
            self.beta = np.where(k2 > 0, b / ((a + b) * k2), 0.0)
        self.k = ctx.k

    def __call__(self, r: np.ndarray) -> np.ndarray:
        R = self.ctx.fft(r)
        kx, ky, kz = self.k
        kr = kx * R[..., 0, :, :, :] + ky * R[..., 1, :, :, :] + kz * R[..., 2, :, :, :]
        out = np.stack([self.inv_a * (R[..., i, :, :, :] - self.beta * self.k[i] * kr)
                        for i in range(3)], axis=-4)
        return self.ctx.ifft(out) * self.free


def pcg(apply, rhs: np.ndarray, precond, hv: float, tol: float = 1e-10, max_iter: int = 2000,
        x0: np.ndarray | None = None):
    """Preconditioned CG for a batch of independent right-hand sides.

    ``rhs`` has shape (k, 3, N, N, N) or (3, N, N, N); convergence is declared
    per column when ||r|| <= tol * ||rhs||.
    """
    single = rhs.ndim == 4
    b = rhs[None] if single else rhs
    x = np.zeros_like(b) if x0 is None else (x0[None] if single else x0).copy()
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = np.sqrt(_inner(b, b, hv))
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    rnorm = np.sqrt(_inner(r, r, hv))
    active = rnorm > target
    z = precond(r)
    pdir = z.copy()
    rz = _inner(r, z, hv)
    it = 0
    history = [rnorm.copy()]
    while active.any() and it < max_iter:
        it += 1
        Ap = apply(pdir)
        pAp = _inner(pdir, Ap, hv)
        alpha = np.where(active, rz / np.where(pAp != 0, pAp, 1.0), 0.0)
        x += alpha[:, None, None, None, None] * pdir
        r -= alpha[:, None, None, None, None] * Ap
        rnorm = np.sqrt(_inner(r, r, hv))
        history.append(rnorm.copy())
        active = active & (rnorm > target)
        z = precond(r)
        rz_new = _inner(r, z, hv)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        pdir = z + beta[:, None, None, None, None] * pdir
        rz = rz_new
    # true residual, not the recursively updated one
    r_true = b - apply(x)
    res = np.sqrt(_inner(r_true, r_true, hv)) / np.where(bnorm > 0, bnorm, 1.0)
    converged = bool(np.all(res <= 10 * tol) or np.all(bnorm == 0))
    if single:
        return x[0], it, float(res[0]), converged, r_true[0]
    return x, it, res, converged, r_true


def _linear_solve(g: np.ndarray, p: LameParameters, ctx: FracContext, free: np.ndarray,
                  tol: float, max_iter: int, load: np.ndarray | None = None):
    """Solve the constrained problem u = g off ``free``; ``load`` adds a volume term.

    Returns (u, report, residual_field).
    """
    t0 = time.perf_counter()
    hv = ctx.grid.cell_volume
    g = np.asarray(g, dtype=float)
    rhs = -stiffness_apply(g, p, ctx) * free
    if load is not None:
        rhs = rhs + load * free
    prec = SpectralPreconditioner(p, ctx, free)
    apply = lambda z: stiffness_apply(z, p, ctx) * free  # noqa: E731
    z, it, res, ok, r = pcg(apply, rhs, prec, hv, tol, max_iter)
    u = np.where(free, z, g)
    res_arr = np.atleast_1d(res)
    report = SolveReport(it, float(res_arr.max()), tol, time.perf_counter() - t0, ok)
    if not ok:
        raise SolverError(f"CG did not converge: relative residual {res_arr.max():.3e} after {it} iterations")
    return u, report, r


def _check_exterior_data(g: np.ndarray, partition: NodePartition):
    if np.any(g[..., partition.omega] != 0):
        raise ValueError("exterior data must vanish on omega nodes")


def solve_exterior_linear(g: np.ndarray, p: LameParameters, ctx: FracContext, partition: NodePartition,
                          tol: float = 1e-10, max_iter: int = 2000, return_residual: bool = False):
    """u = g on the exterior, B[u, e_k] = 0 for every omega node test function."""
    _check_exterior_data(g, partition)
    free = partition.omega
    u, report, r = _linear_solve(g, p, ctx, free, tol, max_iter)
    return (u, report, r) if return_residual else (u, report)


def solve_obstacle(g: np.ndarray, p: LameParameters, ctx: FracContext, partition: NodePartition,
                   tol: float = 1e-10, max_iter: int = 2000, return_residual: bool = False):
    """As the exterior problem but with u = 0 on the obstacle nodes."""
    _check_exterior_data(g, partition)
    free = partition.free
    u, report, r = _linear_solve(g, p.restricted(free), ctx, free, tol, max_iter)
    return (u, report, r) if return_residual else (u, report)


def nonlinear_residual(u: np.ndarray, p: LameParameters, c: NonlinearCoefficients, ctx: FracContext,
                       free: np.ndarray) -> np.ndarray:
    """Representer of v -> B[u, v] - <N(u), v> on the free set (i.e. -(Lu + Nu))."""
    return (stiffness_apply(u, p, ctx) - stress_divergence(N_stress(u, p, c, ctx), ctx)) * free


def jacobian_apply(u: np.ndarray, z: np.ndarray, p: LameParameters, c: NonlinearCoefficients,
                   ctx: FracContext, free: np.ndarray, Gu: np.ndarray | None = None) -> np.ndarray:
    Gu = difference_gradient(u, ctx) if Gu is None else Gu
    Nt = bilinearized_N_tilde(u, z, p, c, ctx, G1=Gu)
    return (stiffness_apply(z, p, ctx) - stress_divergence(Nt, ctx)) * free


def _newton(u: np.ndarray, p, c, ctx, free, opts: NewtonOptions, prec, history: list):
    hv = ctx.grid.cell_volume
    shape = u.shape
    idx = np.broadcast_to(free, shape)
    n = int(idx.sum())
    r = nonlinear_residual(u, p, c, ctx, free)
    scale = max(float(np.sqrt(_inner(stiffness_apply(u, p, ctx) * free, stiffness_apply(u, p, ctx) * free, hv))), 1e-300)
    for it in range(opts.max_iter + 1):
        rn = float(np.sqrt(_inner(r, r, hv)))
        history.append(rn)
        if rn <= opts.tol * scale or rn == 0.0:
            return u, it, rn / scale
        if it == opts.max_iter or not np.isfinite(rn) or (it > 3 and rn > 1e3 * history[0]):
            break
        Gu = difference_gradient(u, ctx)

        def mv(zf, Gu=Gu, u=u):
            z = np.zeros(shape)
            z[idx] = zf
            return jacobian_apply(u, z, p, c, ctx, free, Gu)[idx]

        def pv(rf):
            rr = np.zeros(shape)
            rr[idx] = rf
            return prec(rr)[idx]

        J = LinearOperator((n, n), matvec=mv, dtype=float)
        M = LinearOperator((n, n), matvec=pv, dtype=float)
        dz, info = gmres(J, -r[idx], M=M, rtol=opts.linear_tol, atol=0.0, restart=60, maxiter=50)
        if info < 0 or not np.all(np.isfinite(dz)):
            raise SolverError("Jacobian solve failed")
        u = u.copy()
        u[idx] += dz
        r = nonlinear_residual(u, p, c, ctx, free)
    raise AmplitudeError("Newton diverged: amplitude outside admissible ball")


def solve_exterior_nonlinear(g: np.ndarray, p: LameParameters, c: NonlinearCoefficients, ctx: FracContext,
                             partition: NodePartition, opts: NewtonOptions = NewtonOptions()):
    """Small-data solution of the nonlinear exterior problem by Newton with amplitude continuation."""
    if ctx.s < 0.5:
        raise ValueError("nonlinear problems require s in [1/2, 1)")
    _check_exterior_data(g, partition)
    t0 = time.perf_counter()
    free = partition.omega
    prec = SpectralPreconditioner(p, ctx, free)
    if not np.any(g):
        return np.zeros_like(g, dtype=float), SolveReport(1, 0.0, opts.tol, time.perf_counter() - t0, True, [0.0])
    history: list = []
    u = np.array(g, dtype=float)
    u[:, free] = 0.0
    total = 0
    rel = 0.0
    steps = max(1, opts.continuation_steps)
    for k in range(1, steps + 1):
        gk = g * (k / steps)
        u = np.where(free, u, gk)
        u, it, rel = _newton(u, p, c, ctx, free, opts, prec, history)
        total += it
    return u, SolveReport(total, rel, opts.tol, time.perf_counter() - t0, True, history)


def first_linearization(g: np.ndarray, p: LameParameters, ctx: FracContext, partition: NodePartition,
                        tol: float = 1e-10):
    """First-order linearization at zero data: the linear exterior solution."""
    return solve_exterior_linear(g, p, ctx, partition, tol)[0]


def second_linearization(g1: np.ndarray, g2: np.ndarray, p: LameParameters, c: NonlinearCoefficients,
                         ctx: FracContext, partition: NodePartition, tol: float = 1e-10,
                         v1: np.ndarray | None = None, v2: np.ndarray | None = None,
                         return_residual: bool = False):
    """Mixed second derivative of the nonlinear solution map at zero data.

    Solves B[w, phi] = <Ntilde(v1, v2), phi> on the free set with w = 0 outside.
    """
    if v1 is None:
        v1 = first_linearization(g1, p, ctx, partition, tol)
    if v2 is None:
        v2 = first_linearization(g2, p, ctx, partition, tol)
    load = stress_divergence(bilinearized_N_tilde(v1, v2, p, c, ctx), ctx)
    zero = np.zeros_like(v1)
    if not np.any(load * partition.omega):
        w, rep, r = zero, SolveReport(0, 0.0, tol, 0.0), zero
    else:
        w, rep, r = _linear_solve(zero, p, ctx, partition.omega, tol, 2000, load=load)
    return (w, rep, r) if return_residual else w


class DirectSolver:
    """Dense Cholesky factorization of the Galerkin matrix on a free node set.

    Worth it when many exterior problems share one operator and the free set
    is small (a few thousand unknowns); columns are assembled by applying the
    stiffness representer to unit fields in batches.
    """

    def __init__(self, p: LameParameters, ctx: FracContext, free: np.ndarray, batch: int = 96,
                 max_unknowns: int = 6000):
        self.p, self.ctx, self.free = p, ctx, np.asarray(free, dtype=bool)
        self.nodes = np.argwhere(self.free)
        n = len(self.nodes)
        if 3 * n > max_unknowns:
            raise SolverError(f"{3 * n} unknowns exceed the dense limit {max_unknowns}")
        if n == 0:
            raise SolverError("empty free set")
        t0 = time.perf_counter()
        shape = (3,) + ctx.grid.shape
        A = np.empty((3 * n, 3 * n))
        for c in range(3):
            for s0 in range(0, n, batch):
                blk = self.nodes[s0:s0 + batch]
                E = np.zeros((len(blk),) + shape)
                E[np.arange(len(blk)), c, blk[:, 0], blk[:, 1], blk[:, 2]] = 1.0
                A[:, c * n + s0:c * n + s0 + len(blk)] = self.restrict(stiffness_apply(E, p, ctx)).T
        self.asymmetry = float(np.abs(A - A.T).max() / np.abs(A).max())
        A = 0.5 * (A + A.T)
        try:
            self._factor = cho_factor(A, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SolverError("Galerkin matrix is not positive definite") from exc
        self.matrix = A
        self.setup_time = time.perf_counter() - t0

    @property
    def unknowns(self) -> int:
        return 3 * len(self.nodes)

    def restrict(self, fields: np.ndarray) -> np.ndarray:
        """Free-node values, ordered component-major; batch axis first."""
        f = np.asarray(fields)
        return np.concatenate([f[..., k, :, :, :][..., self.free] for k in range(3)], axis=-1)

    def extend(self, values: np.ndarray, base: np.ndarray | None = None) -> np.ndarray:
        """Inverse of :meth:`restrict`; values are written into ``base`` (zeros by default)."""
        values = np.asarray(values)
        n = len(self.nodes)
        lead = values.shape[:-1]
        out = np.zeros(lead + (3,) + self.ctx.grid.shape) if base is None else np.array(base, dtype=float)
        for k in range(3):
            out[..., k, :, :, :][..., self.free] = values[..., k * n:(k + 1) * n]
        return out

    def solve_free(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A z = rhs; ``rhs`` has the unknown axis last."""
        return cho_solve(self._factor, np.asarray(rhs).T, check_finite=False).T

    def exterior_correction(self, g: np.ndarray, load: np.ndarray | None = None) -> np.ndarray:
        """Free-node values z with u = g + z solving the exterior problem."""
        rhs = -self.restrict(stiffness_apply(g, self.p, self.ctx))
        if load is not None:
            rhs = rhs + self.restrict(load)
        return self.solve_free(rhs)

    def solve(self, g: np.ndarray, load: np.ndarray | None = None, check: bool = True):
        """Full solution fields for one or a batch of exterior data; returns (u, report)."""
        t0 = time.perf_counter()
        g = np.asarray(g, dtype=float)
        z = self.exterior_correction(g, load)
        u = self.extend(z, base=np.where(self.free, 0.0, g))
        rel = 0.0
        if check:
            r = stiffness_apply(u, self.p, self.ctx) * self.free
            if load is not None:
                r = r - load * self.free
            hv = self.ctx.grid.cell_volume
            ref = stiffness_apply(np.where(self.free, 0.0, g), self.p, self.ctx) * self.free
            if load is not None:
                ref = ref - load * self.free
            num = np.sqrt(np.atleast_1d(_inner(r, r, hv)))
            den = np.sqrt(np.atleast_1d(_inner(ref, ref, hv)))
            rel = float(np.max(num / np.where(den > 0, den, 1.0)))
        return u, SolveReport(1, rel, 0.0, time.perf_counter() - t0, True)
