"""Discrete elastic bilinear form, the quadratic nonlinearity and its
bilinearization.

Gradient tensors use the convention ``G[i, j] = d_j u_i`` and carry the grid
axes last, so a stress tensor has shape ``(3, 3, N, N, N)``.  Coefficient
fields are stored on the full grid and are zero outside the quadrature region
(omega, or omega minus the obstacle).

The fractional constant-coefficient part is evaluated spectrally; every
local (coefficient-weighted) term uses centered differences.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fractional import FracContext, difference_divergence, difference_gradient

EYE = np.eye(3).reshape(3, 3, 1, 1, 1)


@dataclass(frozen=True)
class LameParameters:
    lambda0: float
    mu0: float
    lambda_field: np.ndarray
    mu_field: np.ndarray

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError(f"mu0 must be positive, got {self.mu0}")
        if self.lambda0 + self.mu0 < 0:
            raise ValueError(f"lambda0 + mu0 must be nonnegative, got {self.lambda0 + self.mu0}")
        if np.any(self.lambda_field < 0) or np.any(self.mu_field < 0):
            raise ValueError("local Lame fields must be nonnegative")

    @classmethod
    def constant(cls, lambda0, mu0, lam, mu, mask: np.ndarray) -> "LameParameters":
        return cls(lambda0, mu0, lam * mask.astype(float), mu * mask.astype(float))

    def restricted(self, mask: np.ndarray) -> "LameParameters":
        """Zero the local fields outside ``mask`` (e.g. inside an obstacle)."""
        return replace(self, lambda_field=self.lambda_field * mask, mu_field=self.mu_field * mask)

    def same_as(self, other: "LameParameters") -> bool:
        return (self.lambda0 == other.lambda0 and self.mu0 == other.mu0
                and np.array_equal(self.lambda_field, other.lambda_field)
                and np.array_equal(self.mu_field, other.mu_field))


@dataclass(frozen=True)
class NonlinearCoefficients:
    A_field: np.ndarray
    B_field: np.ndarray
    C_field: np.ndarray

    def __post_init__(self):
        for name in ("A_field", "B_field", "C_field"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def zeros(cls, shape) -> "NonlinearCoefficients":
        z = np.zeros(shape)
        return cls(z, z, z)


def _div(G: np.ndarray) -> np.ndarray:
    return G[..., 0, 0, :, :, :] + G[..., 1, 1, :, :, :] + G[..., 2, 2, :, :, :]


def _sym(G: np.ndarray) -> np.ndarray:
    return G + np.swapaxes(G, -5, -4)


def _mm(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Nodewise matrix product of tensor fields."""
    return np.einsum("...imxyz,...mjxyz->...ijxyz", X, Y)


def _T(X: np.ndarray) -> np.ndarray:
    return np.swapaxes(X, -5, -4)


def _check_grid(ctx: FracContext, *fields):
    for f in fields:
        if f.shape[-3:] != ctx.grid.shape:
            raise ValueError("field does not live on the context grid")


def bilinear_B(u: np.ndarray, v: np.ndarray, p: LameParameters, ctx: FracContext) -> float:
    """The elastic form: fractional constant-coefficient part plus local variable part."""
    _check_grid(ctx, u, v)
    hv = ctx.grid.cell_volume
    U, V = ctx.fft(u), ctx.fft(v)
    kx, ky, kz = ctx.k
    GU = np.stack([1j * kx * U, 1j * ky * U, 1j * kz * U], axis=-4)
    GV = np.stack([1j * kx * V, 1j * ky * V, 1j * kz * V], axis=-4)
    m = ctx.multiplier
    val = p.lambda0 * ctx.spectral_inner(_div(GU), _div(GV), m)
    val += 0.5 * p.mu0 * np.sum(ctx.spectral_inner(_sym(GU), _sym(GV), m), axis=(-2, -1))
    gu, gv = difference_gradient(u, ctx), difference_gradient(v, ctx)
    val += hv * np.sum(p.lambda_field * _div(gu) * _div(gv), axis=(-3, -2, -1))
    val += 0.5 * hv * np.sum(p.mu_field * np.sum(_sym(gu) * _sym(gv), axis=(-5, -4)),
                             axis=(-3, -2, -1))
    return float(val) if np.ndim(val) == 0 else val


def stiffness_apply(u: np.ndarray, p: LameParameters, ctx: FracContext) -> np.ndarray:
    """Representer of v -> B[u, v] under the h^3-weighted nodal inner product (all nodes)."""
    U = ctx.fft(u)
    kx, ky, kz = ctx.k
    ks = (kx, ky, kz)
    GU = np.stack([1j * kx * U, 1j * ky * U, 1j * kz * U], axis=-4)
    m = ctx.multiplier
    T = p.lambda0 * m * _div(GU)
    S = p.mu0 * m * _sym(GU)
    frac = ctx.ifft(np.stack([-(1j * ks[i] * T + sum(1j * ks[j] * S[..., i, j, :, :, :] for j in range(3)))
                              for i in range(3)], axis=-4))
    G = difference_gradient(u, ctx)
    local = p.lambda_field * _div(G)
    return frac - difference_divergence(local[..., None, None, :, :, :] * EYE + p.mu_field * _sym(G), ctx)


def apply_B_operator(u: np.ndarray, p: LameParameters, ctx: FracContext, free: np.ndarray) -> np.ndarray:
    """Galerkin action of B on fields supported in ``free``; output masked to ``free``.

    Satisfies h^3 * sum(apply(u) * v) = B[u, v] for every v supported in ``free``.
    """
    if np.any(u[..., ~free] != 0):
        raise ValueError("input field is not supported on the free node set")
    return stiffness_apply(u, p, ctx) * free


def N_stress(u: np.ndarray, p: LameParameters, c: NonlinearCoefficients, ctx: FracContext,
             G: np.ndarray | None = None) -> np.ndarray:
    """Quadratic stress tensor N_ij(u) at every node (zero where the coefficients vanish)."""
    if G is None:
        G = difference_gradient(u, ctx)
    lam, mu = p.lambda_field, p.mu_field
    A, B, C = c.A_field, c.B_field, c.C_field
    tr = _div(G)
    GG = _mm(G, G)
    scalar = ((lam + B) / 2 * np.sum(G * G, axis=(-5, -4)) + C * tr ** 2
              + B / 2 * np.sum(G * _T(G), axis=(-5, -4)))
    return (scalar * EYE + B * tr * _T(G) + A / 4 * _T(GG) + (lam + B) * tr * G
            + (mu + A / 4) * (_mm(_T(G), G) + _mm(G, _T(G)) + GG))


def bilinearized_N_tilde(v1: np.ndarray, v2: np.ndarray, p: LameParameters, c: NonlinearCoefficients,
                         ctx: FracContext, G1: np.ndarray | None = None,
                         G2: np.ndarray | None = None) -> np.ndarray:
    """Mixed second derivative of u -> N(u) in directions v1, v2 (symmetric bilinear)."""
    G1 = difference_gradient(v1, ctx) if G1 is None else G1
    G2 = difference_gradient(v2, ctx) if G2 is None else G2
    lam, mu = p.lambda_field, p.mu_field
    A, B, C = c.A_field, c.B_field, c.C_field
    t1, t2 = _div(G1), _div(G2)
    scalar = ((lam + B) * np.sum(G1 * G2, axis=(-5, -4)) + 2 * C * t1 * t2
              + B * np.sum(G1 * _T(G2), axis=(-5, -4)))
    G12, G21 = _mm(G1, G2), _mm(G2, G1)
    return (scalar * EYE
            + B * (t1 * _T(G2) + t2 * _T(G1))
            + A / 4 * (_T(G12) + _T(G21))
            + (lam + B) * (t1 * G2 + t2 * G1)
            + (mu + A / 4) * (_mm(_T(G1), G2) + _mm(_T(G2), G1) + _mm(G1, _T(G2))
                              + _mm(G2, _T(G1)) + G12 + G21))


def G_tilde(v1: np.ndarray, v2: np.ndarray, A1: np.ndarray, A2: np.ndarray, C1: np.ndarray,
            C2: np.ndarray, ctx: FracContext, G1: np.ndarray | None = None,
            G2: np.ndarray | None = None) -> np.ndarray:
    """Difference of the bilinearized stresses for two (A, C) coefficient sets."""
    G1 = difference_gradient(v1, ctx) if G1 is None else G1
    G2 = difference_gradient(v2, ctx) if G2 is None else G2
    S1, S2 = _sym(G1), _sym(G2)
    return ((A2 - A1) / 4 * (_T(_mm(S1, S2)) + _T(_mm(S2, S1)))
            + 2 * (C2 - C1) * _div(G1) * _div(G2) * EYE)


def stress_divergence(S: np.ndarray, ctx: FracContext) -> np.ndarray:
    """(sum_j d_j S_ij)_i for a tensor field S of shape (..., 3, 3, N, N, N)."""
    return difference_divergence(S, ctx)


def stress_pairing(S: np.ndarray, v: np.ndarray, ctx: FracContext) -> float:
    """-h^3 sum_x sum_ij S_ij d_j v_i: the weak pairing of div S with v."""
    return float(-ctx.grid.cell_volume * np.sum(S * difference_gradient(v, ctx)))


def nonlinear_N_weak(u: np.ndarray, v: np.ndarray, p: LameParameters, c: NonlinearCoefficients,
                     ctx: FracContext, support: np.ndarray | None = None) -> float:
    """Weak pairing of the nonlinear operator with a test field supported in ``support``."""
    if support is not None and np.any(v[..., ~support] != 0):
        raise ValueError("test field is not supported in omega")
    return stress_pairing(N_stress(u, p, c, ctx), v, ctx)


def integral_identity_rhs(u1: np.ndarray, u2: np.ndarray, p1: LameParameters, p2: LameParameters,
                          ctx: FracContext) -> float:
    """Local-part difference B2 - B1 evaluated on (u1, u2); quadrature over the coefficient support."""
    g1, g2 = difference_gradient(u1, ctx), difference_gradient(u2, ctx)
    hv = ctx.grid.cell_volume
    dl = p2.lambda_field - p1.lambda_field
    dm = p2.mu_field - p1.mu_field
    return float(hv * np.sum(dl * _div(g1) * _div(g2))
                 + 0.5 * hv * np.sum(dm * np.sum(_sym(g1) * _sym(g2), axis=(0, 1))))


def local_constant_symbol(p: LameParameters, region: np.ndarray) -> tuple:
    """Mean local (lambda, mu) over a node set; used by the spectral preconditioner."""
    n = max(int(region.sum()), 1)
    return float(np.sum(p.lambda_field * region) / n), float(np.sum(p.mu_field * region) / n)
