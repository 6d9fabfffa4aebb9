"""Spectral fractional Laplacian, derivatives and fractional inner products.

All transforms act on the trailing three axes, so any leading batch/component
axes are carried through.  Derivative symbols have the Nyquist entry zeroed,
which keeps derivatives of real fields real and makes every discrete
derivative operator exactly antisymmetric.

Two derivative families are provided.  Spectral derivatives (``gradient``)
feed the fractional part.  Centered differences (``difference_gradient``,
symbol ``i sin(k h) / h``) feed every local quadrature over omega: their
stencil is compact, so exterior data kept two nodes away from omega never
leaks into omega-integrals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .grid import BoxGrid

AXES = (-3, -2, -1)


@dataclass(frozen=True)
class FracContext:
    grid: BoxGrid
    s: float
    workers: int = 1
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise ValueError(f"fractional power must lie in (0, 1), got {self.s}")
        N = self.grid.N
        full = 2 * np.pi * sfft.fftfreq(N, d=self.grid.h)
        half = 2 * np.pi * sfft.rfftfreq(N, d=self.grid.h)
        kx, ky, kz = full.copy(), full.copy(), half.copy()
        kx[N // 2] = ky[N // 2] = kz[-1] = 0.0
        h = self.grid.h
        lx, ly, lz = np.sin(kx * h) / h, np.sin(ky * h) / h, np.sin(kz * h) / h
        xi2 = full[:, None, None] ** 2 + full[None, :, None] ** 2 + half[None, None, :] ** 2
        mult = xi2 ** self.s
        mult[0, 0, 0] = 0.0
        # rfft storage: interior columns stand for two conjugate modes
        weight = np.full(half.shape, 2.0)
        weight[0] = 1.0
        weight[-1] = 1.0
        self._tables.update(
            k=(kx[:, None, None], ky[None, :, None], kz[None, None, :]),
            kl=(lx[:, None, None], ly[None, :, None], lz[None, None, :]),
            mult=mult,
            xi2=xi2,
            weight=np.broadcast_to(weight[None, None, :], mult.shape),
        )

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def k(self) -> tuple:
        """Derivative symbols (Nyquist zeroed) broadcastable to the rfft layout."""
        return self._tables["k"]

    @property
    def kl(self) -> tuple:
        """Centered-difference symbols sin(k h)/h in the rfft layout."""
        return self._tables["kl"]

    @property
    def multiplier(self) -> np.ndarray:
        """|xi|^{2s} on the rfft half-spectrum."""
        return self._tables["mult"]

    @property
    def spectral_weight(self) -> np.ndarray:
        return self._tables["weight"]

    def fft(self, f: np.ndarray) -> np.ndarray:
        return sfft.rfftn(f, axes=AXES, workers=self.workers)

    def ifft(self, F: np.ndarray) -> np.ndarray:
        n = self.grid.N
        return sfft.irfftn(F, s=(n, n, n), axes=AXES, workers=self.workers)

    def spectral_inner(self, A: np.ndarray, Bh: np.ndarray, symbol=None) -> np.ndarray:
        """h^3 * sum_x a*b computed from half-spectra, optionally weighted by a symbol.

        Sums over the trailing three axes; leading axes are kept.
        """
        w = self.spectral_weight if symbol is None else self.spectral_weight * symbol
        prod = A.real * Bh.real + A.imag * Bh.imag
        return self.grid.cell_volume / self.grid.num_nodes * np.sum(w * prod, axis=AXES)


def _check_finite(f: np.ndarray):
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")


def frac_laplacian(f: np.ndarray, ctx: FracContext) -> np.ndarray:
    _check_finite(f)
    return ctx.ifft(ctx.multiplier * ctx.fft(f))


def partial_derivative(f: np.ndarray, j: int, ctx: FracContext) -> np.ndarray:
    return ctx.ifft(1j * ctx.k[j] * ctx.fft(f))


def gradient(u: np.ndarray, ctx: FracContext) -> np.ndarray:
    """Gradient tensor ``G[..., i, j] = d_j u_i`` for vector fields of shape (..., 3, N, N, N).

    Returned shape is (..., 3, 3, N, N, N).
    """
    U = ctx.fft(u)
    kx, ky, kz = ctx.k
    G = np.stack([1j * kx * U, 1j * ky * U, 1j * kz * U], axis=-4)
    return ctx.ifft(G)


def _central(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2 * h)


def difference_gradient(u: np.ndarray, ctx: FracContext) -> np.ndarray:
    """Centered-difference gradient ``G[..., i, j] = (u_i(x + h e_j) - u_i(x - h e_j)) / 2h``.

    Periodic and exactly antisymmetric; same layout as :func:`gradient`.  Done
    with shifts rather than transforms so that compact support is preserved
    bitwise.
    """
    h = ctx.grid.h
    return np.stack([_central(u, ax, h) for ax in AXES], axis=-4)


def difference_divergence(S: np.ndarray, ctx: FracContext) -> np.ndarray:
    """``(sum_j D_j S_ij)_i`` with centered differences; S has shape (..., 3, 3, N, N, N)."""
    h = ctx.grid.h
    return sum(_central(S[..., j, :, :, :], AXES[j], h) for j in range(3))


def frac_inner(a: np.ndarray, b: np.ndarray, ctx: FracContext) -> float:
    """h^3 * sum_x ((-Delta)^{s/2} a)((-Delta)^{s/2} b), evaluated spectrally."""
    if a.shape[-3:] != ctx.grid.shape or b.shape[-3:] != ctx.grid.shape:
        raise ValueError("fields do not live on the context grid")
    return ctx.spectral_inner(ctx.fft(a), ctx.fft(b), ctx.multiplier)


def h1s_seminorm_sq(u: np.ndarray, ctx: FracContext, support: np.ndarray | None = None) -> float:
    """sum_{i,j} frac_inner(d_j u_i, d_j u_i); ``support`` is the allowed node mask."""
    if support is not None and np.any(u[:, ~support] != 0):
        raise ValueError("vector field is not supported in the given node set")
    U = ctx.fft(u)
    xi2 = sum(kk ** 2 for kk in ctx.k)
    return float(np.sum(ctx.spectral_inner(U, U, ctx.multiplier * xi2)))


def periodic_kernel_table(grid: BoxGrid, s: float, images: int = 3) -> np.ndarray:
    """sum_n |d + 2Ln|^{-(3+2s)} for every node displacement d (zero at d = 0)."""
    N, h, L = grid.N, grid.h, grid.L
    idx = np.arange(N)
    idx = np.where(idx < N // 2, idx, idx - N) * h
    d = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"))
    table = np.zeros(grid.shape)
    rng = range(-images, images + 1)
    for a in rng:
        for b in rng:
            for c in rng:
                shift = 2 * L * np.array([a, b, c]).reshape(3, 1, 1, 1)
                r = np.sqrt(np.sum((d + shift) ** 2, axis=0))
                with np.errstate(divide="ignore"):
                    table += np.where(r > 0, r ** -(3 + 2 * s), 0.0)
    return table


def singular_double_sum(a: np.ndarray, b: np.ndarray, grid: BoxGrid, s: float,
                        kernel: np.ndarray | None = None) -> float:
    """Brute-force h^6 * sum_{x != y} (a(x)-a(y))(b(x)-b(y)) K(x-y) over all node pairs.

    Quadrature oracle for the fractional bilinear form; O(N^6).
    """
    if kernel is None:
        kernel = periodic_kernel_table(grid, s)
    N = grid.N
    av, bv = a.ravel(), b.ravel()
    ii = np.stack(np.unravel_index(np.arange(grid.num_nodes), grid.shape), axis=1)
    total = 0.0
    for p in range(grid.num_nodes):
        disp = (ii[p] - ii) % N
        k = kernel[disp[:, 0], disp[:, 1], disp[:, 2]]
        total += float(np.sum((av[p] - av) * (bv[p] - bv) * k))
    return total * grid.cell_volume ** 2
