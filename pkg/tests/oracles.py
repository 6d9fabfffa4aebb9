"""Independent reference computations used by the tests (no FFT involved)."""
from __future__ import annotations

import warnings
from math import gamma, pi

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline


def gaussian_fraclap_radial(r: float, sigma: float, s: float) -> float:
    """(-Delta)^s exp(-|x|^2 / 2 sigma^2) in R^3 at radius r, by 1-D quadrature of the
    inverse Fourier transform (1 / 2 pi^2 r) int k sin(kr) |k|^{2s} g_hat(k) dk."""
    amp = (2 * pi * sigma ** 2) ** 1.5

    def spec(k):
        return amp * np.exp(-0.5 * sigma ** 2 * k * k) * k ** (2 * s)

    kmax = 14.0 / sigma
    if r == 0.0:
        val = integrate.quad(lambda k: k * k * spec(k), 0, kmax, epsabs=0, epsrel=1e-12, limit=500)[0]
        return val / (2 * pi ** 2)
    with warnings.catch_warnings():
        # QAWO flags round-off once the oscillatory tail is below epsabs; harmless here
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val = integrate.quad(lambda k: k * spec(k), 0, kmax, weight="sin", wvar=r, epsabs=1e-14,
                             epsrel=1e-12, limit=500)[0]
    return val / (2 * pi ** 2 * r)


def gaussian_fraclap_periodic(grid, sigma: float, s: float, images: int = 6) -> np.ndarray:
    """Periodized radial oracle on the box: image sum of the free-space profile, mean removed.

    The free-space result decays like r^-(3+2s); the image sum restores the
    periodic problem the grid solves.  Truncating the image lattice leaves an
    almost constant remainder, which the zero-mean condition removes.
    """
    rmax = np.sqrt(3) * grid.L * (2 * images + 2)
    rr = np.concatenate([np.linspace(0, 2, 801)[:-1], np.geomspace(2, rmax, 400)])
    tab = np.array([gaussian_fraclap_radial(v, sigma, s) for v in rr])
    spline = CubicSpline(rr, tab * (1 + rr ** 2) ** 2)
    x = grid.coordinates()
    out = np.zeros(grid.shape)
    span = range(-images, images + 1)
    for a in span:
        for b in span:
            for c in span:
                shift = 2 * grid.L * np.array([a, b, c]).reshape(3, 1, 1, 1)
                r = np.sqrt(np.sum((x + shift) ** 2, axis=0))
                out += spline(r) / (1 + r ** 2) ** 2
    return out - out.mean()


def hypergeometric_gaussian(r, sigma: float, s: float):
    """Closed form 2^s sigma^-2s Gamma(3/2+s)/Gamma(3/2) 1F1(3/2+s; 3/2; -r^2/2sigma^2)."""
    from scipy.special import hyp1f1

    return 2 ** s / sigma ** (2 * s) * gamma(1.5 + s) / gamma(1.5) * hyp1f1(1.5 + s, 1.5, -np.asarray(r) ** 2
                                                                         / (2 * sigma ** 2))


def nonlinear_stress_constant_gradient(M: np.ndarray, lam, mu, A, B, C) -> np.ndarray:
    """N_ij for a constant displacement gradient M[m, n] = d_n u_m, term by term with loops."""
    out = np.zeros((3, 3))
    sq = sum(M[m, n] ** 2 for m in range(3) for n in range(3))
    cross = sum(M[m, n] * M[n, m] for m in range(3) for n in range(3))
    tr = sum(M[m, m] for m in range(3))
    for i in range(3):
        for j in range(3):
            d = 1.0 if i == j else 0.0
            v = (lam + B) / 2 * sq * d + C * tr ** 2 * d + B / 2 * cross * d
            v += B * tr * M[j, i]
            v += A / 4 * sum(M[j, m] * M[m, i] for m in range(3))
            v += (lam + B) * tr * M[i, j]
            v += (mu + A / 4) * sum(M[m, i] * M[m, j] + M[i, m] * M[j, m] + M[i, m] * M[m, j] for m in range(3))
            out[i, j] = v
    return out
