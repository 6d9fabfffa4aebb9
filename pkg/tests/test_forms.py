import numpy as np
import pytest

from fraclame.forms import (G_tilde, LameParameters, N_stress, NonlinearCoefficients, apply_B_operator,
                            bilinear_B, bilinearized_N_tilde, nonlinear_N_weak, stiffness_apply,
                            stress_divergence)
from fraclame.fractional import FracContext, difference_gradient, frac_inner, partial_derivative
from fraclame.grid import build_grid, make_cutoff_coordinate

from conftest import omega_random
from oracles import nonlinear_stress_constant_gradient


def _unit(f, axis):
    out = np.zeros((3,) + f.shape)
    out[axis] = f
    return out


def test_parameter_invariants(omega):
    z = np.zeros(omega.shape)
    with pytest.raises(ValueError):
        LameParameters(0.5, 0.0, z, z)
    with pytest.raises(ValueError):
        LameParameters(-1.5, 1.0, z, z)
    with pytest.raises(ValueError):
        LameParameters(0.5, 1.0, -1.0 * omega, z)
    LameParameters(-1.0, 1.0, z, z)  # lambda0 + mu0 = 0 is admissible


def test_form_zero_and_symmetry(ctx, omega, p1):
    rng = np.random.default_rng(0)
    u, v = omega_random(rng, omega), omega_random(rng, omega)
    assert bilinear_B(np.zeros_like(u), v, p1, ctx) == 0.0
    a, b = bilinear_B(u, v, p1, ctx), bilinear_B(v, u, p1, ctx)
    assert abs(a - b) <= 1e-12 * abs(bilinear_B(u, u, p1, ctx))


def test_form_lower_bound_without_local_terms(ctx, omega):
    # [PAPER] B[u,u] >= mu0 sum_ij <(-Delta)^s u_ij, u_ij> when lambda0 + mu0 >= 0
    rng = np.random.default_rng(1)
    z = np.zeros(omega.shape)
    for lam0, mu0 in ((-1.0, 1.0), (0.0, 0.7), (1.5, 0.5)):
        p = LameParameters(lam0, mu0, z, z)
        for _ in range(3):
            u = omega_random(rng, omega)
            bound = mu0 * sum(frac_inner(partial_derivative(u[i], j, ctx), partial_derivative(u[i], j, ctx), ctx)
                              for i in range(3) for j in range(3))
            assert bilinear_B(u, u, p, ctx) >= bound * (1 - 1e-12)


def test_representer_and_operator(ctx, omega, p1):
    rng = np.random.default_rng(2)
    hv = ctx.grid.cell_volume
    u, v = omega_random(rng, omega), omega_random(rng, omega)
    Au, Av = apply_B_operator(u, p1, ctx, omega), apply_B_operator(v, p1, ctx, omega)
    ref = bilinear_B(u, v, p1, ctx)
    assert abs(hv * np.sum(Au * v) - ref) <= 1e-12 * abs(ref)
    assert abs(hv * np.sum(Au * v) - hv * np.sum(u * Av)) <= 1e-12 * abs(ref)
    assert not np.any(apply_B_operator(np.zeros_like(u), p1, ctx, omega))
    # the full-grid representer also pairs against exterior fields
    w = rng.standard_normal(u.shape)
    assert abs(hv * np.sum(stiffness_apply(u, p1, ctx) * w) - bilinear_B(u, w, p1, ctx)) < 1e-10
    with pytest.raises(ValueError):
        apply_B_operator(w, p1, ctx, omega)


def test_rayleigh_quotient_positive(ctx, omega, p1):
    rng = np.random.default_rng(3)
    hv = ctx.grid.cell_volume
    for _ in range(20):
        u = omega_random(rng, omega)
        assert hv * np.sum(apply_B_operator(u, p1, ctx, omega) * u) / (hv * np.sum(u * u)) > 0


def test_nonlinear_stress_matches_term_by_term_oracle():
    # [DERIVED] independent evaluation on a degree-1 displacement with constant coefficients
    g = build_grid(1.0, 8)
    ctx = FracContext(g, 0.5)
    rng = np.random.default_rng(4)
    M = rng.standard_normal((3, 3))
    u = np.einsum("ij,jxyz->ixyz", M, g.coordinates())
    ones = np.ones(g.shape)
    lam, mu, A, B, C = 0.7, 1.3, -0.4, 0.25, 0.6
    p = LameParameters(0.5, 1.0, lam * ones, mu * ones)
    c = NonlinearCoefficients(A * ones, B * ones, C * ones)
    N = N_stress(u, p, c, ctx)
    ref = nonlinear_stress_constant_gradient(M, lam, mu, A, B, C)
    interior = (slice(None), slice(None)) + (slice(1, -1),) * 3
    assert np.abs(N[interior] - ref[:, :, None, None, None]).max() <= 1e-12 * np.abs(ref).max()


def test_nonlinear_stress_homogeneity(ctx, omega, p1, c1):
    rng = np.random.default_rng(5)
    u = omega_random(rng, omega)
    assert not np.any(N_stress(np.zeros_like(u), p1, c1, ctx))
    N1, N3 = N_stress(u, p1, c1, ctx), N_stress(2.5 * u, p1, c1, ctx)
    assert np.abs(N3 - 6.25 * N1).max() <= 1e-12 * np.abs(N3).max()


def test_nonlinear_weak_pairing(ctx, omega, p1, c1):
    rng = np.random.default_rng(6)
    u, v = omega_random(rng, omega), omega_random(rng, omega)
    assert nonlinear_N_weak(np.zeros_like(u), v, p1, c1, ctx, omega) == 0.0
    base = nonlinear_N_weak(u, v, p1, c1, ctx, omega)
    assert nonlinear_N_weak(3 * u, v, p1, c1, ctx, omega) == pytest.approx(9 * base, rel=1e-12)
    # divergence-then-pair gives the same number (summation by parts is exact)
    alt = ctx.grid.cell_volume * np.sum(stress_divergence(N_stress(u, p1, c1, ctx), ctx) * v)
    assert alt == pytest.approx(base, rel=1e-11)
    # a test field whose differences vanish on omega sees nothing
    const = np.ones(u.shape)
    assert nonlinear_N_weak(u, const, p1, c1, ctx) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        nonlinear_N_weak(u, rng.standard_normal(u.shape), p1, c1, ctx, omega)


def test_polarization_and_symmetry(ctx, omega, p1, c1):
    rng = np.random.default_rng(7)
    for _ in range(5):
        v = omega_random(rng, omega)
        N = N_stress(v, p1, c1, ctx)
        assert np.abs(bilinearized_N_tilde(v, v, p1, c1, ctx) - 2 * N).max() <= 1e-12 * np.abs(N).max()
    a, b = omega_random(rng, omega), omega_random(rng, omega)
    ab, ba = bilinearized_N_tilde(a, b, p1, c1, ctx), bilinearized_N_tilde(b, a, p1, c1, ctx)
    assert np.abs(ab - ba).max() <= 1e-13 * np.abs(ab).max()
    assert not np.any(bilinearized_N_tilde(a, np.zeros_like(a), p1, c1, ctx))


def test_N_tilde_is_mixed_second_derivative(ctx, omega, p1, c1):
    rng = np.random.default_rng(8)
    a, b = omega_random(rng, omega), omega_random(rng, omega)
    # N is quadratic, so the mixed second difference is exact for any step
    t = 0.3
    mixed = (N_stress(t * (a + b), p1, c1, ctx) - N_stress(t * a, p1, c1, ctx)
             - N_stress(t * b, p1, c1, ctx)) / t ** 2
    Nt = bilinearized_N_tilde(a, b, p1, c1, ctx)
    assert np.abs(mixed - Nt).max() <= 1e-11 * np.abs(Nt).max()


def test_G_tilde_consistency(ctx, omega, p1, c1):
    rng = np.random.default_rng(9)
    c2 = NonlinearCoefficients(c1.A_field + 0.3 * omega, c1.B_field, c1.C_field - 0.2 * omega)
    a, b = omega_random(rng, omega), omega_random(rng, omega)
    diff = bilinearized_N_tilde(a, b, p1, c2, ctx) - bilinearized_N_tilde(a, b, p1, c1, ctx)
    Gt = G_tilde(a, b, c1.A_field, c2.A_field, c1.C_field, c2.C_field, ctx)
    assert np.abs(Gt - diff).max() <= 1e-12 * np.abs(diff).max()
    # lambda, mu and B drop out of the difference
    p_other = LameParameters(2.0, 0.3, 5.0 * omega, 0.1 * omega)
    c1b = NonlinearCoefficients(c1.A_field, c1.B_field + 4.0 * omega, c1.C_field)
    c2b = NonlinearCoefficients(c2.A_field, c2.B_field + 4.0 * omega, c2.C_field)
    diff2 = bilinearized_N_tilde(a, b, p_other, c2b, ctx) - bilinearized_N_tilde(a, b, p_other, c1b, ctx)
    assert np.abs(diff2 - Gt).max() <= 1e-11 * np.abs(diff).max()


def test_G_tilde_closed_forms(cfg, ctx):
    # [PAPER] the three direct computations on supp psi
    g = ctx.grid
    psi, sup = cfg.psi()
    om = cfg.region("omega")
    omask = om.contains(g.coordinates())
    dA, dC = 0.2, -0.3
    A1, C1 = 0.3 * omask, 0.1 * omask
    A2, C2 = A1 + dA * omask, C1 + dC * omask
    Dpsi = difference_gradient(psi[None], ctx)[0]
    on = (psi != 0) | np.any(Dpsi != 0, axis=0)
    x1 = make_cutoff_coordinate(0, sup, om, g)
    x2 = make_cutoff_coordinate(1, sup, om, g)

    Gt = G_tilde(_unit(x1, 1), _unit(x1, 0), A1, A2, C1, C2, ctx)
    assert np.abs(Gt[0, 0][on]).max() <= 1e-10
    assert np.abs(Gt[0, 1][on] - dA / 2).max() <= 1e-10
    assert np.abs(Gt[0, 2][on]).max() <= 1e-10

    Gt = G_tilde(_unit(x2, 1), _unit(x1, 0), A1, A2, C1, C2, ctx)
    assert np.abs(Gt[0, 0][on] - 2 * dC).max() <= 1e-10
    assert np.abs(Gt[0, 1][on]).max() <= 1e-10
    assert np.abs(Gt[0, 2][on]).max() <= 1e-10

    Gt = G_tilde(_unit(psi, 0), _unit(x1, 0), A1, A2, C1, C2, ctx)
    assert np.abs(Gt[0, 0][on] - (2 * dA + 2 * dC) * Dpsi[0][on]).max() <= 1e-10
    assert np.abs(Gt[0, 1][on] - dA / 2 * Dpsi[1][on]).max() <= 1e-10
    assert np.abs(Gt[0, 2][on] - dA / 2 * Dpsi[2][on]).max() <= 1e-10
