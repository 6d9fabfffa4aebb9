import numpy as np
import pytest

from fraclame.dtn import check_test_field, dtn_gap_matrix, dtn_pair, dtn_pairing_vector
from fraclame.forms import LameParameters, NonlinearCoefficients, integral_identity_rhs
from fraclame.grid import GeometryError, scalar_bump
from fraclame.runge import build_dictionary
from fraclame.solvers import NewtonOptions, solve_exterior_linear

from conftest import omega_random


@pytest.fixture(scope="module")
def atoms(cfg, ctx, part):
    d = build_dictionary(ctx.grid, part.w2, radius=cfg.raw["runge"]["radius"], count=6)
    return d.atoms(0, 6)


@pytest.fixture(scope="module")
def p2(cfg, omega):
    return cfg.lame("p2", omega)


def _perturbed(p, omega, rng, grid):
    c = rng.uniform(-0.15, 0.15, 3)
    bump = scalar_bump(grid, c, [0.2, 0.2, 0.2]) * omega
    return LameParameters(p.lambda0, p.mu0, p.lambda_field + rng.uniform(0, 1) * bump,
                          p.mu_field + rng.uniform(0, 1) * bump)


def test_zero_data(ctx, part, p1, atoms):
    assert dtn_pair(np.zeros_like(atoms[0]), atoms[1], p1, ctx, part) == 0.0


def test_map_is_symmetric(ctx, part, p1, atoms):
    for a in range(3):
        for b in range(a + 1, 4):
            ab = dtn_pair(atoms[a], atoms[b], p1, ctx, part, tol=1e-13)
            ba = dtn_pair(atoms[b], atoms[a], p1, ctx, part, tol=1e-13)
            assert abs(ab - ba) <= 1e-10 * max(abs(ab), 1.0)


def test_equal_parameters_have_zero_gap(ctx, part, p1, atoms):
    gap = dtn_gap_matrix(p1, p1, atoms[:3], atoms[3:], ctx, part)
    assert gap.max_abs == 0.0


def test_gap_antisymmetry_and_entries(ctx, part, p1, p2, atoms):
    controls, tests = atoms[:2], atoms[4:]
    G = dtn_gap_matrix(p1, p2, controls, tests, ctx, part, tol=1e-13)
    H = dtn_gap_matrix(p2, p1, controls, tests, ctx, part, tol=1e-13)
    assert np.abs(G.values + H.values).max() <= 1e-12 * G.max_abs
    for a in range(2):
        for b in range(2):
            ref = (dtn_pair(controls[a], tests[b], p1, ctx, part, tol=1e-13)
                   - dtn_pair(controls[a], tests[b], p2, ctx, part, tol=1e-13))
            assert abs(G.values[a, b] - ref) <= 1e-9 * G.max_abs
    assert G.contract([1, 0], [0, 1]) == G.values[0, 1]
    D = dtn_gap_matrix(p1, p2, controls, tests, ctx, part, direct=True)
    assert np.abs(D.values - G.values).max() <= 1e-9 * G.max_abs


def test_integral_identity_and_sign(ctx, part, omega, p1, atoms):
    # [DERIVED] gap equals the local-part difference evaluated on the two solutions
    rng = np.random.default_rng(0)
    g, h = atoms[0], atoms[5]
    for _ in range(3):
        q1 = _perturbed(p1, omega, rng, ctx.grid)
        q2 = _perturbed(p1, omega, rng, ctx.grid)
        gap = dtn_gap_matrix(q1, q2, g[None], h[None], ctx, part, direct=True).values[0, 0]
        u1, _ = solve_exterior_linear(g, q1, ctx, part, tol=1e-13)
        u2, _ = solve_exterior_linear(h, q2, ctx, part, tol=1e-13)
        ident = integral_identity_rhs(u1, u2, q1, q2, ctx)
        # the gap is a difference of two pairings, each exact to solver tolerance
        scale = max(abs(dtn_pair(g, h, q, ctx, part, tol=1e-13)) for q in (q1, q2))
        assert abs(gap - ident) <= 1e-8 * scale
        assert integral_identity_rhs(u1, u2, q2, q1, ctx) == pytest.approx(-ident, rel=1e-14)


def test_data_must_be_exterior(ctx, part, omega, p1, atoms):
    # data live on the exterior; an omega component is refused rather than silently dropped
    g = atoms[0] + omega_random(np.random.default_rng(1), omega)
    with pytest.raises(ValueError):
        dtn_pair(g, atoms[3], p1, ctx, part)


def test_pairing_vector_matches_scalar(ctx, part, p1, atoms):
    u, _ = solve_exterior_linear(atoms[0], p1, ctx, part, tol=1e-13)
    vec = dtn_pairing_vector(u, atoms[2:], p1, ctx)
    for k, h in enumerate(atoms[2:]):
        assert vec[k] == pytest.approx(dtn_pair(atoms[0], h, p1, ctx, part, tol=1e-13), rel=1e-9, abs=1e-12)


def test_rejects_test_fields_near_omega(ctx, part, p1, omega, atoms):
    bad = np.zeros_like(atoms[0])
    bad[0] = scalar_bump(ctx.grid, [0.5, 0, 0], [0.15, 0.15, 0.15])
    with pytest.raises(GeometryError):
        check_test_field(bad, part, ctx)
    with pytest.raises(GeometryError):
        dtn_pair(atoms[0], bad, p1, ctx, part)
    with pytest.raises(ValueError):
        dtn_gap_matrix(p1, p1, atoms[:0], atoms, ctx, part)
    with pytest.raises(ValueError):
        dtn_pair(atoms[0], atoms[1], p1, ctx, part, kind="parabolic")


def test_nonlinear_kind(ctx, part, omega, p1, c1, atoms):
    with pytest.raises(ValueError):
        dtn_pair(atoms[0], atoms[1], p1, ctx, part, kind="nonlinear")
    newton = NewtonOptions(tol=1e-13, continuation_steps=1, linear_tol=1e-14)
    g = 1e-3 * atoms[0]
    G = dtn_gap_matrix(p1, p1, g[None], atoms[3:], ctx, part, kind="nonlinear", c1=c1, c2=c1, newton=newton)
    assert G.max_abs == 0.0
    c2 = NonlinearCoefficients(c1.A_field + 0.5 * omega, c1.B_field, c1.C_field)
    G = dtn_gap_matrix(p1, p1, g[None], atoms[3:], ctx, part, kind="nonlinear", c1=c1, c2=c2, newton=newton)
    # a change in the quadratic coefficients shows up at second order in the data
    G2 = dtn_gap_matrix(p1, p1, 2 * g[None], atoms[3:], ctx, part, kind="nonlinear", c1=c1, c2=c2, newton=newton)
    assert G.max_abs > 0
    assert G2.max_abs / G.max_abs == pytest.approx(4.0, rel=0.05)


def test_obstacle_kind(cfg, ctx, atoms):
    d1, d2 = cfg.partition("d1"), cfg.partition("d2")
    p = cfg.lame("p1", d1.omega)
    same = dtn_gap_matrix(p, p, atoms[:1], atoms[3:], ctx, (d1, d1), kind="obstacle", tol=1e-12)
    assert same.max_abs == 0.0
    diff = dtn_gap_matrix(p, p, atoms[:1], atoms[3:], ctx, (d1, d2), kind="obstacle", tol=1e-12)
    assert diff.max_abs > 0
