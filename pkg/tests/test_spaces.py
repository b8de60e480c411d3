import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from numpy.polynomial import legendre

from tfelab.errors import ConfigurationError, PreconditionError, RangeError
from tfelab.spaces import (
    Basis,
    Field,
    build_norm_table,
    build_quadrature,
    c0_embed_probe,
    equivalence_constant,
    hardy_probe,
    interp_probe,
    norm_k,
    norm_U,
    random_coeffs,
    seminorm_k,
)

MASS_U0_1 = 4.0897488468909
# sup [V]_j / ([V]_0 + [V]_4) over 1000 seeded degree-10 draws (seed 5), frozen
EQUIV_CONSTANTS = {1: 0.0037918615766124454, 2: 0.02281093788555828, 3: 0.14791261661560146}


def sym_weighted(ell, expr_fn, power):
    """Exact int_{-ell}^{ell} (ell^2-x^2)^power * expr_fn(x) dx via sympy at 40 digits."""
    x = sp.symbols("x")
    L = sp.Float(ell, 40)
    return float(sp.integrate(sp.expand((L**2 - x**2) ** power * expr_fn(x)), (x, -L, L)))


@pytest.fixture(scope="module")
def table(forms):
    return forms.table


def test_quadrature_basics(profile):
    r = build_quadrature(profile, 40)
    ell = profile.ell
    assert r.exact_degree == 79
    assert abs(r.weights.sum() - 2 * ell) < 1e-13 * ell
    assert abs(r.integrate((ell**2 - r.nodes**2) ** 2) / (16 * ell**5 / 15) - 1) < 1e-13
    assert np.all(np.abs(r.nodes) < ell) and np.all(r.weights > 0)


def test_quadrature_parity_and_mass(profile):
    r = build_quadrature(profile, 200)
    assert abs(r.integrate(r.nodes * profile(r.nodes))) < 1e-12
    masses = [build_quadrature(profile, n).integrate(profile(build_quadrature(profile, n).nodes)) for n in (100, 200, 400)]
    assert max(masses) - min(masses) < 1e-12
    assert abs(masses[1] - MASS_U0_1) < 1e-12


def test_quadrature_minimum_size():
    with pytest.raises(ConfigurationError):
        build_quadrature(3.0, 7)


def test_basis_derivatives_against_legendre_series():
    b = Basis(2.5, 40)
    x = np.linspace(-2.5, 2.5, 57)
    for d in range(0, 6):
        B = b.values(x, d)
        for i in (0, 3, 17, 39):
            c = np.zeros(i + 1)
            c[i] = b.scale()[i]
            ref = legendre.legval(x / 2.5, legendre.legder(c, d)) / 2.5**d if d else legendre.legval(x / 2.5, c)
            assert np.allclose(B[:, i], ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max() + 1e-300)


def test_basis_orthonormal():
    b = Basis(3.0, 30)
    r = build_quadrature(3.0, 40)
    B = b.values(r.nodes)
    assert np.allclose(B.T @ (r.weights[:, None] * B), np.eye(30), atol=1e-13)


def test_power_series_field(profile):
    b = Basis(profile.ell, 16)
    V = Field.from_power_series(b, [1.0, -2.0, 0.5, 0.25])
    x = np.linspace(-profile.ell, profile.ell, 9)
    assert np.allclose(V(x), 1 - 2 * x + 0.5 * x**2 + 0.25 * x**3, rtol=1e-13, atol=1e-13)
    assert np.allclose(V(x, 1), -2 + x + 0.75 * x**2, rtol=1e-12, atol=1e-12)
    with pytest.raises(ConfigurationError):
        Field.from_power_series(Basis(1.0, 2), [1, 2, 3])


def test_field_arithmetic_and_basis_mismatch():
    b = Basis(1.0, 5)
    V = Field(np.arange(5.0), b)
    assert np.array_equal((2 * V - V).coeffs, V.coeffs)
    with pytest.raises(ConfigurationError):
        V + Field(np.zeros(5), Basis(2.0, 5))
    with pytest.raises(ConfigurationError):
        Field(np.zeros(4), b)


def test_norm_examples(table, profile):
    ell = profile.ell
    b = table.basis
    assert norm_k(table, Field.zero(b), 3) == 0
    one = Field.constant(b)
    for k in (0, 1, 5, 12):
        assert norm_k(table, one, k) == pytest.approx(math.sqrt(16 * ell**5 / 15), rel=1e-13)
    x = Field.from_power_series(b, [0.0, 1.0])
    exact = math.sqrt(sym_weighted(ell, lambda s: s**2, 2) + sym_weighted(ell, lambda s: 1, 3))
    assert norm_k(table, x, 1) == pytest.approx(exact, rel=1e-12)


def test_norm_range_error(table):
    with pytest.raises(RangeError):
        norm_k(table, Field.zero(table.basis), table.k_max + 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_norm_is_cumulative(forms, seed, k):
    t = forms.table
    c = np.random.default_rng(seed).standard_normal(t.basis.dim)
    lhs = norm_k(t, c, k) ** 2
    rhs = norm_k(t, c, k - 1) ** 2 + seminorm_k(t, c, k) ** 2
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_matrices_symmetric_definite(table):
    for G in [table.M, table.A, *table.N]:
        assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(table.M).min() > 0
    assert np.linalg.eigvalsh(table.N[0]).min() > 0
    C = np.random.default_rng(0).standard_normal((table.basis.dim, 200))
    for G in [*table.S, *table.N]:
        ev = np.linalg.eigvalsh(G)
        assert ev.min() > -1e-14 * ev.max()
    for G in table.N:
        assert np.all(np.einsum("ij,ik,kj->j", C, G, C) > 0)
    lam = np.linalg.eigvals(np.linalg.solve(table.M, table.A - 0.2 * table.M)).real
    assert lam.min() > -1e-9


def test_build_norm_table_rejects_coarse_rule():
    with pytest.raises(ConfigurationError):
        build_norm_table(Basis(1.0, 40), build_quadrature(1.0, 20))


def test_hardy_examples(forms, profile):
    t, rule, ell = forms.table, forms.rule, profile.ell
    b = t.basis
    r = hardy_probe(t, rule, 0.0, Field.constant(b))
    assert r["lhs"] == pytest.approx(2 * ell, rel=1e-13)
    assert r["rhs_parts"][0] == pytest.approx(2 * ell, rel=1e-13)
    assert abs(r["rhs_parts"][1]) < 1e-20
    V = Field.from_power_series(b, [ell**2, 0.0, -1.0])
    r = hardy_probe(t, rule, 1.0, V)
    assert r["lhs"] == pytest.approx(sym_weighted(ell, lambda s: 1, 3), rel=1e-12)
    assert r["rhs_parts"][0] == pytest.approx(sym_weighted(ell, lambda s: 1, 2), rel=1e-12)
    assert r["rhs_parts"][1] == pytest.approx(sym_weighted(ell, lambda s: 4 * s**2, 3), rel=1e-12)


def test_hardy_negative_beta(forms, profile):
    t, rule, ell = forms.table, forms.rule, profile.ell
    b = t.basis
    with pytest.raises(PreconditionError):
        hardy_probe(t, rule, -1.5, Field.constant(b))
    V = Field.from_power_series(b, [ell**2, 0.0, -1.0])  # vanishes at the ends
    r = hardy_probe(t, rule, -1.5, V)
    assert np.isfinite(r["lhs"]) and r["lhs"] > 0


def test_hardy_constant_is_finite(forms, rng):
    t, rule = forms.table, forms.rule
    C = random_coeffs(t.basis, rng, 1000, 10)
    for beta in (0.0, 0.5, 1.0, 3.0):
        r = hardy_probe(t, rule, beta, C)
        ratio = r["lhs"] / (r["rhs_parts"][0] + r["rhs_parts"][1])
        assert np.all(np.isfinite(ratio)) and ratio.max() < 1e3


def test_interp_examples(forms, profile):
    t, ell = forms.table, profile.ell
    b = t.basis
    r = interp_probe(t, Field.constant(b, 3.0), 2, 1, 1)
    assert r["lhs"] == 0 <= r["rhs"]
    k = 3
    V = Field.from_power_series(b, [0.0] * k + [1.0])
    r = interp_probe(t, V, k, 1, 1)
    dk = math.factorial(k)
    exact_lhs = math.sqrt(sym_weighted(ell, lambda s: dk**2, k + 2))
    exact_km = math.sqrt(sym_weighted(ell, lambda s: (dk // 1 * s) ** 2, k + 1))
    assert r["lhs"] == pytest.approx(exact_lhs, rel=1e-12)
    assert r["rhs"] == pytest.approx(exact_km, rel=1e-12)  # [x^k]_{k+1} = 0
    with pytest.raises(RangeError):
        interp_probe(t, V, 1, 2, 0)
    with pytest.raises(RangeError):
        interp_probe(t, V, 10, 1, 5)
    with pytest.raises(RangeError):
        interp_probe(t, V, 2, 1, 1, eps=0.0)


def test_interp_eps_scaling(forms, rng):
    t = forms.table
    c = random_coeffs(t.basis, rng, 1, 10)[:, 0]
    r1 = interp_probe(t, c, 2, 1, 1, eps=1.0)
    r2 = interp_probe(t, c, 2, 1, 1, eps=0.5)
    assert r1["lhs"] == r2["lhs"]
    assert r2["rhs"] == pytest.approx(2 * seminorm_k(t, c, 1) + 0.5 * seminorm_k(t, c, 3), rel=1e-14)


def test_c0_examples(forms, profile):
    t, ell = forms.table, profile.ell
    b = t.basis
    r = c0_embed_probe(t, Field.constant(b), 2, 0)
    assert r["k"] == 0
    assert r["sup_weighted"] == pytest.approx(ell**4, rel=1e-13)
    r = c0_embed_probe(t, Field.from_power_series(b, [0.0, 1.0]), 1, 1)
    assert r["k"] == 4
    assert r["sup_weighted"] == pytest.approx(ell**2, rel=1e-13)
    with pytest.raises(RangeError):
        c0_embed_probe(t, Field.constant(b), 3, 0)


def test_equivalence_constants_frozen(forms):
    C = random_coeffs(forms.basis, np.random.default_rng(5), 1000, 10)
    for j, ref in EQUIV_CONSTANTS.items():
        assert equivalence_constant(forms.table, C, j, 4) == pytest.approx(ref, rel=1e-9)


def test_probe_constants_stable_under_refinement():
    from tfelab.acceptance import probe_constants

    a = probe_constants(32, 80, n_draws=200)
    b = probe_constants(64, 160, n_draws=200)
    for k in a:
        assert b[k] == pytest.approx(a[k], rel=0.05), k


def test_norm_U_positive(forms, rng):
    c = random_coeffs(forms.basis, rng, 50)
    assert np.all(norm_U(forms.table, c) > 0)
