import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from tfelab import jets
from tfelab.errors import ConfigurationError, PreconditionError, StateError
from tfelab.linear import LinearStepper, fit_decay_rate
from tfelab.nonlinear import (
    LagrangianState,
    context,
    directional_fd,
    energy,
    energy_excess,
    eval_nonlinearity,
    evolve_nonlinear,
    front_table,
    gate_norm,
    gradient_nodes,
    gradient_pairing,
    min_slope,
    nonlinearity_alternate_nodes,
    nonlinearity_nodes,
    nonlinearity_series_nodes,
    reconstruct_physical,
    require_margin,
    scaled_random_field,
    snapshot_csv,
    stationary_energy,
    step_nonlinear,
    translation_free_part,
)
from tfelab.spaces import Field, inner_U, norm_U, random_coeffs

ENERGY_X = 1.3624400343026  # frozen from the profile integral oracle
MASS = 4.0897488468909


def poly(f, a):
    return Field.from_power_series(f.basis, a)


def small_field(f, seed, size=1e-3, degree=8):
    c = random_coeffs(f.basis, np.random.default_rng(seed), 1, degree)[:, 0]
    cx = f.table.B[1] @ c
    return Field(c * size / np.max(np.abs(cx)), f.basis)


def test_zero_and_constants_are_exact(forms):
    assert np.all(nonlinearity_nodes(forms, np.zeros(forms.basis_dim)) == 0.0)
    for c in (1e-6, 0.3, -2.0):
        N = nonlinearity_nodes(forms, Field.constant(forms.basis, c).coeffs)
        assert np.max(np.abs(N)) < 1e-14


def test_dilation_closed_form(forms):
    x = context(forms).x
    for eps in (1e-4, 1e-2, 0.2, -0.3):
        N = nonlinearity_nodes(forms, poly(forms, [0.0, eps]).coeffs)
        exact = ((1 + eps) ** -4 - 1 + 4 * eps) * x / 5
        assert np.max(np.abs(N - exact)) <= 1e-11 * max(eps**2, 1e-16) + 1e-15
    t = forms.table
    xf = poly(forms, [0.0, 1.0])
    eps = 1e-5
    ratio = norm_U(t, eval_nonlinearity(forms, xf * eps)) / eps**2
    assert ratio == pytest.approx(2 * norm_U(t, xf), rel=1e-4)


def test_quadratic_smallness(forms):
    t = forms.table
    V = small_field(forms, 2, 1.0)
    r = [norm_U(t, eval_nonlinearity(forms, V * a)) / a**2 for a in (1e-2, 1e-3, 1e-4)]
    assert r[1] == pytest.approx(r[2], rel=2e-3)
    assert abs(r[0] / r[2] - 1) < 0.05


def test_forms_agree(forms):
    c = small_field(forms, 7, 0.05).coeffs
    a = nonlinearity_nodes(forms, c)
    b = nonlinearity_alternate_nodes(forms, c)
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a)) + 1e-12


def test_series_expansion(forms):
    base = small_field(forms, 11, 1.0).coeffs
    errs = []
    for a in (2e-2, 1e-2, 5e-3):
        c = a * base
        full = nonlinearity_nodes(forms, c)
        errs.append(np.max(np.abs(full - nonlinearity_series_nodes(forms, c, 3))))
        e2 = np.max(np.abs(full - nonlinearity_series_nodes(forms, c, 2)))
        assert errs[-1] < e2
    # remainder after the cubic order is quartic in the amplitude
    assert math.log2(errs[0] / errs[1]) == pytest.approx(4, abs=0.3)
    assert math.log2(errs[1] / errs[2]) == pytest.approx(4, abs=0.3)
    with pytest.raises(ConfigurationError):
        nonlinearity_series_nodes(forms, base, 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_translation_invariance(forms, seed, shift):
    c = small_field(forms, seed, 0.1).coeffs
    one = Field.constant(forms.basis).coeffs
    a = nonlinearity_nodes(forms, c)
    b = nonlinearity_nodes(forms, c + shift * one)
    assert np.max(np.abs(a - b)) <= 1e-10 * (np.max(np.abs(a)) + 1e-12)
    assert gate_norm(forms, c) == pytest.approx(gate_norm(forms, c + shift * one), rel=1e-9, abs=1e-14)


def test_translation_free_part_is_orthogonal(forms):
    c = small_field(forms, 3).coeffs + 0.7 * Field.constant(forms.basis).coeffs
    r = translation_free_part(forms, c)
    one = Field.constant(forms.basis)
    assert abs(inner_U(forms.table, Field(r, forms.basis), one)) < 1e-14


def test_energy_examples(forms):
    assert stationary_energy(forms) == pytest.approx(ENERGY_X, abs=2e-11)
    assert energy(forms, Field.zero(forms.basis)) == pytest.approx(ENERGY_X, abs=2e-11)
    assert energy_excess(forms, np.zeros(forms.basis_dim)) == 0.0
    for c in (1e-4, 0.5, -3.0):
        de = energy_excess(forms, Field.constant(forms.basis, c).coeffs)
        assert de == pytest.approx(c**2 * MASS / 10, rel=1e-10)


def test_stationary_point(forms):
    # grad E[x] vanishes (the profile equation), and E is second order at x
    assert np.max(np.abs(gradient_nodes(forms, np.zeros(forms.basis_dim)))) < 1e-9
    V = small_field(forms, 5, 1.0)
    r = [energy_excess(forms, (V * a).coeffs) / a**2 for a in (1e-3, 1e-4)]
    assert r[0] == pytest.approx(r[1], rel=1e-2)
    assert r[1] > 0


def test_gradient_pairing_on_constants(forms, rng):
    t = forms.table
    W = Field(random_coeffs(forms.basis, rng, 1, 10)[:, 0], forms.basis)
    for c in (0.1, -2.0):
        g = gradient_pairing(forms, Field.constant(forms.basis, c), W)
        assert g == pytest.approx(c / 5 * inner_U(t, Field.constant(forms.basis), W), rel=1e-8, abs=1e-10)


def test_fd_gradient(forms):
    V = small_field(forms, 9, 0.5)
    W = small_field(forms, 10, 50.0)
    g = gradient_pairing(forms, V, W)
    errs = [abs(directional_fd(forms, V, W, e) - g) for e in (1e-3, 5e-4)]
    assert math.log2(errs[0] / errs[1]) == pytest.approx(2, abs=0.1)


def test_margin_checks(forms):
    c = poly(forms, [0.0, -0.95]).coeffs
    assert min_slope(forms, c) == pytest.approx(0.05, abs=1e-12)
    with pytest.raises(StateError) as ei:
        require_margin(forms, c, 0.1, s=2.0)
    assert ei.value.margin == pytest.approx(0.05) and ei.value.s == 2.0
    nan = np.full(forms.basis_dim, np.nan)
    with pytest.raises(StateError):
        require_margin(forms, nan, 0.1)


def test_step_examples(forms):
    h = 0.1
    st_ = LinearStepper(forms, h)
    out = step_nonlinear(st_, LagrangianState(Field.constant(forms.basis, 0.4), 1.0))
    assert out.s == pytest.approx(1.1)
    assert np.allclose(out.V.coeffs, Field.constant(forms.basis, 0.4 / (1 + h / 5)).coeffs, atol=1e-13)
    out = step_nonlinear(st_, LagrangianState(Field.zero(forms.basis)))
    assert np.all(out.V.coeffs == 0.0)


def test_gate_and_truncation(forms):
    with pytest.raises(PreconditionError):
        evolve_nonlinear(forms, scaled_random_field(forms, 1, 0.2), S=1.0)
    tr = evolve_nonlinear(forms, Field.constant(forms.basis, 0.01), h=0.1, S=1.0)
    assert tr.error is None and len(tr) == 11
    with pytest.raises(StateError):
        evolve_nonlinear(forms, scaled_random_field(forms, 1, 1e6), S=1.0, gate=None)
    tr = evolve_nonlinear(forms, scaled_random_field(forms, 1, 3e5), S=3.0, gate=None)
    assert tr.error is not None and "truncated" in tr.error and len(tr) == 1


def test_small_run(forms):
    V0 = scaled_random_field(forms, 2, 0.01)
    tr = evolve_nonlinear(forms, V0, h=0.02, S=30.0)
    d = tr.diagnostics
    assert tr.error is None
    assert np.all(np.diff(d["energy_excess"]) <= 1e-18)
    assert abs(fit_decay_rate(tr).rate - 0.2) < 0.004
    assert np.all(d["margin"] > 0.9)
    ft = front_table(tr)
    assert ft["t"][0] == 0.0 and np.all(np.isfinite(ft["scaled_v_plus"]))


def test_reconstruct_examples(profile, forms):
    b = forms.basis
    sn = reconstruct_physical(profile, LagrangianState(Field.zero(b), 0.0), 11, forms.rule)
    xs = np.linspace(-profile.ell, profile.ell, 11)
    assert np.allclose(sn.y, xs) and np.allclose(sn.h, profile(xs)) and sn.t == 0.0
    s = 5 * math.log(2)
    sn = reconstruct_physical(profile, LagrangianState(Field.zero(b), s), 21, forms.rule)
    assert sn.t == pytest.approx(2 ** 5 - 1)
    assert np.allclose(sn.h, 0.5 * profile(sn.y / 2), atol=1e-14)
    assert sn.y_minus == pytest.approx(-2 * profile.ell) and sn.y_plus == pytest.approx(2 * profile.ell)
    assert sn.mass == pytest.approx(MASS, rel=1e-11)
    with pytest.raises(StateError):
        reconstruct_physical(profile, LagrangianState(poly(forms, [0.0, -0.95])), 11, forms.rule)
    with pytest.raises(ConfigurationError):
        reconstruct_physical(profile, LagrangianState(Field.zero(b)), 1, forms.rule)
    text = snapshot_csv([sn])
    assert text.startswith("t,y,h\n") and len(text.splitlines()) == 22


def test_mass_conserved_under_perturbation(profile, forms):
    V = small_field(forms, 4, 0.2)
    sn = reconstruct_physical(profile, LagrangianState(V, 3.0), 51, forms.rule)
    assert sn.mass == pytest.approx(MASS, rel=1e-11)
    assert np.all(np.diff(sn.y) > 0)


def test_local_lipschitz(forms):
    t = forms.table
    V = small_field(forms, 12, 1.0)
    W = small_field(forms, 13, 1.0)
    q = []
    for a in (1e-2, 1e-3):
        dN = eval_nonlinearity(forms, V * a) - eval_nonlinearity(forms, W * a)
        q.append(norm_U(t, dN) / (a * norm_U(t, (V - W) * a)))
    # the Lipschitz constant of N shrinks linearly with the size of the data
    assert q[0] / q[1] == pytest.approx(1.0, rel=0.05)


# --------------------------------------------------------------------------- jets

X = sp.symbols("x")


def jet_of(expr, xs, order):
    return np.array([[float(sp.diff(expr, X, d).subs(X, v)) for v in xs] for d in range(order + 1)])


def test_jets_against_sympy():
    xs = [-0.7, 0.1, 0.9]
    f = 1 + X / 3 + X**3
    g = sp.exp(X / 2)
    F, G = jet_of(f, xs, 4), jet_of(g, xs, 4)
    assert np.allclose(jets.mul(F, G), jet_of(f * g, xs, 4), rtol=1e-12)
    assert np.allclose(jets.recip(F), jet_of(1 / f, xs, 4), rtol=1e-10)
    assert np.allclose(jets.power(F, 3), jet_of(f**3, xs, 4), rtol=1e-12)
    assert np.allclose(jets.diff(F), jet_of(sp.diff(f, X), xs, 3))
    assert jets.mul(F, G[:2]).shape == (2, 3)
