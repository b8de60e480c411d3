"""Nonlinear evolution of the Lagrangian perturbation V = Z - x.

The energy gradient at Z = x + V is

    grad E[Z] = -D^3 Theta + Theta^2 D Theta + Z/5,   Theta = U b,  D = b d/dx,

with b = 1/(1 + V').  Every quantity is carried as (value at V = 0, increment),
with increments built from beta = b - 1 = -V' b, so differences such as
grad E[x+V] - grad E[x] and E[x+V] - E[x] carry no cancellation error even
when V is tiny.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import linalg

from . import jets
from .errors import ConfigurationError, PreconditionError, StateError
from .linear import LinearStepper, Trajectory, norms_over
from .spaces import Field, build_quadrature, random_coeffs

DEFAULT_MARGIN = 0.1
DEFAULT_GATE = 0.05


@dataclass(frozen=True)
class LagrangianState:
    V: Field
    s: float = 0.0

    def Z(self, x):
        return np.asarray(x) + self.V(x)

    def slope(self, x):
        """Z_x = 1 + V'."""
        return 1.0 + self.V(x, 1)

    def theta(self, p, x):
        return p(x) / self.slope(x)


class _Context:
    """Nodal data shared by every evaluation on one set of forms."""

    def __init__(self, forms):
        t = forms.table
        self.forms = forms
        self.table = t
        self.x = t.rule.nodes
        self.w = t.rule.weights
        self.B = t.B[:5]
        self.Uj = np.array(forms.profile.derivatives(self.x, 4))  # U .. U''''
        self.wU = self.w * self.Uj[0]
        self.ends = forms.basis.values(np.array([-forms.basis.ell, forms.basis.ell]))


def context(forms):
    ctx = forms.__dict__.get("_nonlinear_ctx")
    if ctx is None:
        ctx = _Context(forms)
        object.__setattr__(forms, "_nonlinear_ctx", ctx)
    return ctx


def min_slope(forms, c):
    """min of 1 + V' over the dense grid and the quadrature nodes."""
    t = forms.table
    g = t.grid_matrix(1) @ c
    q = t.B[1] @ c
    return float(1.0 + min(g.min(), q.min()))


def require_margin(forms, c, margin, s=None):
    m = min_slope(forms, c)
    if not m >= margin:  # also rejects NaN
        raise StateError(
            f"Lagrangian map lost monotonicity: min(1+V') = {m:.4g} < margin {margin:g}"
            + ("" if s is None else f" at s = {s:.6g}")
            + "; reduce h or the size of V0",
            margin=m,
            s=s,
        )
    return m


def _vjets(ctx, c):
    return np.array([B @ c for B in ctx.B])  # V, V', ..., V''''


def _beta(vj):
    vx = vj[1:]  # jet of V' to third order
    b = jets.recip(np.concatenate([[1.0 + vx[0]], vx[1:]]))
    return -jets.mul(vx, b)


def _D_increment(beta, f0, df):
    """Increment of D f = (1 + beta) (f0 + df)' over f0'."""
    return jets.diff(df) + jets.mul(beta, jets.diff(f0) + jets.diff(df))


def _gradient_increment(ctx, vj):
    """Nodal grad E[x+V] - grad E[x]."""
    U = ctx.Uj
    beta = _beta(vj)
    th0 = U[:4]
    th1 = jets.mul(th0, beta)
    g1 = _D_increment(beta, th0, th1)  # D Theta - U'
    h1 = _D_increment(beta, U[1:4], g1)  # D^2 Theta - U''
    k1 = _D_increment(beta, U[2:4], h1)  # D^3 Theta - U'''
    T0, T1 = U[0], th1[0]
    g0 = U[1]
    cubic = T0**2 * g1[0] + (2 * T0 * T1 + T1**2) * (g0 + g1[0])
    return -k1[0] + cubic + vj[0] / 5


def stationary_gradient(p, x):
    """grad E[x] = -U''' + U^2 U' + x/5, the profile's ODE residual."""
    U, U1, _, U3 = p.derivatives(x, 3)[:4]
    return -U3 + U**2 * U1 + np.asarray(x) / 5


def _L_pointwise_nodes(ctx, vj):
    U, U1, U2 = ctx.Uj[:3]
    return U * vj[4] + 4 * U1 * vj[3] + (6 * U2 - U**3) * vj[2] + 0.8 * ctx.x * vj[1] + 0.2 * vj[0]


def nonlinearity_nodes(forms, c, margin=DEFAULT_MARGIN):
    """N[V] = LV + grad E[x] - grad E[x+V] at the quadrature nodes."""
    ctx = context(forms)
    if margin is not None:
        require_margin(forms, c, margin)
    vj = _vjets(ctx, c)
    return _L_pointwise_nodes(ctx, vj) - _gradient_increment(ctx, vj)


def nonlinearity_load(forms, c, margin=DEFAULT_MARGIN):
    """U-weighted moments (phi_i, N[V])_U; the projection solves M n = load."""
    ctx = context(forms)
    return ctx.B[0].T @ (ctx.wU * nonlinearity_nodes(forms, c, margin))


def eval_nonlinearity(forms, V, margin=DEFAULT_MARGIN):
    """Projection of N[V] onto the trial space in the U-weighted least-squares sense."""
    forms.basis.check(V.basis)
    load = nonlinearity_load(forms, V.coeffs, margin)
    return Field(linalg.cho_solve(forms.chol_M, load), V.basis)


def nonlinearity_alternate_nodes(forms, c):
    """LV - grad E[x+V] with grad E[x] evaluated from the profile; equals N up to the ODE residual."""
    ctx = context(forms)
    vj = _vjets(ctx, c)
    return _L_pointwise_nodes(ctx, vj) - stationary_gradient(forms.profile, ctx.x) - _gradient_increment(ctx, vj)


def nonlinearity_series_nodes(forms, c, order=3):
    """Sum of the expansion of N[V] in powers of V' up to the given total order.

    Terms: (-1)^m V'^m1 d(V'^m2 d(V'^m3 d(V'^m4 U))) over m1+..+m4 = m, plus
    -(-1)^m U^2 V'^(m1+m2+m3) d(V'^m4 U) with four factors of b as well,
    for 2 <= m <= order.
    """
    if not 2 <= order <= 3:
        raise ConfigurationError("series cross-check supports order 2 or 3")
    ctx = context(forms)
    vj = _vjets(ctx, c)
    vx = vj[1:]
    U = ctx.Uj[:4]
    pw = [jets.power(vx, m) for m in range(order + 1)]
    total = np.zeros_like(ctx.x)
    for m in range(2, order + 1):
        sgn = (-1) ** m
        for m1, m2, m3, m4 in product(range(m + 1), repeat=4):
            if m1 + m2 + m3 + m4 != m:
                continue
            f = jets.mul(pw[m4], U)
            f = jets.mul(pw[m3], jets.diff(f))
            f = jets.mul(pw[m2], jets.diff(f))
            f = jets.mul(pw[m1], jets.diff(f))
            total += sgn * f[0]
            g = jets.mul(pw[m1 + m2 + m3], jets.diff(jets.mul(pw[m4], U)))
            total -= sgn * U[0] ** 2 * g[0]
    return total


# ---------------------------------------------------------------------------
# energy and its gradient


def _energy_weights(ctx):
    U = ctx.Uj
    return ctx.w * (0.5 * U[1] ** 2 + U[0] ** 4 / 12 + ctx.x**2 * U[0] / 10)


def stationary_energy(forms):
    """E[x] = int (U'^2/2 + U^4/12 + x^2 U/10)."""
    return float(np.sum(_energy_weights(context(forms))))


def energy_excess(forms, c, margin=DEFAULT_MARGIN):
    """E[x+V] - E[x], summed from increments that are each O(V)."""
    ctx = context(forms)
    if margin is not None:
        require_margin(forms, c, margin)
    vj = _vjets(ctx, c)
    U = ctx.Uj
    beta = _beta(vj)
    dth = jets.diff(jets.mul(U[:4], beta))[0]  # (U b)' - U'
    th1 = U[1] + dth
    e1 = 0.5 * (beta[0] * th1**2 + dth * (U[1] + th1))
    e2 = U[0] ** 4 * beta[0] * (3 + 3 * beta[0] + beta[0] ** 2) / 12
    e3 = (2 * ctx.x * vj[0] + vj[0] ** 2) * U[0] / 10
    return float(ctx.w @ (e1 + e2 + e3))


def energy(forms, V, margin=DEFAULT_MARGIN):
    """E[x+V] in the Lagrangian x-integral form."""
    return stationary_energy(forms) + energy_excess(forms, V.coeffs, margin)


def gradient_nodes(forms, c, margin=DEFAULT_MARGIN):
    ctx = context(forms)
    if margin is not None:
        require_margin(forms, c, margin)
    return stationary_gradient(forms.profile, ctx.x) + _gradient_increment(ctx, _vjets(ctx, c))


def gradient_pairing(forms, V, W, margin=DEFAULT_MARGIN):
    """(grad E[x+V], W)_U by U-weighted quadrature."""
    ctx = context(forms)
    return float(ctx.wU @ (gradient_nodes(forms, V.coeffs, margin) * (ctx.B[0] @ W.coeffs)))


def gradient_norm(forms, V, margin=DEFAULT_MARGIN):
    ctx = context(forms)
    g = gradient_nodes(forms, V.coeffs, margin)
    return float(np.sqrt(ctx.wU @ g**2))


def directional_fd(forms, V, W, eps, margin=DEFAULT_MARGIN):
    """Central difference of E along W."""
    cp = V.coeffs + eps * W.coeffs
    cm = V.coeffs - eps * W.coeffs
    return (energy_excess(forms, cp, margin) - energy_excess(forms, cm, margin)) / (2 * eps)


# ---------------------------------------------------------------------------
# time stepping


def step_nonlinear(st, state, margin=DEFAULT_MARGIN):
    """(V_j - V_{j-1})/h + L V_j = N[V_{j-1}], L implicit and N explicit."""
    f = st.forms
    c = state.V.coeffs
    load = nonlinearity_load(f, c, margin)
    new = st.solve(f.M @ c / st.h + load)
    s = state.s + st.h
    if margin is not None:
        require_margin(f, new, margin, s)
    return LagrangianState(Field(new, state.V.basis), s)


def translation_free_part(forms, c):
    """c minus its U-orthogonal projection onto the constants (N is blind to constants)."""
    one = Field.constant(forms.basis).coeffs
    Mone = forms.M @ one
    return c - (Mone @ c) / (Mone @ one) * one


def gate_norm(forms, c):
    """|V - P V|_6 with P the U-orthogonal projection onto constants."""
    return float(norms_over(forms.table, translation_free_part(forms, c)[:, None], 6)[0])


def evolve_nonlinear(forms, V0, h=0.01, S=30.0, margin=DEFAULT_MARGIN, gate=DEFAULT_GATE, ks=(2, 4, 6), s0=0.0):
    """Semi-implicit run; a margin violation truncates the trajectory and sets ``error``."""
    forms.basis.check(V0.basis)
    t = forms.table
    if gate is not None:
        n6 = gate_norm(forms, V0.coeffs)
        if n6 > gate:
            raise PreconditionError(
                f"|V0|_6 = {n6:.4g} (translation mode removed) exceeds the smallness gate {gate:g}"
            )
    require_margin(forms, V0.coeffs, margin, s0)
    n = math.ceil(S / h - 1e-9)
    st = LinearStepper(forms, h)
    ctx = context(forms)
    C = [V0.coeffs.copy()]
    Nn, Ee, mg = [], [], []
    error = None
    c = V0.coeffs
    for j in range(n + 1):
        mg.append(min_slope(forms, c))
        Ee.append(energy_excess(forms, c, None))
        load = nonlinearity_load(forms, c, None)
        Nn.append(math.sqrt(max(load @ linalg.cho_solve(forms.chol_M, load), 0.0)))
        if j == n:
            break
        c_new = st.solve(forms.M @ c / h + load)
        m_new = min_slope(forms, c_new)
        if not m_new >= margin:  # also catches a blow-up to NaN
            error = (
                f"margin violated at s = {s0 + (j + 1) * h:.6g}: min(1+V') = {m_new:.4g} < {margin:g}; "
                "trajectory truncated"
            )
            break
        c = c_new
        C.append(c)
    C = np.array(C)
    k = len(C)
    Ct = C.T
    d = {
        "norm_U": np.sqrt(np.einsum("ij,ik,kj->j", Ct, forms.M, Ct)),
    }
    for kk in ks:
        d[f"norm_{kk}"] = norms_over(t, Ct, kk)
    e0 = stationary_energy(forms)
    d["energy"] = e0 + np.array(Ee[:k])
    d["energy_excess"] = np.array(Ee[:k])
    d["norm_N"] = np.array(Nn[:k])
    d["margin"] = np.array(mg[:k])
    ends = ctx.ends @ Ct
    times = s0 + h * np.arange(k)
    grow = np.exp(times / 5)
    d["y_minus"] = grow * (-forms.basis.ell + ends[0])
    d["y_plus"] = grow * (forms.basis.ell + ends[1])
    rate = np.full(k, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(d["norm_U"])
        rate[1:] = -(lr[1:] - lr[:-1]) / h
    d["rate"] = rate
    return Trajectory(times=times, coeffs=C, basis=forms.basis, h=h, diagnostics=d, error=error)


NONLINEAR_CSV_COLUMNS = ["s", "norm_U", "norm_2", "norm_4", "norm_6", "energy", "norm_N", "margin"]


# ---------------------------------------------------------------------------
# physical variables


@dataclass
class PhysicalSnapshot:
    t: float
    s: float
    y: np.ndarray
    h: np.ndarray
    y_minus: float
    y_plus: float
    mass: float


def reconstruct_physical(p, state, n_samples=201, rule=None, margin=DEFAULT_MARGIN):
    """y = e^{s/5}(x + V), h = e^{-s/5} U/(1 + V') on n_samples Lagrangian points."""
    if n_samples < 2:
        raise ConfigurationError("need at least two samples")
    V, s = state.V, state.s
    ell = p.ell
    xs = np.linspace(-ell, ell, n_samples)
    rule = rule or build_quadrature(p, p.quad_hint)
    slope_s = 1.0 + V(xs, 1)
    slope_q = 1.0 + V(rule.nodes, 1)
    m = float(min(slope_s.min(), slope_q.min()))
    if margin is not None and not m >= margin:
        raise StateError(f"min(1+V') = {m:.4g} < margin {margin:g}", margin=m, s=s)
    g = math.exp(s / 5)
    y = g * (xs + V(xs))
    hv = p(xs) / slope_s / g
    # int h dy pulled back to the Lagrangian rule: h(y(x)) y'(x) dx
    mass = float(rule.weights @ ((p(rule.nodes) / slope_q / g) * (g * slope_q)))
    ends = V(np.array([-ell, ell]))
    return PhysicalSnapshot(
        t=math.expm1(s), s=s, y=y, h=hv, y_minus=g * (-ell + ends[0]), y_plus=g * (ell + ends[1]), mass=mass
    )


def snapshot_csv(snaps):
    buf = io.StringIO()
    buf.write("t,y,h\n")
    for sn in snaps:
        np.savetxt(buf, np.column_stack([np.full(sn.y.size, sn.t), sn.y, sn.h]), fmt="%.17g", delimiter=",")
    return buf.getvalue()


def front_table(traj):
    """Contact points and their velocities in physical time t = e^s - 1.

    Y_t = e^{-s} dY/ds, with dY/ds by second-order differences in s.
    """
    s = traj.times
    t = np.expm1(s)
    out = {"t": t}
    for key in ("y_minus", "y_plus"):
        Y = traj.diagnostics[key]
        Yt = np.gradient(Y, s) * np.exp(-s) if s.size > 1 else np.full(s.size, np.nan)
        out[f"v_{key[2:]}"] = Yt
        out[f"scaled_v_{key[2:]}"] = t**0.8 * Yt
        out[key] = Y
    return out


def fronts_csv(traj):
    ft = front_table(traj)
    cols = ["t", "y_minus", "y_plus", "v_minus", "v_plus", "scaled_v_minus", "scaled_v_plus"]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    np.savetxt(buf, np.column_stack([ft[c] for c in cols]), fmt="%.17g", delimiter=",")
    return buf.getvalue()


def late_front_speed(traj, decades=1.0):
    """Mean of t^{4/5} Y_t at both fronts over the last ``decades`` of t."""
    ft = front_table(traj)
    t = ft["t"]
    sel = t >= t[-1] / 10**decades
    sel[-1] = False  # one-sided difference at the end
    return float(np.mean(ft["scaled_v_minus"][sel])), float(np.mean(ft["scaled_v_plus"][sel]))


# ---------------------------------------------------------------------------
# empirical basin


def basin_probe(forms, direction, h=0.01, S=30.0, margin=DEFAULT_MARGIN, lo=0.0, hi=1.0, iters=12):
    """Largest |V0|_6 along a fixed direction for which the margin holds up to S (bisection)."""
    t = forms.table
    unit = direction.coeffs / norms_over(t, direction.coeffs[:, None], 6)[0]

    def survives(a):
        try:
            tr = evolve_nonlinear(forms, Field(a * unit, forms.basis), h=h, S=S, margin=margin, gate=None)
        except StateError:
            return False
        return tr.error is None

    if not survives(lo):
        return lo
    if survives(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if survives(mid) else (lo, mid)
    return lo


def scaled_random_field(forms, seed, norm6, degree=9):
    """Seeded random Field with prescribed |V|_6."""
    rng = np.random.default_rng(seed)
    c = random_coeffs(forms.basis, rng, 1, degree)[:, 0]
    c *= norm6 / norms_over(forms.table, c[:, None], 6)[0]
    return Field(c, forms.basis)
