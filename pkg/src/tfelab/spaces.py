"""Weighted integrals, the norm scale |.|_k, and probes of the embedding lemmas.

Trial space: polynomials of degree < dim on [-ell, ell], expanded in the
L^2(-ell, ell)-orthonormal Legendre basis

    phi_i(x) = sqrt((2i+1)/(2 ell)) P_i(x/ell).

Derivatives are evaluated through the Jacobi identity
d^k/dt^k P_n = (n+k)!/(2^k n!) P_{n-k}^{(k,k)}, which stays accurate for
high orders where differentiating the Legendre series would not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre
from scipy import special

from .errors import ConfigurationError, PreconditionError, RangeError


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    exact_degree: int
    ell: float

    def integrate(self, values):
        return float(np.dot(self.weights, values))


def build_quadrature(p, n):
    """n-point Gauss-Legendre rule on [-ell, ell]; ``p`` is a Profile or ell."""
    if n < 8:
        raise ConfigurationError(f"quadrature size n={n} is below the minimum of 8")
    ell = float(getattr(p, "ell", p))
    t, w = legendre.leggauss(int(n))
    return QuadratureRule(nodes=ell * t, weights=ell * w, exact_degree=2 * int(n) - 1, ell=ell)


@dataclass(frozen=True)
class Basis:
    ell: float
    dim: int

    def scale(self):
        i = np.arange(self.dim)
        return np.sqrt((2 * i + 1) / (2 * self.ell))

    def values(self, x, d=0):
        """Matrix B[q, i] = phi_i^(d)(x_q)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        t = x / self.ell
        i = np.arange(self.dim)
        if d == 0:
            P = special.eval_legendre(i[None, :], t[:, None])
        else:
            n = np.clip(i - d, 0, None)
            P = special.eval_jacobi(n[None, :], d, d, t[:, None]) * (special.poch(i + 1, d) / 2.0**d)[None, :]
            P[:, i < d] = 0.0
        return P * (self.scale() / self.ell**d)[None, :]

    def check(self, other):
        if self != other:
            raise ConfigurationError(f"basis mismatch: {self} vs {other}")


@dataclass(frozen=True, eq=False)
class Field:
    """A polynomial V = sum_i coeffs[i] phi_i on [-ell, ell]."""

    coeffs: np.ndarray
    basis: Basis

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.dim,):
            raise ConfigurationError(f"coefficient vector of shape {c.shape} for basis dim {self.basis.dim}")
        object.__setattr__(self, "coeffs", c)

    def __call__(self, x, d=0):
        xa = np.asarray(x, dtype=float)
        val = self.basis.values(np.atleast_1d(xa), d) @ self.coeffs
        return float(val[0]) if xa.ndim == 0 else val

    def __add__(self, other):
        self.basis.check(other.basis)
        return Field(self.coeffs + other.coeffs, self.basis)

    def __sub__(self, other):
        self.basis.check(other.basis)
        return Field(self.coeffs - other.coeffs, self.basis)

    def __mul__(self, a):
        return Field(float(a) * self.coeffs, self.basis)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(-self.coeffs, self.basis)

    @classmethod
    def zero(cls, basis):
        return cls(np.zeros(basis.dim), basis)

    @classmethod
    def constant(cls, basis, c=1.0):
        return cls.from_power_series(basis, [c])

    @classmethod
    def from_power_series(cls, basis, a):
        """V(x) = sum_k a[k] x^k (low degree; exact up to rounding)."""
        a = np.asarray(a, dtype=float)
        if a.size > basis.dim:
            raise ConfigurationError(f"degree {a.size - 1} does not fit in basis dim {basis.dim}")
        t_coeffs = a * basis.ell ** np.arange(a.size)
        c = legendre.poly2leg(t_coeffs)
        out = np.zeros(basis.dim)
        out[: c.size] = c / basis.scale()[: c.size]
        return cls(out, basis)

    @classmethod
    def project(cls, basis, f, n_quad=None):
        """L^2 projection of a callable f onto the trial space."""
        rule = build_quadrature(basis.ell, n_quad or max(2 * basis.dim, 16))
        B = basis.values(rule.nodes)
        return cls(B.T @ (rule.weights * f(rule.nodes)), basis)


def random_coeffs(basis, rng, n_draws, degree=None):
    """Standard-normal coefficients on the first degree+1 basis functions."""
    degree = basis.dim - 1 if degree is None else degree
    if degree >= basis.dim:
        raise ConfigurationError(f"degree {degree} does not fit in basis dim {basis.dim}")
    c = np.zeros((basis.dim, n_draws))
    c[: degree + 1] = rng.standard_normal((degree + 1, n_draws))
    return c


def required_degree(profile_degree, dim):
    """Polynomial degree of the integrands of M and A (Phi contains U^4)."""
    return max(4 * profile_degree + 2 * dim - 4, 2 * dim + 2)


def default_quadrature_size(profile_degree, dim):
    return required_degree(profile_degree, dim) // 2 + 1


@dataclass(eq=False)
class NormTable:
    """Gram matrices of the weighted norms for one basis and quadrature rule.

    |V|_k^2 = c^T N[k] c,  [V]_k^2 = c^T S[k] c,  |V|_U^2 = c^T M c,
    |V|_{U,2}^2 = c^T A c.
    """

    basis: Basis
    rule: QuadratureRule
    k_max: int
    S: list
    N: list
    M: np.ndarray | None = None
    A: np.ndarray | None = None
    B: list = field(default_factory=list, repr=False)
    U: np.ndarray | None = field(default=None, repr=False)
    Phi: np.ndarray | None = field(default=None, repr=False)

    @cached_property
    def grid(self):
        return np.linspace(-self.basis.ell, self.basis.ell, 2001)

    def grid_matrix(self, d):
        """Basis derivatives of order d on the dense grid (cached)."""
        cache = self.__dict__.setdefault("_grid_cache", {})
        if d not in cache:
            cache[d] = self.basis.values(self.grid, d)
        return cache[d]


def build_norm_table(basis, rule, k_max=12, profile=None):
    if rule.exact_degree < 2 * basis.dim + 2:
        raise ConfigurationError(
            f"rule exact to degree {rule.exact_degree}; norm integrands need {2 * basis.dim + 2}"
        )
    x, w = rule.nodes, rule.weights
    dist = basis.ell**2 - x**2
    B = [basis.values(x, d) for d in range(max(k_max, 4) + 1)]
    S = []
    for k in range(k_max + 1):
        S.append(_gram(B[k], w * dist ** (k + 2)))
    N = list(np.cumsum(S, axis=0))
    table = NormTable(basis=basis, rule=rule, k_max=k_max, S=S, N=N, B=B)
    if profile is not None:
        U = profile(x)
        Phi = profile.phi(x)
        table.U, table.Phi = U, Phi
        table.M = _gram(B[0], w * U)
        table.A = 0.2 * table.M + _gram(B[1], w * Phi) + _gram(B[2], w * U**2)
    return table


def _gram(Bd, wq):
    G = Bd.T @ (wq[:, None] * Bd)
    return 0.5 * (G + G.T)


def _quad_form(G, c):
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        return float(c @ G @ c)
    return np.einsum("ij,ik,kj->j", c, G, c)


def _coeffs(V):
    return V.coeffs if isinstance(V, Field) else np.asarray(V, dtype=float)


def _check_k(t, k):
    if not 0 <= k <= t.k_max:
        raise RangeError(f"k={k} outside 0..{t.k_max}")


def norm_k(t, V, k):
    _check_k(t, k)
    return np.sqrt(np.maximum(_quad_form(t.N[k], _coeffs(V)), 0.0))


def seminorm_k(t, V, k):
    _check_k(t, k)
    return np.sqrt(np.maximum(_quad_form(t.S[k], _coeffs(V)), 0.0))


def norm_U(t, V):
    return np.sqrt(np.maximum(_quad_form(t.M, _coeffs(V)), 0.0))


def norm_U2(t, V):
    return np.sqrt(np.maximum(_quad_form(t.A, _coeffs(V)), 0.0))


def inner_U(t, V, W):
    return float(_coeffs(V) @ t.M @ _coeffs(W))


# ---------------------------------------------------------------------------
# inequality probes


def hardy_probe(t, rule, beta, V, gamma=0.0):
    """Both sides of the boundary Hardy inequality.

    lhs = int (ell^2-x^2)^beta V^2, rhs_parts = (int (ell^2-x^2)^gamma V^2,
    int (ell^2-x^2)^(beta+2) V'^2).  Non-integer weights are sampled on
    the rule's nodes, so those integrals are approximate.
    """
    c = _coeffs(V)
    basis = t.basis
    x, w = rule.nodes, rule.weights
    if beta <= -1:
        ends = basis.values(np.array([-basis.ell, basis.ell])) @ c
        scale = np.max(np.abs(basis.values(x) @ c), axis=0) + 1e-300
        if np.any(np.abs(ends) > 1e-10 * scale):
            raise PreconditionError("beta <= -1 requires V = 0 at x = +-ell")
    dist = basis.ell**2 - x**2
    V0 = basis.values(x) @ c
    V1 = basis.values(x, 1) @ c

    def integral(weight, v):
        wq = w * weight
        return wq @ (v * v)

    lhs = integral(dist**beta, V0)
    rhs = (integral(dist**gamma, V0), integral(dist ** (beta + 2), V1))
    return {"lhs": lhs, "rhs_parts": rhs}


def interp_probe(t, V, k, m, n, eps=1.0):
    if not (k >= m >= 0 and n >= 0 and k + n <= t.k_max):
        raise RangeError(f"need k >= m >= 0, n >= 0, k+n <= {t.k_max}; got k={k}, m={m}, n={n}")
    if not 0 < eps <= 1:
        raise RangeError("eps must lie in (0, 1]")
    lhs = seminorm_k(t, V, k)
    rhs = seminorm_k(t, V, k - m) / eps + eps * seminorm_k(t, V, k + n)
    return {"lhs": lhs, "rhs": rhs}


def c0_embed_probe(t, V, n, d):
    """sup |(ell^2-x^2)^n d^dV| on a dense grid against |V|_k, k = 2d+4-2n."""
    k = 2 * d + 4 - 2 * n
    if not (n >= 0 and d >= 0 and 0 <= k <= t.k_max and d <= t.k_max):
        raise RangeError(f"k = 2d+4-2n = {k} outside 0..{t.k_max}")
    c = _coeffs(V)
    x = t.grid
    wgt = (t.basis.ell**2 - x**2) ** n
    vals = (t.grid_matrix(d) @ c) * (wgt[:, None] if c.ndim > 1 else wgt)
    sup = np.max(np.abs(vals), axis=0)
    return {"sup_weighted": sup, "bound": norm_k(t, c, k), "k": k}


def _ratio_sup(num, den):
    ok = den > 0
    return float(np.max(num[ok] / den[ok]))


def hardy_constant(t, rule, beta, coeffs):
    r = hardy_probe(t, rule, beta, coeffs)
    return _ratio_sup(r["lhs"], r["rhs_parts"][0] + r["rhs_parts"][1])


def interp_constant(t, coeffs, k, m, n, eps=1.0):
    r = interp_probe(t, coeffs, k, m, n, eps)
    return _ratio_sup(r["lhs"], r["rhs"])


def c0_constant(t, coeffs, n, d):
    r = c0_embed_probe(t, coeffs, n, d)
    return _ratio_sup(r["sup_weighted"], r["bound"])


def equivalence_constant(t, coeffs, j, k):
    """sup [V]_j / ([V]_0 + [V]_k) over the draws, 0 < j < k."""
    if not 0 < j < k <= t.k_max:
        raise RangeError("need 0 < j < k <= k_max")
    return _ratio_sup(seminorm_k(t, coeffs, j), seminorm_k(t, coeffs, 0) + seminorm_k(t, coeffs, k))
