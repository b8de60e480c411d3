"""The Hessian L of the energy at the self-similar state, in Galerkin form.

L is defined through its quadratic form (V, LW)_U = A(V, W),

    A(V, W) = 1/5 int U V W + int Phi V'W' + int U^2 V''W'',

so the discrete operator M^{-1} A is U-symmetric and coercive by
construction.  The strong fourth-order formula is kept for cross-checks.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import AssemblyError, ConfigurationError, DomainError, NumericalError
from .spaces import (
    Basis,
    Field,
    NormTable,
    build_norm_table,
    norm_k,
    required_degree,
)

# above this, the spectrum is computed in a diagonally rescaled basis
COND_REBASE = 1e12


@dataclass(frozen=True, eq=False)
class OperatorForms:
    M: np.ndarray
    A: np.ndarray
    basis_dim: int
    profile: object = field(repr=False)
    table: NormTable = field(repr=False)
    chol_M: tuple = field(repr=False)
    cond_M: float = 0.0

    @property
    def basis(self) -> Basis:
        return self.table.basis

    @property
    def rule(self):
        return self.table.rule

    def apply(self, c):
        """Coefficients of LV, i.e. M^{-1} A c (c may be a matrix of columns)."""
        return linalg.cho_solve(self.chol_M, self.A @ np.asarray(c, dtype=float))

    def L(self, V: Field) -> Field:
        self.basis.check(V.basis)
        return Field(self.apply(V.coeffs), V.basis)

    def field(self, c) -> Field:
        return Field(c, self.basis)


def assemble_forms(p, rule, basis_dim, k_max=12, strict=True):
    """Mass matrix M and form matrix A on the first basis_dim Legendre modes.

    With ``strict`` the rule must integrate every entry exactly (Phi carries
    U^4); otherwise only positive definiteness of M is checked.
    """
    if basis_dim < 2:
        raise ConfigurationError("basis_dim must be at least 2")
    need = required_degree(p.degree, basis_dim)
    if strict and rule.exact_degree < need:
        raise ConfigurationError(
            f"quadrature exact to degree {rule.exact_degree}, forms need {need} "
            f"(use n >= {need // 2 + 1})"
        )
    table = build_norm_table(Basis(p.ell, basis_dim), rule, k_max=k_max, profile=p)
    try:
        chol = linalg.cho_factor(table.M)
    except linalg.LinAlgError as exc:
        raise AssemblyError(f"mass matrix is not positive definite ({exc}); refine the quadrature") from exc
    cond = float(np.linalg.cond(table.M))
    return OperatorForms(M=table.M, A=table.A, basis_dim=basis_dim, profile=p, table=table, chol_M=chol, cond_M=cond)


def apply_L_pointwise(p, V, x):
    """U V'''' + 4U'V''' + (6U'' - U^3)V'' + (4/5) x V' + V/5 at x."""
    xa = np.asarray(x, dtype=float)
    xs = np.atleast_1d(xa)
    if np.any(np.abs(xs) > p.ell * (1 + 1e-14)):
        raise DomainError(f"x outside [-ell, ell] with ell = {p.ell}")
    U, U1, U2 = p.derivatives(xs, 2)[:3]
    v = [V(xs, d) for d in range(5)]
    out = U * v[4] + 4 * U1 * v[3] + (6 * U2 - U**3) * v[2] + 0.8 * xs * v[1] + 0.2 * v[0]
    return float(out[0]) if xa.ndim == 0 else out


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray
    vectors: np.ndarray  # columns, M-orthonormal
    residuals: np.ndarray  # |Av - lam Mv| / |Av|
    basis: Basis
    cond_M: float
    rebased: bool

    @property
    def eigenfields(self):
        return [Field(self.vectors[:, j], self.basis) for j in range(self.vectors.shape[1])]

    def find(self, value):
        """Ordinal position of the eigenvalue closest to ``value``."""
        return int(np.argmin(np.abs(self.eigenvalues - value)))

    def to_csv(self):
        buf = io.StringIO()
        buf.write("index,eigenvalue,residual\n")
        for j, (lam, r) in enumerate(zip(self.eigenvalues, self.residuals)):
            buf.write(f"{j},{lam:.17g},{r:.17g}\n")
        return buf.getvalue()


def compute_spectrum(f, m=None):
    """The m smallest eigenpairs of A v = lam M v."""
    n = f.basis_dim
    m = n if m is None else m
    if not 1 <= m <= n:
        raise ConfigurationError(f"m={m} outside 1..{n}")
    A, M = f.A, f.M
    rebased = f.cond_M > COND_REBASE
    if rebased:
        d = 1.0 / np.sqrt(np.diag(M))
        A, M = d[:, None] * A * d, d[:, None] * M * d
    try:
        lam, vec = linalg.eigh(A, M, subset_by_index=[0, m - 1])
    except linalg.LinAlgError as exc:
        raise NumericalError(f"generalized eigensolve failed (cond(M) = {f.cond_M:.3e}): {exc}") from exc
    if rebased:
        vec = d[:, None] * vec
    # Rayleigh quotients are second-order accurate in the vector error
    Av = f.A @ vec
    Mv = f.M @ vec
    mnorm = np.sqrt(np.einsum("ij,ij->j", vec, Mv))
    vec, Av, Mv = vec / mnorm, Av / mnorm, Mv / mnorm
    lam = np.einsum("ij,ij->j", vec, Av)
    res = np.linalg.norm(Av - Mv * lam, axis=0) / np.linalg.norm(Av, axis=0)
    order = np.argsort(lam)
    return SpectrumResult(lam[order], vec[:, order], res[order], f.basis, f.cond_M, rebased)


def rayleigh_quotients(f, coeffs):
    c = np.asarray(coeffs, dtype=float)
    return np.einsum("ij,ik,kj->j", c, f.A, c) / np.einsum("ij,ik,kj->j", c, f.M, c)


def elliptic_equiv_probe(f, t, V, k):
    """Range of |LV|_k / |V|_{k+4} over V (a Field or a matrix of coefficient columns)."""
    if k < 0 or k + 4 > t.k_max:
        raise ConfigurationError(f"need 0 <= k and k + 4 <= k_max = {t.k_max}")
    c = V.coeffs if isinstance(V, Field) else np.asarray(V, dtype=float)
    den = np.atleast_1d(norm_k(t, c, k + 4))
    if np.any(den == 0):
        raise DomainError("ratio undefined for V = 0")
    r = np.atleast_1d(norm_k(t, f.apply(c), k)) / den
    return {"ratio_lo": float(r.min()), "ratio_hi": float(r.max())}


def dump_matrix(path, mat):
    np.savetxt(path, mat, fmt="%.17g")
