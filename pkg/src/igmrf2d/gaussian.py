"""Canonical-form Gaussians N_C(b, Q), possibly rank deficient, under linear constraints.

Two sampling routes are provided and must agree:

* generalized inverse: expand in the eigenbasis of Q and give zero-eigenvalue
  directions a zero coefficient (``sample_canonical``), then correct the
  remaining constraints by kriging (``condition_on_constraints``);
* subspace: parameterize ``{x : Ax = e}`` with an orthonormal basis of the
  null space of A and sample the reduced, full-rank Gaussian there
  (``sample_constrained``).

Constrained log densities are always taken with respect to Lebesgue measure
in orthonormal coordinates of the constraint subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import (
    ConstraintDegeneracyError,
    ImproperDistributionError,
    ValidationError,
)
from .gmrf import NULL_TOL

LOG_2PI = np.log(2.0 * np.pi)


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or a SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(n)]


@dataclass(frozen=True, eq=False)
class CanonicalGaussian:
    """Gaussian with density proportional to exp(-x'Qx/2 + b'x)."""

    b: np.ndarray
    Q: np.ndarray
    tol: float = NULL_TOL
    check_range: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        Q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Q", Q)
        if Q.shape != (b.size, b.size):
            raise ValidationError(f"b has length {b.size} but Q has shape {Q.shape}")
        scale = max(np.abs(Q).max(), 1.0) if Q.size else 1.0
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * scale):
            raise ValidationError("Q is not symmetric")
        w, _ = self.eigen
        if w.size and w[0] < -self.tol * max(abs(w[-1]), 1.0) * 10:
            raise ValidationError(f"Q is not positive semidefinite (min eigenvalue {w[0]:.3g})")
        if self.check_range and self.rank_deficiency:
            N = self.null_basis
            leak = np.abs(N.T @ b).max()
            if leak > 1e-8 * max(np.abs(b).max(), 1.0):
                raise ImproperDistributionError(
                    f"b has a component of size {leak:.3g} along the null space of Q")

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        if "eigen" not in self._cache:
            Q = 0.5 * (self.Q + self.Q.T)
            self._cache["eigen"] = np.linalg.eigh(Q)
        return self._cache["eigen"]

    @property
    def _zero_mask(self) -> np.ndarray:
        w, _ = self.eigen
        scale = np.max(np.abs(w)) if w.size else 0.0
        return np.abs(w) < self.tol * max(scale, 1e-300)

    @property
    def rank_deficiency(self) -> int:
        return int(self._zero_mask.sum())

    @property
    def null_basis(self) -> np.ndarray:
        _, V = self.eigen
        return V[:, self._zero_mask]

    @property
    def range_basis(self) -> np.ndarray:
        _, V = self.eigen
        return V[:, ~self._zero_mask]

    @cached_property
    def pinv(self) -> np.ndarray:
        """Generalized inverse with zero-eigenvalue directions sent to infinity."""
        w, V = self.eigen
        keep = ~self._zero_mask
        Vk = V[:, keep]
        return (Vk / w[keep]) @ Vk.T

    @cached_property
    def mean(self) -> np.ndarray:
        return self.pinv @ self.b


@dataclass(frozen=True, eq=False)
class LinearConstraint:
    """Hard constraint A x = e with A of full row rank."""

    A: np.ndarray
    e: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        e = np.zeros(A.shape[0]) if self.e is None else np.asarray(self.e, dtype=float).reshape(-1)
        if e.size != A.shape[0]:
            raise ValidationError(f"A has {A.shape[0]} rows but e has length {e.size}")
        if A.shape[0] > A.shape[1] or np.linalg.matrix_rank(A) < A.shape[0]:
            raise ValidationError("constraint matrix must have full row rank k <= n")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "e", e)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @cached_property
    def null_basis(self) -> np.ndarray:
        """Orthonormal n x (n-k) basis of {x : Ax = 0}."""
        return sla.null_space(self.A)

    @cached_property
    def particular(self) -> np.ndarray:
        """Minimum-norm solution of A x = e."""
        return np.linalg.lstsq(self.A, self.e, rcond=None)[0]

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.e


def sample_canonical(g: CanonicalGaussian, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(Q^- b, Q^-), zero coefficients along null eigenvectors of Q."""
    w, V = g.eigen
    keep = ~g._zero_mask
    coef = np.zeros(g.dim)
    mu_coef = (V[:, keep].T @ g.b) / w[keep]
    coef[keep] = mu_coef + rng.standard_normal(keep.sum()) / np.sqrt(w[keep])
    return V @ coef


def condition_on_constraints(x: np.ndarray, g: CanonicalGaussian,
                             c: LinearConstraint) -> np.ndarray:
    """Kriging correction x - Q^- A'(A Q^- A')^{-1}(Ax - e)."""
    x = np.asarray(x, dtype=float)
    W = g.pinv @ c.A.T
    S = c.A @ W
    s = np.linalg.svd(S, compute_uv=False)
    w, _ = g.eigen
    keep = ~g._zero_mask
    scale = np.linalg.norm(c.A, 2) ** 2 / w[keep].min() if keep.any() else 0.0
    if s.size and s[-1] <= 1e-10 * max(scale, 1e-300):
        raise ConstraintDegeneracyError(
            "A Q^- A' is singular; a constraint lies in the null space of Q")
    return x - W @ np.linalg.solve(S, c.residual(x))


def effective_constraint(g: CanonicalGaussian, c: LinearConstraint) -> LinearConstraint | None:
    """Constraint rows left to impose once the null space of Q has been zeroed.

    Requires null(Q) to lie inside the row space of A, so that zeroing those
    eigen-coefficients is itself part of the constraint.  Returns None when
    nothing is left.
    """
    N = g.null_basis
    if N.shape[1]:
        inside = np.linalg.lstsq(c.A.T, N, rcond=None)[0]
        if np.abs(c.A.T @ inside - N).max() > 1e-8:
            raise ConstraintDegeneracyError(
                "null space of Q is not spanned by the constraint rows")
        if np.abs(c.e).max() > 0:
            raise ValidationError("generalized-inverse route needs e = 0")
    R = g.range_basis
    AR = c.A @ R @ R.T
    U, s, Vt = np.linalg.svd(AR, full_matrices=False)
    k = int(np.sum(s > 1e-10 * max(s[0] if s.size else 0.0, 1e-300)))
    if k == 0:
        return None
    return LinearConstraint(Vt[:k])


def sample_generalized_route(g: CanonicalGaussian, c: LinearConstraint,
                             rng: np.random.Generator) -> np.ndarray:
    """Zero null eigen-directions, then krige whatever constraints remain."""
    x = sample_canonical(g, rng)
    rest = effective_constraint(g, c)
    if rest is None:
        return x
    return condition_on_constraints(x, g, rest)


def reduced(g: CanonicalGaussian, c: LinearConstraint) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(B, Q_z, b_z): x = x0 + B z with z ~ N_C(b_z, Q_z)."""
    B = c.null_basis
    x0 = c.particular
    Qz = B.T @ g.Q @ B
    bz = B.T @ (g.b - g.Q @ x0)
    return B, 0.5 * (Qz + Qz.T), bz


def _cholesky(Q: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise ImproperDistributionError(
            "precision is not positive definite on the constraint subspace") from exc


def sample_constrained(g: CanonicalGaussian, c: LinearConstraint,
                       rng: np.random.Generator) -> np.ndarray:
    """Exact draw from g restricted to {Ax = e} via the null-space basis of A."""
    B, Qz, bz = reduced(g, c)
    if B.shape[1] == 0:
        return c.particular.copy()
    L = _cholesky(Qz)
    mu = sla.cho_solve((L, True), bz)
    z = mu + sla.solve_triangular(L.T, rng.standard_normal(mu.size), lower=False)
    return c.particular + B @ z


def logdens_constrained(x: np.ndarray, g: CanonicalGaussian,
                        c: LinearConstraint | None = None) -> float:
    """Log density of g (restricted to {Ax = e} when ``c`` is given) at x."""
    x = np.asarray(x, dtype=float)
    if c is None:
        if g.rank_deficiency:
            raise ImproperDistributionError("rank-deficient Q needs a constraint")
        L = _cholesky(g.Q)
        mu = sla.cho_solve((L, True), g.b)
        d = x - mu
        return float(-0.5 * g.dim * LOG_2PI + np.log(np.diag(L)).sum() - 0.5 * d @ g.Q @ d)
    viol = np.abs(c.residual(x)).max() if c.k else 0.0
    if viol > 1e-8 * max(1.0, np.abs(x).max()):
        raise ValidationError(f"x violates the constraint by {viol:.3g}")
    B, Qz, bz = reduced(g, c)
    m = B.shape[1]
    if m == 0:
        return 0.0
    L = _cholesky(Qz)
    mu = sla.cho_solve((L, True), bz)
    d = B.T @ (x - c.particular) - mu
    return float(-0.5 * m * LOG_2PI + np.log(np.diag(L)).sum() - 0.5 * d @ Qz @ d)
