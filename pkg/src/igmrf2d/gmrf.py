"""Structure matrices for first/second-order intrinsic GMRFs on a T x T year grid.

All builders return exact integer entries; the precision multiplier lambda is
kept separate (see :class:`PrecisionSpec`).  Cells are flattened row-major
with axis 1 = DBP year ``i`` and axis 2 = SBP year ``j``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InvalidDimensionError, InvalidIndexError, ValidationError

#: relative eigenvalue threshold below which an eigenvalue counts as zero
NULL_TOL = 1e-9

#: grids larger than this many years per axis are stored sparse
DENSE_MAX_T = 16

# offsets of the 13-point second-order stencil, center included
STENCIL_OFFSETS = (
    (0, 0),
    (-1, 0), (1, 0), (0, -1), (0, 1),
    (-1, -1), (-1, 1), (1, -1), (1, 1),
    (-2, 0), (2, 0), (0, -2), (0, 2),
)


class StructureKind(str, Enum):
    RW1_1D = "RW1-1D"
    RW2_1D = "RW2-1D"
    TORUS_C = "Torus-C"
    TORUS_2D = "Torus-2D"
    BOUNDARY_2D = "Boundary-2D"
    THIN_PLATE_2D = "ThinPlate-2D"
    OTHER = "other"


@dataclass(frozen=True)
class GridSpec:
    """T x T lattice of (DBP year, SBP year) combinations."""

    T: int

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise InvalidDimensionError(f"grid needs T >= 2, got {self.T}")

    @property
    def n_cells(self) -> int:
        return self.T * self.T

    def flat_index(self, i: int, j: int) -> int:
        """1-based cell (i, j) -> 1-based flat index ``(i-1)*T + j``."""
        if not (1 <= i <= self.T and 1 <= j <= self.T):
            raise InvalidIndexError(f"cell ({i}, {j}) outside 1..{self.T}")
        return (i - 1) * self.T + j

    def cell(self, k: int) -> tuple[int, int]:
        if not 1 <= k <= self.n_cells:
            raise InvalidIndexError(f"flat index {k} outside 1..{self.n_cells}")
        return (k - 1) // self.T + 1, (k - 1) % self.T + 1

    def diagonal_flat(self) -> np.ndarray:
        """0-based flat positions of the diagonal cells (t, t), t = 1..T."""
        t = np.arange(self.T)
        return t * self.T + t

    def centered_ramps(self) -> tuple[np.ndarray, np.ndarray]:
        """Centered DBP-year and SBP-year index vectors over all cells."""
        idx = np.arange(1, self.T + 1) - (self.T + 1) / 2.0
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        return ii.ravel(), jj.ravel()


@dataclass(frozen=True, eq=False)
class StructureMatrix:
    """Symmetric integer structure matrix with a lazily cached eigenbasis.

    ``null_dim`` is measured from the eigenvalues, never assumed from ``kind``.
    """

    entries: np.ndarray | sp.csr_matrix
    kind: StructureKind = StructureKind.OTHER
    tol: float = NULL_TOL
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def dense(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return np.asarray(self.entries)

    @property
    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        """(eigenvalues ascending, orthonormal eigenvectors as columns)."""
        with self._lock:
            if "eigen" not in self._cache:
                w, V = np.linalg.eigh(self.dense().astype(float))
                self._cache["eigen"] = (w, V)
            return self._cache["eigen"]

    @property
    def null_dim(self) -> int:
        w, _ = self.eigen
        scale = np.max(np.abs(w)) if w.size else 0.0
        return int(np.sum(np.abs(w) < self.tol * max(scale, 1e-300)))

    @property
    def null_space(self) -> np.ndarray:
        _, V = self.eigen
        return V[:, : self.null_dim]

    @property
    def rank(self) -> int:
        return self.dim - self.null_dim

    def __matmul__(self, other):
        return self.entries @ other


@dataclass(frozen=True)
class PrecisionSpec:
    structure: StructureMatrix
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError(f"precision multiplier must be positive, got {self.lam}")

    def matrix(self) -> np.ndarray:
        return self.lam * self.structure.dense()


def _wrap(M: np.ndarray, kind: StructureKind, T: int) -> StructureMatrix:
    M = np.asarray(M, dtype=np.int64)
    if T > DENSE_MAX_T:
        return StructureMatrix(sp.csr_matrix(M), kind)
    return StructureMatrix(M, kind)


def _difference_matrix(T: int, order: int) -> np.ndarray:
    D = np.eye(T, dtype=np.int64)
    for _ in range(order):
        D = D[1:] - D[:-1]
    return D


def _rw_structure(T: int, order: int) -> np.ndarray:
    D = _difference_matrix(T, order)
    return D.T @ D


def build_rw1_precision(T: int) -> StructureMatrix:
    """First-order random-walk structure matrix (rank T-1)."""
    if T < 2:
        raise InvalidDimensionError(f"RW1 needs T >= 2, got {T}")
    return StructureMatrix(_rw_structure(T, 1), StructureKind.RW1_1D)


def build_rw2_precision(T: int) -> StructureMatrix:
    """Second-order random-walk structure matrix (rank T-2)."""
    if T < 3:
        raise InvalidDimensionError(f"RW2 needs T >= 3, got {T}")
    return StructureMatrix(_rw_structure(T, 2), StructureKind.RW2_1D)


def _circulant_laplacian(T: int) -> np.ndarray:
    K = -2 * np.eye(T, dtype=np.int64)
    idx = np.arange(T)
    K[idx, (idx + 1) % T] = 1
    K[idx, (idx - 1) % T] = 1
    return K


def build_torus_C(T: int) -> StructureMatrix:
    """Block-circulant difference matrix C: A1 = circulant(-4, 1, 1), A2 = I."""
    if T < 5:
        raise InvalidDimensionError(f"torus construction needs T >= 5, got {T}")
    K = _circulant_laplacian(T)
    eye = np.eye(T, dtype=np.int64)
    return _wrap(np.kron(K, eye) + np.kron(eye, K), StructureKind.TORUS_C, T)


def build_torus_structure(T: int) -> StructureMatrix:
    """Periodic structure matrix P = C^T C."""
    C = build_torus_C(T).dense()
    return _wrap(C.T @ C, StructureKind.TORUS_2D, T)


def neumann_laplacian(T: int) -> np.ndarray:
    """2D grid Laplacian with free (reflecting) boundaries, integer entries."""
    R1 = _rw_structure(T, 1)
    eye = np.eye(T, dtype=np.int64)
    return np.kron(R1, eye) + np.kron(eye, R1)


def build_boundary_structure(T: int) -> StructureMatrix:
    """Boundary-corrected structure matrix built from blocks A1..A5.

    The printed block pattern is the square of the free-boundary grid
    Laplacian, which is also how it extends to T > 5.  Its measured null
    space is one-dimensional (constants only).
    """
    if T < 5:
        raise InvalidDimensionError(f"boundary construction needs T >= 5, got {T}")
    L = neumann_laplacian(T)
    return _wrap(L @ L, StructureKind.BOUNDARY_2D, T)


def build_thin_plate_structure(T: int) -> StructureMatrix:
    """Rank T^2-3 second-order structure: R2(x)I + I(x)R2 + 2 R1(x)R1.

    Same interior 13-point stencil as the boundary matrix, but annihilates
    constants and both linear ramps.
    """
    if T < 3:
        raise InvalidDimensionError(f"thin-plate construction needs T >= 3, got {T}")
    R1 = _rw_structure(T, 1)
    R2 = _rw_structure(T, 2)
    eye = np.eye(T, dtype=np.int64)
    M = np.kron(R2, eye) + np.kron(eye, R2) + 2 * np.kron(R1, R1)
    return _wrap(M, StructureKind.THIN_PLATE_2D, T)


def boundary_blocks(T: int = 5) -> dict[str, np.ndarray]:
    """The distinct T x T blocks A1..A5 of the boundary matrix."""
    P = build_boundary_structure(T).dense()

    def block(a, b):
        return P[a * T:(a + 1) * T, b * T:(b + 1) * T]

    return {"A1": block(0, 0), "A2": block(0, 1), "A3": block(0, 2),
            "A4": block(1, 1), "A5": block(1, 2)}


def _axis_counts(i: int, T: int) -> tuple[int, int]:
    near = (i - 1 >= 1) + (i + 1 <= T)
    far = (i - 2 >= 1) + (i + 2 <= T)
    return near, far


def neighbor_count(i: int, j: int, T: int) -> int:
    """In-bounds cells of the 13-point stencil centered at 1-based (i, j)."""
    if not (1 <= i <= T and 1 <= j <= T):
        raise InvalidIndexError(f"cell ({i}, {j}) outside 1..{T}")
    ni, fi = _axis_counts(i, T)
    nj, fj = _axis_counts(j, T)
    return 1 + ni + nj + fi + fj + ni * nj


def eigendecompose(structure: StructureMatrix | np.ndarray, tol: float = NULL_TOL) -> StructureMatrix:
    """Return a structure with its eigen cache filled and null_dim measured at ``tol``."""
    if not isinstance(structure, StructureMatrix):
        structure = StructureMatrix(np.asarray(structure))
    M = structure.dense()
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"structure must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0, atol=tol * max(np.abs(M).max(), 1.0)):
        raise ValidationError("structure matrix is not symmetric")
    out = StructureMatrix(structure.entries, structure.kind, tol)
    out.eigen  # noqa: B018 - fill cache
    return out


def write_triplets(structure: StructureMatrix, path: str | Path) -> None:
    """Matrix-market-style text: header ``dim nnz`` then ``i j value`` (1-based)."""
    C = sp.coo_matrix(structure.entries)
    order = np.lexsort((C.col, C.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{structure.dim} {C.nnz}\n")
        for r, c, v in zip(C.row[order], C.col[order], C.data[order]):
            fh.write(f"{r + 1} {c + 1} {v.item()!r}\n")


def read_triplets(path: str | Path, kind: StructureKind = StructureKind.OTHER) -> StructureMatrix:
    with open(path, encoding="utf-8") as fh:
        dim, nnz = (int(x) for x in fh.readline().split())
        rows = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if rows.shape[0] != nnz:
        raise ValidationError(f"expected {nnz} triplets, found {rows.shape[0]}")
    vals = rows[:, 2]
    if np.all(vals == np.round(vals)):
        vals = vals.astype(np.int64)
    M = sp.coo_matrix((vals, (rows[:, 0].astype(int) - 1, rows[:, 1].astype(int) - 1)),
                      shape=(dim, dim)).toarray()
    return StructureMatrix(M, kind)
