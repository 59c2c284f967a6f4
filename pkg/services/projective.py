# services/projective.py

import logging
from dataclasses import dataclass
from typing import Any, List, Sequence, Tuple

import numpy as np

from services.errors import DimensionMismatch, NullImage, PreconditionError

NULL_IMAGE_THRESHOLD = 1e-300
PHASE_THRESHOLD = 1e-12
KEY_DECIMALS = 10


def canonicalize(vectors: Any) -> np.ndarray:
    """
    Normalize representatives and fix their phase.

    The first coordinate with modulus above 1e-12 is made real and positive.
    Works on a single vector of shape (k,) or a stack of shape (..., k).

    Args:
        vectors: complex array whose last axis is C^k

    Returns:
        np.ndarray: canonical unit representatives, same shape as the input
    """
    x = np.asarray(vectors, dtype=complex)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= NULL_IMAGE_THRESHOLD):
        raise NullImage(float(np.min(norms)))
    x = x / norms
    lead = np.asarray(np.argmax(np.abs(x) > PHASE_THRESHOLD, axis=-1))
    pivot = np.take_along_axis(x, lead[..., None], axis=-1)
    return x * (np.abs(pivot) / pivot)


@dataclass(frozen=True, eq=False)
class ProjectivePoint:
    """A point of P(C^k) stored as its canonical unit representative."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=complex)
        if v.ndim != 1 or v.size < 1:
            raise DimensionMismatch(f"expected a vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise PreconditionError("representative has non-finite entries")
        v = canonicalize(v)
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def key(self) -> Tuple[float, ...]:
        rounded = np.round(self.vector, KEY_DECIMALS) + 0.0
        return tuple(np.concatenate([rounded.real, rounded.imag]).tolist())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProjectivePoint):
            return NotImplemented
        return self.dim == other.dim and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def to_json(self) -> List[List[float]]:
        return [[float(z.real), float(z.imag)] for z in self.vector]

    @classmethod
    def from_json(cls, data: Sequence[Sequence[float]]) -> "ProjectivePoint":
        return cls(np.array([complex(re, im) for re, im in data]))

    def __repr__(self) -> str:
        return f"ProjectivePoint({np.array2string(self.vector, precision=6)})"


def basis_point(k: int, j: int) -> ProjectivePoint:
    e = np.zeros(k, dtype=complex)
    e[j] = 1.0
    return ProjectivePoint(e)


def _check_square(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=complex)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionMismatch(f"expected square matrices, got shape {A.shape}")
    return A


def wedge_vector(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Coordinates of x∧y in the basis e_i∧e_j, i<j (lexicographic)."""
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionMismatch(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    i, j = np.triu_indices(x.shape[-1], 1)
    return x[..., i] * y[..., j] - x[..., j] * y[..., i]


def pairwise_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Projective distance between stacks of unit representatives, computed as |x∧y|."""
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionMismatch(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-1] == 1:
        return np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
    d = np.linalg.norm(wedge_vector(x, y), axis=-1)
    return np.clip(d, 0.0, 1.0)


def metric_d(a: ProjectivePoint, b: ProjectivePoint) -> float:
    """
    Distance d(a, b) = sqrt(1 - |<x, y>|^2) on P(C^k).

    Evaluated through the wedge product, which stays accurate for nearby points.

    Raises:
        DimensionMismatch: if the points live in different dimensions
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(pairwise_distance(a.vector, b.vector))


def act(A: np.ndarray, x: ProjectivePoint) -> Tuple[ProjectivePoint, float]:
    """
    Apply A to the class of x.

    Returns:
        Tuple[ProjectivePoint, float]: (class of Ax, |Ax|)

    Raises:
        NullImage: when |Ax| <= 1e-300
    """
    A = _check_square(A)
    if A.shape[-1] != x.dim:
        raise DimensionMismatch(f"matrix is {A.shape[-1]}-dimensional, point is {x.dim}-dimensional")
    image = A @ x.vector
    norm = float(np.linalg.norm(image))
    if norm <= NULL_IMAGE_THRESHOLD:
        raise NullImage(norm)
    return ProjectivePoint(image), norm


def wedge2(A: np.ndarray) -> np.ndarray:
    """
    Second exterior power of A (or of a stack of matrices).

    Entry ((i,j),(p,q)) is A_ip A_jq - A_iq A_jp for i<j, p<q.

    Raises:
        PreconditionError: when k < 2
    """
    A = _check_square(A)
    k = A.shape[-1]
    if k < 2:
        raise PreconditionError("wedge2 needs k >= 2")
    i, j = np.triu_indices(k, 1)
    rows_i, rows_j = i[:, None], j[:, None]
    cols_p, cols_q = i[None, :], j[None, :]
    return (A[..., rows_i, cols_p] * A[..., rows_j, cols_q]
            - A[..., rows_i, cols_q] * A[..., rows_j, cols_p])


def projector(x: ProjectivePoint) -> np.ndarray:
    """Orthogonal projector onto the line of x."""
    return np.outer(x.vector, x.vector.conj())


def op_norm(A: np.ndarray) -> Any:
    """Largest singular value; vectorized over leading axes."""
    A = _check_square(A)
    if A.ndim == 2:
        return float(np.linalg.norm(A, 2))
    return np.linalg.svd(A, compute_uv=False)[..., 0]


def haar_vectors(k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors with i.i.d. complex normal coordinates, canonicalized."""
    z = rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))
    return canonicalize(z)


def haar_points(k: int, n: int, rng: np.random.Generator) -> List[ProjectivePoint]:
    return [ProjectivePoint(v) for v in haar_vectors(k, n, rng)]


def random_matrix(k: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return scale * (rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k)))


def random_hermitian(k: int, rng: np.random.Generator) -> np.ndarray:
    G = random_matrix(k, rng)
    return (G + G.conj().T) / 2


def matrix_to_json(A: np.ndarray) -> List[List[List[float]]]:
    """Row-major nested [re, im] pairs."""
    A = np.asarray(A, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in A]


def matrix_from_json(data: Sequence[Sequence[Sequence[float]]]) -> np.ndarray:
    rows = [[complex(pair[0], pair[1]) for pair in row] for row in data]
    A = np.array(rows, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        logging.warning(f"Matrix payload has non-square shape {A.shape}")
        raise DimensionMismatch(f"matrix payload has shape {A.shape}")
    return A
