# services/channel.py

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Union

import numpy as np
import scipy.linalg

from app.config import settings
from services.errors import (
    DimensionMismatch,
    EigensolverError,
    ErgodicityError,
    NonSimplePeripheral,
    PeripheralNotRoots,
    PreconditionError,
    SizeLimitExceeded,
)
from services.instrument import Instrument, atom_images
from services.projective import NULL_IMAGE_THRESHOLD, ProjectivePoint, matrix_to_json


def _check_operand(ins: Instrument, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=complex)
    if X.shape != (ins.dim, ins.dim):
        raise DimensionMismatch(f"instrument is {ins.dim}-dimensional, operand has shape {X.shape}")
    return X


def phi_apply(ins: Instrument, X: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """
    Apply the channel Phi(X) = sum w v* X v, or its adjoint Phi*(X) = sum w v X v*.

    Args:
        ins: instrument defining the channel
        X: k x k matrix
        adjoint: apply Phi* (the state picture) instead of Phi

    Returns:
        np.ndarray: the image matrix
    """
    X = _check_operand(ins, X)
    V = ins.matrices
    if adjoint:
        return np.einsum("a,aij,jk,alk->il", ins.weights, V, X, V.conj())
    return np.einsum("a,aji,jk,akl->il", ins.weights, V.conj(), X, V)


@dataclass(frozen=True)
class Superoperator:
    """Matrix of Phi (or Phi*) acting on row-major vectorized k x k matrices."""

    matrix: np.ndarray
    dim: int
    adjoint: bool

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(X, dtype=complex).reshape(-1)).reshape(self.dim, self.dim)


def superoperator_matrix(ins: Instrument, adjoint: bool = False) -> Superoperator:
    """
    Dense k^2 x k^2 representation of the channel.

    Raises:
        SizeLimitExceeded: when k^2 exceeds settings.superoperator_limit
    """
    k = ins.dim
    if k * k > settings.superoperator_limit:
        raise SizeLimitExceeded(f"k^2 = {k * k} exceeds superoperator limit {settings.superoperator_limit}")
    V = ins.matrices
    if adjoint:
        blocks = np.einsum("aij,akl->aikjl", V, V.conj())
    else:
        blocks = np.einsum("aji,alk->aikjl", V.conj(), V)
    S = np.einsum("a,aikjl->ikjl", ins.weights, blocks).reshape(k * k, k * k)
    return Superoperator(matrix=S, dim=k, adjoint=adjoint)


def support_basis(rho: np.ndarray, tol: float) -> np.ndarray:
    """Orthonormal basis of the range of rho, singular values cut at tol * largest."""
    return scipy.linalg.orth(np.asarray(rho, dtype=complex), rcond=tol)


def _hermitize(X: np.ndarray) -> np.ndarray:
    return (X + X.conj().T) / 2


@dataclass
class ErgReport:
    holds: bool
    fixed_space_dim: int
    E_basis: Optional[np.ndarray] = None
    invariant_state: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "holds": self.holds,
            "fixed_space_dim": self.fixed_space_dim,
            "E_basis": None if self.E_basis is None else matrix_to_json(self.E_basis),
            "invariant_state": None if self.invariant_state is None else matrix_to_json(self.invariant_state),
        }


def erg_check(ins: Instrument, tol: Optional[float] = None) -> ErgReport:
    """
    Decide (Erg) through the dimension of the fixed space of Phi*.

    Raises:
        EigensolverError: if no fixed point is found at this tolerance
    """
    tol = settings.channel_tol if tol is None else tol
    k = ins.dim
    S = superoperator_matrix(ins, adjoint=True).matrix
    try:
        null = scipy.linalg.null_space(S - np.eye(k * k), rcond=tol)
    except np.linalg.LinAlgError as e:
        raise EigensolverError(f"fixed-space computation failed: {e}") from e
    dim = int(null.shape[1])
    logging.info(f"Instrument {ins.label}: fixed space of Phi* has dimension {dim}")
    if dim == 0:
        raise EigensolverError(f"no fixed state found at tolerance {tol:.1e}")
    if dim > 1:
        return ErgReport(holds=False, fixed_space_dim=dim)

    X = null[:, 0].reshape(k, k)
    rho = _hermitize(X / np.trace(X))
    return ErgReport(holds=True, fixed_space_dim=1, E_basis=support_basis(rho, tol), invariant_state=rho)


@dataclass
class CycleDecomposition:
    """Period m with cyclic subspaces E_r, operators M_r and states rho_r (r = 1..m, stored 0-based)."""

    m: int
    E_bases: List[np.ndarray]
    M: List[np.ndarray]
    rho: List[np.ndarray]
    eigenvalues: List[complex] = field(default_factory=list)

    def projectors(self) -> List[np.ndarray]:
        return [B @ B.conj().T for B in self.E_bases]

    def defects(self, ins: Instrument) -> Dict[str, float]:
        """Largest violation of each structural relation of the decomposition."""
        k = ins.dim
        P = self.projectors()
        m = self.m
        sum_defect = float(np.max(np.abs(sum(self.M) - np.eye(k))))
        shift = max(float(np.max(np.abs(phi_apply(ins, self.M[r]) - self.M[(r - 1) % m]))) for r in range(m))
        projection = 0.0
        for r in range(m):
            for s in range(m):
                target = P[s] if r == s else np.zeros((k, k))
                projection = max(projection, float(np.max(np.abs(self.M[r] @ P[s] - target))))
        rho_shift = max(float(np.max(np.abs(phi_apply(ins, self.rho[r], adjoint=True) - self.rho[(r + 1) % m])))
                        for r in range(m))
        overlap = 0.0
        for r in range(m):
            for s in range(r + 1, m):
                overlap = max(overlap, float(np.max(np.abs(self.rho[r] @ self.rho[s]))))
        return {
            "sum_identity": sum_defect,
            "phi_shift": shift,
            "projection": projection,
            "rho_shift": rho_shift,
            "support_overlap": overlap,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "period": self.m,
            "peripheral_eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "cycles": [
                {"E_basis": matrix_to_json(B), "M": matrix_to_json(M), "rho": matrix_to_json(R)}
                for B, M, R in zip(self.E_bases, self.M, self.rho)
            ],
        }


def _match_roots(peripheral: np.ndarray, root_tol: float) -> List[int]:
    """Index l of the m-th root of unity matched by each peripheral eigenvalue."""
    m = len(peripheral)
    roots = np.exp(2j * np.pi * np.arange(m) / m)
    matched = []
    for lam in peripheral:
        distances = np.abs(roots - lam)
        l = int(np.argmin(distances))
        if distances[l] > root_tol:
            raise PeripheralNotRoots(f"peripheral eigenvalue {lam:.6g} is not a {m}-th root of unity")
        matched.append(l)
    if len(set(matched)) != m:
        raise NonSimplePeripheral(f"peripheral eigenvalues {np.round(peripheral, 8)} repeat a root of unity")
    return matched


def _cycle_projectors(rho_inf: np.ndarray, X1: np.ndarray, basis: np.ndarray, m: int) -> List[np.ndarray]:
    """
    Split the support of rho_inf into the eigenspaces of rho_inf^+ X_1.

    On the support this operator is a multiple of sum_r w^-r P_{E_r}, so its
    eigenvalue phases label the cyclic subspaces.
    """
    K = basis.conj().T @ np.linalg.pinv(rho_inf) @ X1 @ basis
    values, vectors = np.linalg.eig(K)
    reference = values[np.argmax(np.abs(values))]
    labels = np.mod(np.rint(np.angle(values / reference) * m / (2 * np.pi)).astype(int), m)
    projectors = []
    for label in range(m):
        chosen = vectors[:, labels == label]
        if chosen.shape[1] == 0:
            raise PeripheralNotRoots(f"cyclic class {label} of {m} is empty")
        Q = basis @ scipy.linalg.orth(chosen)
        projectors.append(Q)
    return projectors


def _order_cycles(ins: Instrument, bases: List[np.ndarray]) -> List[np.ndarray]:
    """Start at the class with the largest weight on e_0 and follow Phi*."""
    m = len(bases)
    P = [B @ B.conj().T for B in bases]
    current = int(np.argmax([p[0, 0].real for p in P]))
    order = [current]
    while len(order) < m:
        state = P[current] / np.trace(P[current])
        image = phi_apply(ins, state, adjoint=True)
        current = int(np.argmax([np.trace(p @ image).real for p in P]))
        if current in order:
            raise PeripheralNotRoots("Phi* does not permute the cyclic subspaces")
        order.append(current)
    return [bases[r] for r in order]


def _power_limit(T: np.ndarray, tol: float) -> np.ndarray:
    """lim T^(2^j) by repeated squaring."""
    A = T
    for _ in range(settings.max_squarings):
        A_next = A @ A
        if np.max(np.abs(A_next - A)) < tol:
            return A_next
        A = A_next
    raise EigensolverError(f"power limit did not converge in {settings.max_squarings} squarings")


def period_and_cycles(ins: Instrument, tol: Optional[float] = None) -> CycleDecomposition:
    """
    Period m and cyclic decomposition {E_r, M_r, rho_r} of the channel.

    Raises:
        ErgodicityError: when (Erg) fails
        PeripheralNotRoots: when the peripheral eigenvalues are not roots of unity
        NonSimplePeripheral: when a root of unity occurs more than once
    """
    tol = settings.channel_tol if tol is None else tol
    erg = erg_check(ins, tol)
    if not erg.holds:
        raise ErgodicityError(f"fixed space has dimension {erg.fixed_space_dim}; (Erg) fails")
    k = ins.dim
    S_star = superoperator_matrix(ins, adjoint=True).matrix
    values, vectors = np.linalg.eig(S_star)
    peripheral_idx = np.flatnonzero(np.abs(values) > 1 - 10 * tol)
    peripheral = values[peripheral_idx]
    m = len(peripheral)
    if m == 0:
        raise PeripheralNotRoots("no peripheral eigenvalue found")
    root_tol = max(10 * tol, settings.peripheral_root_tol)
    matched = _match_roots(peripheral, root_tol)
    logging.info(f"Instrument {ins.label}: period {m}, peripheral eigenvalues {np.round(peripheral, 10)}")

    rho_inf = erg.invariant_state
    if m == 1:
        bases = [erg.E_basis]
    else:
        X1 = vectors[:, peripheral_idx[matched.index(1)]].reshape(k, k)
        bases = _order_cycles(ins, _cycle_projectors(rho_inf, X1, erg.E_basis, m))

    rhos = []
    for B in bases:
        P = B @ B.conj().T
        block = _hermitize(P @ rho_inf @ P)
        rhos.append(block / np.trace(block).real)

    S = superoperator_matrix(ins, adjoint=False).matrix
    limit = _power_limit(np.linalg.matrix_power(S, m), tol)
    Ms = [_hermitize((limit @ (B @ B.conj().T).reshape(-1)).reshape(k, k)) for B in bases]

    order = np.argsort(matched)
    return CycleDecomposition(m=m, E_bases=bases, M=Ms, rho=rhos,
                              eigenvalues=[complex(peripheral[i]) for i in order])


class Observable(Protocol):
    """A function h on P(C^k), evaluated on stacks of unit representatives (n, k)."""

    name: str

    def __call__(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantObservable:
    value: float
    name: str = "const"

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.full(X.shape[0], float(self.value))


@dataclass(frozen=True, eq=False)
class QuadraticObservable:
    """f_A(x) = <x, A x>; real valued when A is Hermitian."""

    matrix: np.ndarray
    name: str = "quad"

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=complex)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"observable matrix has shape {A.shape}")
        object.__setattr__(self, "matrix", A)

    @property
    def is_hermitian(self) -> bool:
        return bool(np.allclose(self.matrix, self.matrix.conj().T, atol=1e-12))

    def __call__(self, X: Union[np.ndarray, ProjectivePoint]) -> np.ndarray:
        if isinstance(X, ProjectivePoint):
            X = X.vector
        X = np.atleast_2d(np.asarray(X, dtype=complex))
        values = np.einsum("ni,ij,nj->n", X.conj(), self.matrix, X)
        return values.real if self.is_hermitian else values

    def centered(self, mean: float) -> "QuadraticObservable":
        """f_A - mean, still quadratic since |x| = 1."""
        k = self.matrix.shape[0]
        return QuadraticObservable(self.matrix - mean * np.eye(k), name=f"{self.name}-centered")


def peripheral_eigenfunction(cd: CycleDecomposition, l: int) -> QuadraticObservable:
    """
    f_l(x) = sum_r exp(2 pi i r l / m) <x, M_r x>, r = 1..m.

    Raises:
        PreconditionError: when l is outside [0, m)
    """
    if not 0 <= l < cd.m:
        raise PreconditionError(f"eigenfunction index {l} outside [0, {cd.m})")
    A = sum(np.exp(2j * np.pi * (r + 1) * l / cd.m) * M for r, M in enumerate(cd.M))
    if l == 0:
        A = A.real.astype(complex)
    return QuadraticObservable(A, name=f"f_{l}")


def pi_on_quadratic(ins: Instrument, A: np.ndarray) -> np.ndarray:
    """Matrix of Pi f_A: the kernel maps f_A to f_Phi(A)."""
    return phi_apply(ins, A, adjoint=False)


def pi_pointwise(ins: Instrument, f: Callable[[np.ndarray], np.ndarray], X: np.ndarray,
                 tilt: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """
    Exact kernel sum (Pi f)(x) = sum_i w_i |v_i x|^2 f(v_i . x) at each row of X.

    Null images contribute 0. An optional tilt(images, norms) multiplies each branch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=complex))
    images, norms2 = atom_images(ins, X)
    n, a, k = images.shape
    norms = np.sqrt(norms2)
    alive = norms > NULL_IMAGE_THRESHOLD
    safe = np.where(alive, norms, 1.0)
    unit = images / safe[..., None]
    unit[~alive] = np.eye(k, dtype=complex)[0]
    values = np.asarray(f(unit.reshape(n * a, k))).reshape(n, a)
    weight = ins.weights[None, :] * norms2
    if tilt is not None:
        weight = weight * tilt(unit, safe)
    return np.sum(np.where(alive, weight * values, 0.0), axis=1)
