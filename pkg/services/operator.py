# services/operator.py

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from math import factorial
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from scipy.spatial import cKDTree

from app.config import settings
from services.errors import (
    DimensionMismatch,
    PreconditionError,
    SpectrumConvergenceError,
    TiltDomainError,
)
from services.instrument import Instrument, atom_images
from services.projective import NULL_IMAGE_THRESHOLD, canonicalize, haar_vectors, pairwise_distance
from services.rng import MESH, stream

GOLDEN_RATIO = (1 + np.sqrt(5)) / 2
MIN_SEPARATION = 1e-9


def embed(X: np.ndarray) -> np.ndarray:
    """
    Real coordinates of the projector x x*.

    The Frobenius distance between projectors is sqrt(2) d(x, y), so nearest
    neighbours in this embedding are nearest neighbours for the metric d.
    """
    X = np.atleast_2d(np.asarray(X, dtype=complex))
    P = np.einsum("ni,nj->nij", X, X.conj()).reshape(X.shape[0], -1)
    return np.concatenate([P.real, P.imag], axis=1)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Finite set of nodes on P(C^k)."""

    dim: int
    points: np.ndarray
    kind: str
    seed: int = 0

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(embed(self.points))

    def nearest(self, X: np.ndarray) -> np.ndarray:
        """Index of the nearest node for each row of X."""
        X = np.atleast_2d(X)
        if X.shape[-1] != self.dim:
            raise DimensionMismatch(f"mesh is {self.dim}-dimensional, points are {X.shape[-1]}-dimensional")
        _, idx = self.tree.query(embed(X), k=1, workers=settings.threads)
        return np.asarray(idx, dtype=int)

    def nearest_neighbor_distances(self) -> np.ndarray:
        dist, _ = self.tree.query(embed(self.points), k=2, workers=settings.threads)
        return dist[:, 1] / np.sqrt(2)


def _fibonacci_points(N: int) -> np.ndarray:
    i = np.arange(N) + 0.5
    theta = np.arccos(1 - 2 * i / N)
    phi = 2 * np.pi * i / GOLDEN_RATIO
    return np.stack([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)], axis=1)


def build_mesh(k: int, N: int, kind: Literal["fibonacci", "haar"] = "fibonacci", seed: int = 0) -> Mesh:
    """
    Discretize P(C^k).

    fibonacci: spherical Fibonacci lattice on the Bloch sphere, mapped to
    x = (cos(theta/2), e^{i phi} sin(theta/2)); only for k = 2.
    haar: N unit vectors with i.i.d. complex normal coordinates.

    Raises:
        PreconditionError: N < 16, or fibonacci with k != 2, or coincident nodes
    """
    if N < 16:
        raise PreconditionError("meshes need at least 16 nodes")
    if kind == "fibonacci":
        if k != 2:
            raise PreconditionError("fibonacci meshes exist only for k = 2")
        points = canonicalize(_fibonacci_points(N))
    elif kind == "haar":
        points = haar_vectors(k, N, stream(seed, MESH, k, N))
    else:
        raise PreconditionError(f"unknown mesh kind '{kind}'")
    points.setflags(write=False)
    mesh = Mesh(dim=k, points=points, kind=kind, seed=seed)
    separation = float(np.min(mesh.nearest_neighbor_distances()))
    if separation <= MIN_SEPARATION:
        raise PreconditionError(f"mesh has coincident nodes (separation {separation:.2e})")
    logging.info(f"Built {kind} mesh: k={k}, N={N}, min separation {separation:.3e}")
    return mesh


@dataclass(frozen=True)
class Tilt:
    """none; observable: e^{theta h(v.x)}; lyapunov: |vx|^s; log_power: log^order|vx| |vx|^s."""

    kind: Literal["none", "observable", "lyapunov", "log_power"] = "none"
    parameter: complex = 0.0
    h: Optional[Callable[[np.ndarray], np.ndarray]] = None
    order: int = 0

    @classmethod
    def none(cls) -> "Tilt":
        return cls()

    @classmethod
    def observable(cls, theta: float, h: Callable[[np.ndarray], np.ndarray]) -> "Tilt":
        return cls(kind="observable", parameter=theta, h=h)

    @classmethod
    def lyapunov(cls, s: complex) -> "Tilt":
        return cls(kind="lyapunov", parameter=s)

    @classmethod
    def log_power(cls, z: complex, order: int) -> "Tilt":
        return cls(kind="log_power", parameter=z, order=order)

    def describe(self) -> Dict[str, Any]:
        value = complex(self.parameter)
        return {"kind": self.kind, "parameter": value.real if value.imag == 0 else [value.real, value.imag],
                "order": self.order}


def check_norm_tilt(s: complex) -> None:
    real = complex(s).real
    if not settings.lyapunov_tilt_floor < real < settings.lyapunov_tilt_ceiling:
        raise TiltDomainError(f"Re(s) = {real} outside ({settings.lyapunov_tilt_floor}, "
                              f"{settings.lyapunov_tilt_ceiling})")


@dataclass
class Branches:
    """
    Nearest-node images of every (node, atom) pair with nonzero image.

    rows/cols index the source node and the node nearest to v_i . x_a; weight
    is w_i |v_i x_a|^2.
    """

    mesh: Mesh
    rows: np.ndarray
    cols: np.ndarray
    weight: np.ndarray
    norms: np.ndarray
    images: np.ndarray

    def factors(self, tilt: Tilt) -> np.ndarray:
        if tilt.kind == "none":
            return np.ones_like(self.weight)
        if tilt.kind == "observable":
            if tilt.h is None:
                raise PreconditionError("observable tilt needs h")
            return np.exp(tilt.parameter * np.real(tilt.h(self.images)))
        check_norm_tilt(tilt.parameter)
        power = self.norms ** tilt.parameter
        if tilt.kind == "lyapunov":
            return power
        return np.log(self.norms) ** tilt.order * power

    def row_sum(self, values: np.ndarray) -> np.ndarray:
        N = self.mesh.size
        values = np.asarray(values)
        if np.iscomplexobj(values):
            return (np.bincount(self.rows, values.real, minlength=N)
                    + 1j * np.bincount(self.rows, values.imag, minlength=N))
        return np.bincount(self.rows, values, minlength=N)


def branches(ins: Instrument, mesh: Mesh) -> Branches:
    if ins.dim != mesh.dim:
        raise DimensionMismatch(f"instrument is {ins.dim}-dimensional, mesh is {mesh.dim}-dimensional")
    images, norms2 = atom_images(ins, mesh.points)
    norms = np.sqrt(norms2)
    node, atom = np.nonzero(norms > NULL_IMAGE_THRESHOLD)
    unit = images[node, atom] / norms[node, atom][:, None]
    cols = mesh.nearest(unit)
    return Branches(mesh=mesh, rows=node, cols=cols, weight=ins.weights[atom] * norms2[node, atom],
                    norms=norms[node, atom], images=unit)


@dataclass
class DiscretizedKernel:
    mesh: Mesh
    matrix: scipy.sparse.csr_matrix
    tilt: Tilt = field(default_factory=Tilt)
    alpha: float = 1.0

    @property
    def size(self) -> int:
        return self.mesh.size

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(f)


def discretize(ins: Instrument, mesh: Mesh, tilt: Optional[Tilt] = None,
               assembly: Optional[Branches] = None, alpha: float = 1.0) -> DiscretizedKernel:
    """
    Nearest-node matrix of Pi, Pi_theta or Gamma_s on the mesh.

    K[a, b] sums w_i |v_i x_a|^2 T_i(a) over atoms whose image of x_a is nearest
    to node b. Null images contribute 0.

    Raises:
        PreconditionError: empty mesh
        TiltDomainError: norm tilt outside the configured strip
    """
    tilt = tilt or Tilt()
    if mesh.size == 0:
        raise PreconditionError("empty mesh")
    assembly = assembly or branches(ins, mesh)
    data = assembly.weight * assembly.factors(tilt)
    matrix = scipy.sparse.coo_matrix((data, (assembly.rows, assembly.cols)), shape=(mesh.size, mesh.size)).tocsr()
    matrix.sum_duplicates()
    return DiscretizedKernel(mesh=mesh, matrix=matrix, tilt=tilt, alpha=alpha)


@dataclass
class SpectrumReport:
    eigenvalues: List[complex]
    gap: float
    period_estimate: int
    method: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "moduli": [float(abs(z)) for z in self.eigenvalues],
            "gap": self.gap,
            "period_estimate": self.period_estimate,
            "method": self.method,
        }


def leading_spectrum(kernel: DiscretizedKernel, count: int = 6, tol: Optional[float] = None) -> SpectrumReport:
    """
    Largest-modulus eigenvalues of the kernel.

    Dense eigensolve up to settings.dense_limit nodes, implicitly restarted
    Arnoldi (ARPACK) above.

    Raises:
        PreconditionError: count outside [1, 10]
        SpectrumConvergenceError: when ARPACK does not converge
    """
    if not 1 <= count <= 10:
        raise PreconditionError("count must lie in [1, 10]")
    tol = settings.perron_tol if tol is None else tol
    N = kernel.size
    if N <= settings.dense_limit or count >= N - 1:
        values = np.linalg.eigvals(kernel.dense())
        method = "dense"
    else:
        try:
            values = scipy.sparse.linalg.eigs(kernel.matrix.astype(complex), k=count, which="LM",
                                              maxiter=settings.max_iterations, tol=tol, return_eigenvectors=False)
        except scipy.sparse.linalg.ArpackNoConvergence as e:
            raise SpectrumConvergenceError(f"ARPACK did not converge: {e}") from e
        method = "arnoldi"
    order = np.lexsort((-values.real, -np.round(np.abs(values), 12)))
    values = values[order][:count]
    moduli = np.abs(values)
    gap = float(1 - moduli[1] / moduli[0]) if len(values) > 1 and moduli[0] > 0 else 0.0
    period = int(np.sum(moduli > (1 - settings.gap_tol) * moduli[0])) if moduli[0] > 0 else 0
    logging.info(f"Leading spectrum ({method}, N={N}): |lambda| = {np.round(moduli, 6).tolist()}, gap {gap:.4g}")
    return SpectrumReport(eigenvalues=[complex(v) for v in values], gap=max(gap, 0.0), period_estimate=period,
                          method=method)


def perron_root(kernel: Union[DiscretizedKernel, scipy.sparse.spmatrix, np.ndarray],
                tol: Optional[float] = None, method: str = "power") -> Tuple[float, np.ndarray]:
    """
    Spectral radius and Perron vector of a nonnegative matrix.

    Power iteration on K + cI started from the constant vector, with quotient
    sum(Kx)/sum(x) and stopping at relative change tol. The shift makes the
    Perron root strictly dominant for periodic kernels. Falls back to a dense
    eigensolve when the iteration stalls and the matrix is small enough.

    Raises:
        SpectrumConvergenceError: when neither route converges
    """
    tol = settings.perron_tol if tol is None else tol
    K = kernel.matrix if isinstance(kernel, DiscretizedKernel) else kernel
    N = K.shape[0]
    if method == "dense":
        return _dense_perron(K)
    row_sums = np.asarray(abs(K).sum(axis=1)).reshape(-1)
    shift = 0.5 * float(np.max(row_sums)) if row_sums.size else 0.0
    x = np.ones(N) / N
    rho = None
    for _ in range(settings.max_iterations):
        y = K @ x + shift * x
        total = float(np.sum(y))
        if total <= 0 or not np.isfinite(total):
            break
        estimate = total / float(np.sum(x)) - shift
        x = y / total
        if rho is not None and abs(estimate - rho) <= tol * max(abs(estimate), 1e-300):
            return estimate, x
        rho = estimate
    if N <= settings.dense_limit:
        logging.info(f"Power iteration did not settle at N={N}, using dense eigensolve")
        return _dense_perron(K)
    raise SpectrumConvergenceError(f"power iteration did not converge in {settings.max_iterations} steps")


def _dense_perron(K: Any) -> Tuple[float, np.ndarray]:
    A = K.toarray() if scipy.sparse.issparse(K) else np.asarray(K)
    values, vectors = np.linalg.eig(A)
    idx = int(np.argmax(np.abs(values) + 1e-12 * values.real))
    v = np.abs(vectors[:, idx].real)
    total = v.sum()
    return float(abs(values[idx])), v / total if total > 0 else v


def tilted_log_radius(ins: Instrument, mesh: Mesh, tilt: Tilt, assembly: Optional[Branches] = None) -> float:
    rho, _ = perron_root(discretize(ins, mesh, tilt, assembly))
    return float(np.log(rho))


def scgf_curve(ins: Instrument, mesh: Mesh, family: Literal["obs", "lyap"], grid: Sequence[float],
               h: Optional[Callable[[np.ndarray], np.ndarray]] = None,
               threads: Optional[int] = None) -> List[Tuple[float, float]]:
    """
    Lambda(theta) = log rho(Pi_theta) or Upsilon(s) = log rho(Gamma_s) on a grid.

    Raises:
        TiltDomainError: a lyapunov grid point outside the configured strip
        PreconditionError: obs family without an observable
    """
    grid = [float(g) for g in grid]
    if family == "lyap":
        for s in grid:
            check_norm_tilt(s)
        tilts = [Tilt.lyapunov(s) for s in grid]
    elif family == "obs":
        if h is None:
            raise PreconditionError("observable tilt family needs h")
        tilts = [Tilt.observable(theta, h) for theta in grid]
    else:
        raise PreconditionError(f"unknown tilt family '{family}'")
    assembly = branches(ins, mesh)
    threads = settings.threads if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(lambda t: tilted_log_radius(ins, mesh, t, assembly), tilts))
    else:
        values = [tilted_log_radius(ins, mesh, t, assembly) for t in tilts]
    return list(zip(grid, values))


@dataclass
class MeshFunction:
    """Function on P(C^k) given by its values at mesh nodes (nearest-node extension)."""

    mesh: Mesh
    values: np.ndarray
    name: str = "meshfn"

    @classmethod
    def from_observable(cls, mesh: Mesh, h: Callable[[np.ndarray], np.ndarray], name: str = "meshfn") -> "MeshFunction":
        return cls(mesh=mesh, values=np.asarray(h(mesh.points)), name=name)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.values[self.mesh.nearest(X)]


def holder_seminorm(meshfn: MeshFunction, alpha: float, chunk: int = 256) -> float:
    """max over distinct node pairs of |f(a) - f(b)| / d(a, b)^alpha."""
    if meshfn.mesh.size < 2:
        raise PreconditionError("holder_seminorm needs at least 2 nodes")
    X = meshfn.mesh.points
    f = meshfn.values
    best = 0.0
    for start in range(0, X.shape[0], chunk):
        d = pairwise_distance(X[start:start + chunk, None, :], X[None, :, :])
        diff = np.abs(f[start:start + chunk, None] - f[None, :])
        distinct = d > MIN_SEPARATION
        if np.any(distinct):
            best = max(best, float(np.max(diff[distinct] / d[distinct] ** alpha)))
    return best


@dataclass
class GammaSeriesResult:
    direct: np.ndarray
    truncated: np.ndarray
    errors: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return {"errors": self.errors, "final_error": self.errors[-1]}


def gamma_series_check(ins: Instrument, mesh: Mesh, z: complex, w: complex, n_terms: int,
                       f: Union[MeshFunction, np.ndarray]) -> GammaSeriesResult:
    """
    Compare Gamma_{z+w} f with the partial sums sum_{n<=N} w^n/n! Gamma_n^z f.

    Gamma_n^z has branch factor log^n|v x| |v x|^(2+z).

    Raises:
        TiltDomainError: Re z or Re(z+w) outside the strip, or |w| above settings.gamma_series_max_w
    """
    if abs(w) > settings.gamma_series_max_w:
        raise TiltDomainError(f"|w| = {abs(w)} exceeds {settings.gamma_series_max_w}")
    check_norm_tilt(z)
    check_norm_tilt(z + w)
    values = f.values if isinstance(f, MeshFunction) else np.asarray(f)
    if values.shape[0] != mesh.size:
        raise DimensionMismatch(f"function has {values.shape[0]} values for {mesh.size} nodes")
    assembly = branches(ins, mesh)
    fb = values[assembly.cols]
    direct = assembly.row_sum(assembly.weight * assembly.factors(Tilt.lyapunov(z + w)) * fb)
    truncated = np.zeros(mesh.size, dtype=complex)
    errors = []
    for n in range(n_terms + 1):
        term = assembly.row_sum(assembly.weight * assembly.factors(Tilt.log_power(z, n)) * fb)
        truncated = truncated + (w ** n / factorial(n)) * term
        errors.append(float(np.max(np.abs(direct - truncated))))
    return GammaSeriesResult(direct=direct, truncated=truncated, errors=errors)
