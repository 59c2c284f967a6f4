# services/instrument.py

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app.config import settings
from services.errors import (
    DimensionMismatch,
    InstrumentFormatError,
    ParameterRangeError,
    PreconditionError,
    UnknownInstrument,
)
from services.projective import ProjectivePoint, matrix_from_json, matrix_to_json, op_norm

BUILTIN_PREFIX = "builtin:"


@dataclass(frozen=True, eq=False)
class Instrument:
    """
    Finite weighted family of Kraus atoms (w_i, v_i).

    Weights are kept apart from the matrices so that the measure is the sum of
    point masses w_i at v_i.
    """

    weights: np.ndarray
    matrices: np.ndarray
    label: str = ""

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        V = np.array(self.matrices, dtype=complex)
        if V.ndim == 2:
            V = V[None]
        if V.ndim != 3 or V.shape[1] != V.shape[2]:
            raise DimensionMismatch(f"atoms must be square matrices, got shape {V.shape}")
        if w.size < 1 or w.size != V.shape[0]:
            raise DimensionMismatch(f"{w.size} weights for {V.shape[0]} matrices")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ParameterRangeError("weights must be finite and strictly positive")
        if not np.all(np.isfinite(V)):
            raise ParameterRangeError("matrix entries must be finite")
        w.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "matrices", V)

    @property
    def dim(self) -> int:
        return int(self.matrices.shape[1])

    @property
    def n_atoms(self) -> int:
        return int(self.weights.shape[0])

    @property
    def atoms(self) -> List[Tuple[float, np.ndarray]]:
        return [(float(w), v) for w, v in zip(self.weights, self.matrices)]

    @property
    def kraus(self) -> np.ndarray:
        """Kraus operators sqrt(w_i) v_i."""
        return np.sqrt(self.weights)[:, None, None] * self.matrices

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Instrument):
            return NotImplemented
        return (self.label == other.label
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.matrices, other.matrices))

    def __hash__(self) -> int:
        return hash((self.label, self.weights.tobytes(), self.matrices.tobytes()))


class ValidationReport(BaseModel):
    stochasticity_defect: float
    passed: bool
    tolerance: float


def stochasticity_defect(ins: Instrument) -> float:
    """Operator norm of sum_i w_i v_i* v_i - Id."""
    V = ins.matrices
    gram = np.einsum("a,aji,ajk->ik", ins.weights, V.conj(), V)
    return op_norm(gram - np.eye(ins.dim))


def validate(ins: Instrument, tol: Optional[float] = None) -> ValidationReport:
    """
    Check the stochasticity condition.

    Args:
        ins: instrument to check
        tol: tolerance on the defect (defaults to settings.tol)

    Returns:
        ValidationReport: defect, verdict and the tolerance used
    """
    tol = settings.tol if tol is None else tol
    if tol <= 0:
        raise PreconditionError("tolerance must be positive")
    defect = stochasticity_defect(ins)
    return ValidationReport(stochasticity_defect=defect, passed=defect <= tol, tolerance=tol)


def atom_images(ins: Instrument, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Images v_i x for a stack of representatives.

    Args:
        X: array of shape (n, k) or (k,)

    Returns:
        Tuple[np.ndarray, np.ndarray]: images (n, a, k) and squared norms (n, a)
    """
    X = np.atleast_2d(np.asarray(X, dtype=complex))
    if X.shape[-1] != ins.dim:
        raise DimensionMismatch(f"instrument is {ins.dim}-dimensional, points are {X.shape[-1]}-dimensional")
    images = np.einsum("aij,nj->nai", ins.matrices, X)
    norms2 = np.einsum("nai,nai->na", images.conj(), images).real
    return images, norms2


def transition_weights(ins: Instrument, x: Union[ProjectivePoint, np.ndarray]) -> np.ndarray:
    """Probabilities p_i = w_i |v_i x|^2 of each atom at the state x."""
    vector = x.vector if isinstance(x, ProjectivePoint) else np.asarray(x, dtype=complex)
    if vector.shape[-1] != ins.dim:
        raise DimensionMismatch(f"instrument is {ins.dim}-dimensional, point is {vector.shape[-1]}-dimensional")
    _, norms2 = atom_images(ins, vector)
    probs = ins.weights[None, :] * norms2
    return probs[0] if vector.ndim == 1 else probs


def moment(ins: Instrument, s: float) -> float:
    """sum_i w_i |v_i|^(2+s), with the operator norm."""
    norms = op_norm(ins.matrices)
    norms = np.atleast_1d(norms)
    with np.errstate(divide="ignore"):
        terms = np.where(norms > 0, norms ** (2.0 + s), 0.0)
    return float(np.sum(ins.weights * terms))


class AtomModel(BaseModel):
    weight: float = Field(gt=0)
    matrix: List[List[Tuple[float, float]]]


class InstrumentFile(BaseModel):
    label: str = ""
    dim: int = Field(ge=1)
    atoms: List[AtomModel] = Field(min_length=1)


class LoadResult(BaseModel):
    """Instrument together with the stochasticity report computed on load."""

    model_config = {"arbitrary_types_allowed": True}

    instrument: Any
    report: ValidationReport
    source: str = ""


def instrument_to_document(ins: Instrument) -> Dict[str, Any]:
    return {
        "label": ins.label,
        "dim": ins.dim,
        "atoms": [{"weight": float(w), "matrix": matrix_to_json(v)} for w, v in ins.atoms],
    }


def instrument_from_document(data: Any) -> Instrument:
    """
    Build an instrument from the parsed JSON document.

    Raises:
        InstrumentFormatError: with the offending field path
    """
    try:
        doc = InstrumentFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise InstrumentFormatError(first["msg"], location=location) from e

    matrices = []
    for index, atom in enumerate(doc.atoms):
        location = f"atoms.{index}.matrix"
        try:
            A = matrix_from_json(atom.matrix)
        except (DimensionMismatch, ValueError) as e:
            raise InstrumentFormatError(str(e), location=location) from e
        if A.shape != (doc.dim, doc.dim):
            raise InstrumentFormatError(
                f"matrix is {A.shape[0]}x{A.shape[1]} but header dim is {doc.dim}", location=location)
        matrices.append(A)
    weights = [atom.weight for atom in doc.atoms]
    return Instrument(weights=np.array(weights), matrices=np.stack(matrices), label=doc.label)


def load(path: Union[str, Path], tol: Optional[float] = None) -> LoadResult:
    """
    Read an instrument file and validate it.

    A failed stochasticity check is logged and embedded in the result, not raised.

    Raises:
        InstrumentFormatError: on malformed JSON (line/column) or schema errors (field path)
        OSError: when the file cannot be read
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InstrumentFormatError(e.msg, location=f"{path.name}: line {e.lineno}, column {e.colno}") from e
    try:
        ins = instrument_from_document(data)
    except InstrumentFormatError as e:
        raise InstrumentFormatError(str(e), location=path.name) from e
    report = validate(ins, tol)
    if not report.passed:
        logging.warning(f"Instrument {path} fails stochasticity: defect {report.stochasticity_defect:.3e} > {report.tolerance:.1e}")
    return LoadResult(instrument=ins, report=report, source=str(path))


def save(ins: Instrument, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(instrument_to_document(ins), indent=2), encoding="utf-8")


def rotation(phi: float) -> np.ndarray:
    return np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]], dtype=complex)


FLIP = np.array([[0, 1], [1, 0]], dtype=complex)


def _unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ParameterRangeError(f"{name} must lie in (0, 1), got {value}")
    return value


class InstrumentCatalog:
    """Library of canonical instruments exercising the (Pur)/(Erg) cases."""

    def __init__(self):
        self._builders: Dict[str, Callable[..., Instrument]] = {
            "UNI": self._uni,
            "AD": self._ad,
            "NDM": self._ndm,
            "PNDM": self._pndm,
            "DR": self._dr,
            "PROJ": self._proj,
        }

    def names(self) -> List[str]:
        return list(self._builders)

    def builtin(self, name: str, **params: Any) -> Instrument:
        """
        Build a named instrument.

        Args:
            name: one of UNI, AD, NDM, PNDM, DR, PROJ
            **params: p for AD, q for NDM/PNDM/DR, phi for DR and UNI, unitary for UNI, k for PROJ

        Raises:
            UnknownInstrument: for an unknown name
            ParameterRangeError: for out-of-range parameters
        """
        key = name.upper()
        if key not in self._builders:
            raise UnknownInstrument(f"unknown instrument '{name}', expected one of {self.names()}")
        try:
            return self._builders[key](**params)
        except TypeError as e:
            raise ParameterRangeError(f"bad parameters for {key}: {e}") from e

    @staticmethod
    def _uni(unitary: Optional[np.ndarray] = None, phi: float = 1.0) -> Instrument:
        if unitary is None:
            unitary = rotation(float(phi)) @ np.diag([1.0, np.exp(0.5j)])
        U = np.asarray(unitary, dtype=complex)
        if U.ndim != 2 or U.shape[0] != U.shape[1]:
            raise ParameterRangeError("UNI needs a square unitary")
        if not np.allclose(U.conj().T @ U, np.eye(U.shape[0]), atol=1e-12):
            raise ParameterRangeError("UNI matrix is not unitary")
        return Instrument(weights=np.ones(1), matrices=U[None], label="UNI")

    @staticmethod
    def _ad(p: float = 0.36) -> Instrument:
        p = _unit_interval("p", p)
        v1 = np.array([[1.0, 0.0], [0.0, np.sqrt(1.0 - p)]], dtype=complex)
        v2 = np.array([[0.0, np.sqrt(p)], [0.0, 0.0]], dtype=complex)
        return Instrument(weights=np.ones(2), matrices=np.stack([v1, v2]), label=f"AD(p={p:g})")

    @staticmethod
    def _dephasing(q: float) -> np.ndarray:
        a, b = np.sqrt(q), np.sqrt(1.0 - q)
        return np.stack([np.diag([a, b]), np.diag([b, a])]).astype(complex)

    def _ndm(self, q: float = 0.3) -> Instrument:
        q = _unit_interval("q", q)
        return Instrument(weights=np.ones(2), matrices=self._dephasing(q), label=f"NDM(q={q:g})")

    def _pndm(self, q: float = 0.3) -> Instrument:
        q = _unit_interval("q", q)
        V = np.einsum("ij,ajk->aik", FLIP, self._dephasing(q))
        return Instrument(weights=np.ones(2), matrices=V, label=f"PNDM(q={q:g})")

    def _dr(self, q: float = 0.3, phi: float = 1.0) -> Instrument:
        q = _unit_interval("q", q)
        V = np.einsum("ij,ajk->aik", rotation(float(phi)), self._dephasing(q))
        return Instrument(weights=np.ones(2), matrices=V, label=f"DR(q={q:g},phi={float(phi):g})")

    @staticmethod
    def _proj(k: int = 2) -> Instrument:
        k = int(k)
        if k < 2:
            raise ParameterRangeError("PROJ needs k >= 2")
        V = np.zeros((k, k, k), dtype=complex)
        for j in range(k):
            V[j, j, j] = np.sqrt(k)
        return Instrument(weights=np.full(k, 1.0 / k), matrices=V, label=f"PROJ(k={k})")


instrument_catalog = InstrumentCatalog()


def builtin(name: str, **params: Any) -> Instrument:
    return instrument_catalog.builtin(name, **params)


def parse_builtin_spec(spec: str) -> Tuple[str, Dict[str, float]]:
    """Split 'builtin:DR:q=0.3,phi=1.0' into ('DR', {'q': 0.3, 'phi': 1.0})."""
    body = spec[len(BUILTIN_PREFIX):] if spec.startswith(BUILTIN_PREFIX) else spec
    name, _, rest = body.partition(":")
    params: Dict[str, float] = {}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise InstrumentFormatError(f"expected key=value, got '{item}'", location=spec)
        try:
            params[key.strip()] = float(value)
        except ValueError as e:
            raise InstrumentFormatError(f"'{value}' is not a number", location=f"{spec}: {key}") from e
    if "k" in params:
        params["k"] = int(params["k"])
    return name.strip(), params


def instrument_from_spec(spec: str, tol: Optional[float] = None) -> LoadResult:
    """Resolve an --instrument argument: a builtin:NAME string or a file path."""
    if spec.startswith(BUILTIN_PREFIX):
        name, params = parse_builtin_spec(spec)
        ins = builtin(name, **params)
        return LoadResult(instrument=ins, report=validate(ins, tol), source=spec)
    return load(spec, tol)
