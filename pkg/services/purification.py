# services/purification.py

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.config import settings
from services.errors import BudgetExceeded, DegenerateTransition, PreconditionError
from services.instrument import Instrument
from services.projective import op_norm, wedge2
from services.rng import PURIFICATION, stream

ZERO_WEDGE = 1e-300


@dataclass
class GSeries:
    """g(1..N) with the method used for each value and the fitted decay."""

    n: List[int]
    values: List[float]
    stderr: List[float] = field(default_factory=list)
    method: str = "exact"
    lambda_hat: Optional[float] = None
    decaying: Optional[bool] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "values": self.values,
            "stderr": self.stderr,
            "method": self.method,
            "lambda_hat": self.lambda_hat,
            "decaying": self.decaying,
        }


def _wedge_norms(W2: np.ndarray) -> np.ndarray:
    if W2.shape[-1] == 1:
        return np.abs(W2[..., 0, 0])
    return op_norm(W2)


def _subtree_sum(W2: np.ndarray, weights: np.ndarray, atoms: np.ndarray, atom_weights: np.ndarray,
                 remaining: int, chunk: int) -> float:
    """
    Sum of prod(w) |wedge2(W_n)| over all continuations of the given prefixes.

    Prefixes whose wedge vanishes are pruned: every continuation vanishes too.
    """
    a = atoms.shape[0]
    while remaining > 0:
        alive = _wedge_norms(W2) > ZERO_WEDGE
        W2, weights = W2[alive], weights[alive]
        if W2.shape[0] == 0:
            return 0.0
        if W2.shape[0] * a > chunk and W2.shape[0] > 1:
            return sum(_subtree_sum(W2[i:i + 1], weights[i:i + 1], atoms, atom_weights, remaining, chunk)
                       for i in range(W2.shape[0]))
        W2 = np.einsum("aij,mjk->maik", atoms, W2).reshape(-1, *W2.shape[1:])
        weights = (weights[:, None] * atom_weights[None, :]).reshape(-1)
        remaining -= 1
    return float(np.sum(weights * _wedge_norms(W2)))


def g_exact(ins: Instrument, n: int, threads: Optional[int] = None) -> float:
    """
    Exact g(n) = sum over index sequences of prod(w) |wedge2(v_in ... v_i1)|.

    Args:
        ins: instrument (k >= 2)
        n: product length
        threads: worker cap; leading atoms are distributed across workers

    Raises:
        BudgetExceeded: when atoms^n exceeds settings.g_exact_budget
    """
    if n < 1:
        raise PreconditionError("g(n) needs n >= 1")
    a = ins.n_atoms
    if float(a) ** n > settings.g_exact_budget:
        raise BudgetExceeded(f"{a}^{n} sequences exceed the exact budget {settings.g_exact_budget}")
    atoms = wedge2(ins.matrices)
    threads = settings.threads if threads is None else threads
    chunk = max(settings.mc_chunk, a)

    def leading(i: int) -> float:
        return _subtree_sum(atoms[i:i + 1], ins.weights[i:i + 1], atoms, ins.weights, n - 1, chunk)

    if threads > 1 and a > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(leading, range(a)))
    else:
        parts = [leading(i) for i in range(a)]
    return float(sum(parts))


def _mc_chunk(ins: Instrument, n: int, size: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Sum and sum of squares of the trace-tilted estimator over one chunk."""
    k = ins.dim
    V = ins.matrices
    W = np.broadcast_to(np.eye(k, dtype=complex) / np.sqrt(k), (size, k, k)).copy()
    rows = np.arange(size)
    for _ in range(n):
        candidates = np.einsum("aij,mjk->maik", V, W)
        fro2 = np.einsum("maij,maij->ma", candidates.conj(), candidates).real
        mass = ins.weights[None, :] * fro2
        total = mass.sum(axis=1)
        if np.any(total < 1e-14):
            raise DegenerateTransition("trace-tilted propagation has zero total weight")
        cumulative = np.cumsum(mass / total[:, None], axis=1)
        u = rng.random(size)
        choice = np.minimum((cumulative < u[:, None]).sum(axis=1), ins.n_atoms - 1)
        W = candidates[rows, choice] / np.sqrt(fro2[rows, choice])[:, None, None]
    estimator = k * _wedge_norms(wedge2(W))
    return float(np.sum(estimator)), float(np.sum(estimator ** 2))


def g_mc(ins: Instrument, n: int, samples: int, seed: int, threads: Optional[int] = None) -> Tuple[float, float]:
    """
    Monte Carlo estimate of g(n) under the trace-tilted path measure.

    Paths are drawn with step probabilities w_i |v_i W|_F^2 / |W|_F^2 and
    weighted by k |wedge2(W_n)| / |W_n|_F^2. Chunks have fixed size and their
    own stream keyed by (seed, chunk), so the result does not depend on threads.

    Returns:
        Tuple[float, float]: (estimate, standard error)
    """
    if samples < 100:
        raise PreconditionError("g_mc needs at least 100 samples")
    if n < 1:
        raise PreconditionError("g(n) needs n >= 1")
    threads = settings.threads if threads is None else threads
    chunk = settings.mc_chunk
    sizes = [min(chunk, samples - start) for start in range(0, samples, chunk)]

    def run_chunk(index: int) -> Tuple[float, float]:
        return _mc_chunk(ins, n, sizes[index], stream(seed, PURIFICATION, n, index))

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, range(len(sizes))))
    else:
        parts = [run_chunk(i) for i in range(len(sizes))]
    total = sum(p[0] for p in parts)
    squares = sum(p[1] for p in parts)
    mean = total / samples
    variance = max(squares / samples - mean ** 2, 0.0) * samples / (samples - 1)
    return mean, float(np.sqrt(variance / samples))


def g_series(ins: Instrument, n_max: int, mc_samples: int = 0, seed: int = 0,
             threads: Optional[int] = None) -> GSeries:
    """g(1..n_max): exact while the budget allows, Monte Carlo beyond (or everywhere when mc_samples > 0 and exact fails)."""
    values, errors, methods = [], [], set()
    for n in range(1, n_max + 1):
        try:
            values.append(g_exact(ins, n, threads))
            errors.append(0.0)
            methods.add("exact")
        except BudgetExceeded:
            if mc_samples < 100:
                raise
            estimate, stderr = g_mc(ins, n, mc_samples, seed, threads)
            values.append(estimate)
            errors.append(stderr)
            methods.add("mc")
    method = methods.pop() if len(methods) == 1 else "mixed"
    return GSeries(n=list(range(1, n_max + 1)), values=values, stderr=errors, method=method)


def pur_diagnostic(series: GSeries) -> Dict[str, Any]:
    """
    Fit log g(n) = c + n log(lambda) on the tail half of the series.

    decaying holds when lambda_hat < 1 - 3 stderr(lambda_hat). A series that
    reaches 0 is decaying with lambda_hat = 0.

    Raises:
        PreconditionError: fewer than 6 values, or negative values
    """
    values = np.asarray(series.values, dtype=float)
    n = np.asarray(series.n, dtype=float)
    if values.size < 6:
        raise PreconditionError("pur_diagnostic needs at least 6 values")
    if np.any(values < 0):
        raise PreconditionError("g values must be nonnegative")
    if np.any(values <= ZERO_WEDGE):
        series.lambda_hat, series.decaying = 0.0, True
        return {"decaying": True, "lambda_hat": 0.0, "stderr": 0.0}

    tail = slice(values.size // 2, None)
    x, y = n[tail], np.log(values[tail])
    coeffs, cov = np.polyfit(x, y, 1, cov="unscaled")
    residuals = y - np.polyval(coeffs, x)
    dof = max(x.size - 2, 1)
    sigma2 = float(residuals @ residuals) / dof
    slope_se = float(np.sqrt(max(cov[0, 0] * sigma2, 0.0)))
    lambda_hat = float(np.exp(coeffs[0]))
    stderr = lambda_hat * slope_se
    decaying = lambda_hat < 1 - 3 * stderr and lambda_hat < 1 - 1e-12
    series.lambda_hat, series.decaying = lambda_hat, bool(decaying)
    return {"decaying": bool(decaying), "lambda_hat": lambda_hat, "stderr": stderr}


def pur_necessary_check(ins: Instrument, length: int = 8, threads: Optional[int] = None) -> Dict[str, Any]:
    """
    Three-valued (Pur) verdict.

    fails: every w_i v_i* v_i is proportional to Id, so Id itself is a witness
    projector of rank k on which all products act conformally.
    holds: the exact g series of the given length decays (heuristic).
    inconclusive: otherwise.
    """
    k = ins.dim
    grams = np.einsum("a,aji,ajk->aik", ins.weights, ins.matrices.conj(), ins.matrices)
    scales = np.trace(grams, axis1=1, axis2=2).real / k
    conformal = np.allclose(grams, scales[:, None, None] * np.eye(k)[None], atol=1e-10)
    if conformal:
        logging.info(f"Instrument {ins.label}: every atom is conformal, (Pur) fails")
        return {"verdict": "fails", "witness": "Id", "heuristic": False}

    series = g_series(ins, length, threads=threads)
    diagnostic = pur_diagnostic(series)
    if diagnostic["decaying"]:
        verdict = "holds"
    else:
        verdict = "inconclusive"
    logging.info(f"Instrument {ins.label}: (Pur) {verdict}, lambda_hat {diagnostic['lambda_hat']:.6g}")
    return {
        "verdict": verdict,
        "witness": None,
        "heuristic": True,
        "lambda_hat": diagnostic["lambda_hat"],
        "series": series.values,
    }
