# services/sampler.py

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats as sps

from app.config import settings
from services.errors import (
    BudgetExceeded,
    DegenerateTransition,
    DimensionMismatch,
    PreconditionError,
    ProductOverflow,
)
from services.instrument import Instrument, atom_images
from services.projective import NULL_IMAGE_THRESHOLD, ProjectivePoint, canonicalize, haar_vectors
from services.rng import SAMPLER, stream

Observable = Callable[[np.ndarray], np.ndarray]

DEGENERATE_MASS = 1e-14
STOCHASTIC_SLACK = 1e-8


@dataclass(frozen=True)
class TrajectoryState:
    """State of one trajectory after n steps."""

    n: int
    point: ProjectivePoint
    sum_h: float = 0.0
    log_norm: float = 0.0
    product: Optional[np.ndarray] = None
    log_scale: float = 0.0

    @classmethod
    def start(cls, point: ProjectivePoint, track_product: bool = False) -> "TrajectoryState":
        product = np.eye(point.dim, dtype=complex) if track_product else None
        return cls(n=0, point=point, product=product)

    def log_op_norm(self) -> float:
        if self.product is None:
            raise PreconditionError("product is not tracked")
        return float(np.log(np.linalg.norm(self.product, 2)) + self.log_scale)


def _choose(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """
    Inverse-CDF choice per row, u in (0, 1].

    Takes the first index whose cumulative mass reaches u, so zero-mass atoms are never chosen.
    """
    total = probs.sum(axis=1)
    if np.any(total < DEGENERATE_MASS):
        raise DegenerateTransition("all transition weights vanish at some state")
    if np.any(np.abs(total - 1.0) > STOCHASTIC_SLACK):
        worst = float(np.max(np.abs(total - 1.0)))
        raise PreconditionError(f"transition weights sum to 1 +/- {worst:.2e}; instrument is not stochastic")
    cumulative = np.cumsum(probs, axis=1) / total[:, None]
    choice = (cumulative < u[:, None]).sum(axis=1)
    last_alive = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(choice, last_alive)


def step(ins: Instrument, state: TrajectoryState, rng: np.random.Generator,
         h: Optional[Observable] = None) -> TrajectoryState:
    """
    One transition: atom i with probability w_i |v_i x|^2, then x <- v_i . x.

    Raises:
        DegenerateTransition: all transition weights below 1e-14
    """
    if state.point.dim != ins.dim:
        raise DimensionMismatch(f"instrument is {ins.dim}-dimensional, state is {state.point.dim}-dimensional")
    images, norms2 = atom_images(ins, state.point.vector)
    probs = ins.weights[None, :] * norms2
    u = np.array([1.0 - rng.random()])
    i = int(_choose(probs, u)[0])
    norm = float(np.sqrt(norms2[0, i]))
    point = ProjectivePoint(images[0, i] / norm)
    sum_h = state.sum_h + (float(np.real(h(point.vector[None])[0])) if h is not None else 0.0)
    product, log_scale = state.product, state.log_scale
    if product is not None:
        product = ins.matrices[i] @ product
        scale = float(np.max(np.abs(product)))
        if not np.isfinite(scale) or scale <= 0:
            raise ProductOverflow(f"product scale {scale} at step {state.n + 1}")
        product = product / scale
        log_scale += float(np.log(scale))
    return TrajectoryState(n=state.n + 1, point=point, sum_h=sum_h, log_norm=state.log_norm + float(np.log(norm)),
                           product=product, log_scale=log_scale)


class RunConfig(BaseModel):
    """Ensemble parameters; the initial law nu is fixed, Haar, or an explicit sample."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    n_steps: int = Field(ge=1)
    n_traj: int = Field(ge=1)
    seed: int = 0
    initial_kind: Literal["fixed", "haar", "samples"] = "haar"
    initial_point: Optional[List[Tuple[float, float]]] = None
    initial_samples: Optional[Any] = Field(default=None, exclude=True)
    track_product: bool = False
    burn_in: int = Field(default=0, ge=0)
    observable: Optional[Any] = Field(default=None, exclude=True)
    checkpoints: List[int] = Field(default_factory=list)
    occupation_stride: Optional[int] = Field(default=None, ge=1)
    record_occupation: bool = True
    threads: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.burn_in >= self.n_steps:
            raise ValueError("burn_in must be smaller than n_steps")
        if self.initial_kind == "fixed" and self.initial_point is None:
            raise ValueError("initial_kind 'fixed' needs initial_point")
        if self.initial_kind == "samples" and self.initial_samples is None:
            raise ValueError("initial_kind 'samples' needs initial_samples")
        if any(c < 1 or c > self.n_steps for c in self.checkpoints):
            raise ValueError("checkpoints must lie in [1, n_steps]")
        return self

    @property
    def stride(self) -> int:
        return self.occupation_stride or max(1, self.n_steps // 1000)

    @classmethod
    def from_point(cls, point: ProjectivePoint, **kwargs: Any) -> "RunConfig":
        return cls(initial_kind="fixed", initial_point=point.to_json(), **kwargs)


@dataclass
class EnsembleStats:
    """Per-trajectory terminal values, checkpoints and the occupation sample."""

    n_steps: int
    burn_in: int
    sum_h: np.ndarray
    log_norm: np.ndarray
    terminal_points: np.ndarray
    burn_sum_h: np.ndarray
    burn_log_norm: np.ndarray
    log_op_norm: Optional[np.ndarray] = None
    checkpoint_steps: List[int] = field(default_factory=list)
    checkpoint_sum_h: Optional[np.ndarray] = None
    checkpoint_log_norm: Optional[np.ndarray] = None
    checkpoint_log_op_norm: Optional[np.ndarray] = None
    occupation_points: Optional[np.ndarray] = None
    occupation_traj: Optional[np.ndarray] = None

    @property
    def n_traj(self) -> int:
        return int(self.sum_h.shape[0])

    @property
    def occupation_weights(self) -> np.ndarray:
        count = 0 if self.occupation_points is None else self.occupation_points.shape[0]
        return np.full(count, 1.0 / count) if count else np.zeros(0)

    def checkpoint(self, n: int, quantity: str = "sum_h") -> np.ndarray:
        if n not in self.checkpoint_steps:
            raise PreconditionError(f"step {n} was not recorded as a checkpoint")
        table = getattr(self, f"checkpoint_{quantity}")
        if table is None:
            raise PreconditionError(f"checkpoint quantity {quantity} was not recorded")
        return table[self.checkpoint_steps.index(n)]

    def summary(self) -> Dict[str, Any]:
        n = self.n_steps
        M = self.n_traj

        def describe(values: np.ndarray) -> Dict[str, float]:
            spread = float(np.var(values, ddof=1)) if M > 1 else 0.0
            return {"mean": float(np.mean(values)), "var": spread, "stderr": float(np.sqrt(spread / M))}

        out = {
            "n_steps": n,
            "n_traj": M,
            "burn_in": self.burn_in,
            "S_n_over_n": describe(self.sum_h / n),
            "log_norm_over_n": describe(self.log_norm / n),
            "occupation_size": 0 if self.occupation_points is None else int(self.occupation_points.shape[0]),
        }
        if self.log_op_norm is not None:
            out["log_op_norm_over_n"] = describe(self.log_op_norm / n)
        return out

    def trajectory_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for j in range(self.n_traj):
            row = {"traj": j, "S_n": self.sum_h[j], "log_norm": self.log_norm[j]}
            if self.log_op_norm is not None:
                row["log_op_norm"] = self.log_op_norm[j]
            rows.append(row)
        return rows


def _initial_vectors(ins: Instrument, cfg: RunConfig, start: int, count: int) -> np.ndarray:
    k = ins.dim
    if cfg.initial_kind == "fixed":
        x0 = ProjectivePoint.from_json(cfg.initial_point)
        if x0.dim != k:
            raise DimensionMismatch(f"initial point is {x0.dim}-dimensional, instrument is {k}-dimensional")
        return np.tile(x0.vector, (count, 1))
    rows = []
    samples = None if cfg.initial_kind == "haar" else np.atleast_2d(np.asarray(cfg.initial_samples, dtype=complex))
    if samples is not None and samples.shape[-1] != k:
        raise DimensionMismatch(f"initial samples are {samples.shape[-1]}-dimensional, instrument is {k}-dimensional")
    for j in range(start, start + count):
        rng = stream(cfg.seed, SAMPLER, j, 1)
        if samples is None:
            rows.append(haar_vectors(k, 1, rng)[0])
        else:
            rows.append(samples[rng.integers(samples.shape[0])])
    return canonicalize(np.array(rows))


def advance(ins: Instrument, X: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One vectorized transition for a stack of unit representatives.

    Returns:
        Tuple: (next unit representatives, |v_i x| of the chosen atoms, chosen atom indices)
    """
    images, norms2 = atom_images(ins, X)
    choice = _choose(ins.weights[None, :] * norms2, u)
    rows = np.arange(X.shape[0])
    norms = np.sqrt(norms2[rows, choice])
    return images[rows, choice] / norms[:, None], norms, choice


def _run_block(ins: Instrument, cfg: RunConfig, start: int, count: int, quota: int) -> Dict[str, Any]:
    k = ins.dim
    n = cfg.n_steps
    h = cfg.observable
    X = _initial_vectors(ins, cfg, start, count)
    rngs = [stream(cfg.seed, SAMPLER, j, 0) for j in range(start, start + count)]
    block = settings.step_block
    uniforms = np.empty((count, block))

    sum_h = np.zeros(count)
    log_norm = np.zeros(count)
    burn_sum_h = np.zeros(count)
    burn_log_norm = np.zeros(count)
    product = np.broadcast_to(np.eye(k, dtype=complex), (count, k, k)).copy() if cfg.track_product else None
    log_scale = np.zeros(count)
    checkpoints = sorted(set(cfg.checkpoints))
    ck_sum = np.zeros((len(checkpoints), count))
    ck_log = np.zeros((len(checkpoints), count))
    ck_op = np.zeros((len(checkpoints), count)) if cfg.track_product else None
    occupation: List[np.ndarray] = []
    occupation_traj: List[np.ndarray] = []
    recorded = 0
    rows = np.arange(count)

    for t in range(1, n + 1):
        slot = (t - 1) % block
        if slot == 0:
            for j, rng in enumerate(rngs):
                uniforms[j] = rng.random(block)
        X, norms, choice = advance(ins, X, 1.0 - uniforms[:, slot])
        log_norm += np.log(norms)
        if h is not None:
            sum_h += np.real(h(X))
        if product is not None:
            product = np.einsum("bij,bjk->bik", ins.matrices[choice], product)
            scale = np.max(np.abs(product).reshape(count, -1), axis=1)
            if not np.all(np.isfinite(scale)) or np.any(scale <= NULL_IMAGE_THRESHOLD):
                raise ProductOverflow(f"product rescaling failed at step {t}")
            product /= scale[:, None, None]
            log_scale += np.log(scale)
        if t == cfg.burn_in:
            burn_sum_h[:] = sum_h
            burn_log_norm[:] = log_norm
        if t in checkpoints:
            c = checkpoints.index(t)
            ck_sum[c] = sum_h
            ck_log[c] = log_norm
            if ck_op is not None:
                ck_op[c] = np.log(np.linalg.norm(product, ord=2, axis=(1, 2))) + log_scale
        if (cfg.record_occupation and t > cfg.burn_in and (t - cfg.burn_in) % cfg.stride == 0
                and recorded < quota):
            occupation.append(canonicalize(X))
            occupation_traj.append(rows + start)
            recorded += 1

    log_op_norm = None
    if product is not None:
        log_op_norm = np.log(np.linalg.norm(product, ord=2, axis=(1, 2))) + log_scale
    return {
        "sum_h": sum_h,
        "log_norm": log_norm,
        "terminal_points": canonicalize(X),
        "burn_sum_h": burn_sum_h,
        "burn_log_norm": burn_log_norm,
        "log_op_norm": log_op_norm,
        "ck_sum": ck_sum,
        "ck_log": ck_log,
        "ck_op": ck_op,
        "occupation": np.concatenate(occupation) if occupation else np.zeros((0, k), dtype=complex),
        "occupation_traj": np.concatenate(occupation_traj) if occupation_traj else np.zeros(0, dtype=int),
    }


def run(ins: Instrument, cfg: RunConfig) -> EnsembleStats:
    """
    Simulate cfg.n_traj independent trajectories.

    Each trajectory j draws from its own stream keyed by (seed, j), so the
    ensemble is bit-identical for any block size or worker count.
    """
    threads = cfg.threads or settings.threads
    size = settings.block_size
    starts = list(range(0, cfg.n_traj, size))
    quota = max(1, settings.occupation_limit // cfg.n_traj)
    logging.info(f"Simulating {cfg.n_traj} trajectories x {cfg.n_steps} steps of {ins.label} "
                 f"in {len(starts)} blocks")

    def work(start: int) -> Dict[str, Any]:
        return _run_block(ins, cfg, start, min(size, cfg.n_traj - start), quota)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    def join(key: str, axis: int = 0) -> Optional[np.ndarray]:
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts], axis=axis)

    occupation = join("occupation")
    occupation_traj = join("occupation_traj")
    if occupation is not None and occupation.shape[0]:
        # Trajectory-major, recording order within a trajectory; independent of blocking.
        order = np.lexsort((occupation_traj,))
        occupation, occupation_traj = occupation[order], occupation_traj[order]
    return EnsembleStats(
        n_steps=cfg.n_steps,
        burn_in=cfg.burn_in,
        sum_h=join("sum_h"),
        log_norm=join("log_norm"),
        terminal_points=join("terminal_points"),
        burn_sum_h=join("burn_sum_h"),
        burn_log_norm=join("burn_log_norm"),
        log_op_norm=join("log_op_norm"),
        checkpoint_steps=sorted(set(cfg.checkpoints)),
        checkpoint_sum_h=join("ck_sum", axis=1),
        checkpoint_log_norm=join("ck_log", axis=1),
        checkpoint_log_op_norm=join("ck_op", axis=1),
        occupation_points=occupation if cfg.record_occupation else None,
        occupation_traj=occupation_traj if cfg.record_occupation else None,
    )


class Outcome(NamedTuple):
    prob: float
    point: ProjectivePoint
    sum_h: float
    log_norm: float
    log_op_norm: Optional[float]


@dataclass
class Enumeration:
    """All length-n branches with positive probability, as arrays."""

    prob: np.ndarray
    points: np.ndarray
    sum_h: np.ndarray
    log_norm: np.ndarray
    log_op_norm: Optional[np.ndarray] = None

    def expectation(self, values: np.ndarray) -> float:
        return float(np.sum(self.prob * values))

    def outcomes(self) -> List[Outcome]:
        ops = self.log_op_norm if self.log_op_norm is not None else [None] * len(self.prob)
        return [Outcome(float(p), ProjectivePoint(x), float(s), float(l), None if o is None else float(o))
                for p, x, s, l, o in zip(self.prob, self.points, self.sum_h, self.log_norm, ops)]


def enumerate_branches(ins: Instrument, x0: ProjectivePoint, n: int, h: Optional[Observable] = None,
                       track_product: bool = False) -> Enumeration:
    """
    Exact law of (x_n, S_n, log|W_n x0|) by expanding every atom sequence.

    Branches whose image vanishes carry probability 0 and are pruned.

    Raises:
        BudgetExceeded: when atoms^n exceeds settings.enumeration_budget
    """
    a = ins.n_atoms
    if float(a) ** n > settings.enumeration_budget:
        raise BudgetExceeded(f"{a}^{n} branches exceed the enumeration budget {settings.enumeration_budget}")
    if x0.dim != ins.dim:
        raise DimensionMismatch(f"initial point is {x0.dim}-dimensional, instrument is {ins.dim}-dimensional")
    k = ins.dim
    X = x0.vector[None].copy()
    prob = np.ones(1)
    sum_h = np.zeros(1)
    log_norm = np.zeros(1)
    product = np.eye(k, dtype=complex)[None] if track_product else None
    for _ in range(n):
        images, norms2 = atom_images(ins, X)
        alive = np.sqrt(norms2) > NULL_IMAGE_THRESHOLD
        parent, atom = np.nonzero(alive)
        norms = np.sqrt(norms2[parent, atom])
        X = images[parent, atom] / norms[:, None]
        prob = prob[parent] * ins.weights[atom] * norms2[parent, atom]
        log_norm = log_norm[parent] + np.log(norms)
        sum_h = sum_h[parent] + (np.real(h(X)) if h is not None else 0.0)
        if product is not None:
            product = np.einsum("bij,bjk->bik", ins.matrices[atom], product[parent])
    log_op_norm = None
    if product is not None:
        log_op_norm = np.log(np.linalg.norm(product, ord=2, axis=(1, 2)))
    return Enumeration(prob=prob, points=canonicalize(X), sum_h=sum_h, log_norm=log_norm, log_op_norm=log_op_norm)


def enumerate_exact(ins: Instrument, x0: ProjectivePoint, n: int, h: Optional[Observable] = None,
                    track_product: bool = False) -> List[Outcome]:
    """List of (prob, x_n, S_n, log|W_n x0|, log|W_n|) over all branches."""
    return enumerate_branches(ins, x0, n, h, track_product).outcomes()


def lyapunov_estimate(ins: Instrument, cfg: RunConfig, stats: Optional[EnsembleStats] = None) -> Tuple[float, float]:
    """
    Time-average estimate of gamma from log|W_n x| increments after burn-in.

    Returns:
        Tuple[float, float]: (mean over trajectories, standard error)
    """
    if cfg.n_steps < 10 * cfg.burn_in:
        raise PreconditionError("lyapunov_estimate needs n_steps >= 10 * burn_in")
    stats = run(ins, cfg) if stats is None else stats
    rates = (stats.log_norm - stats.burn_log_norm) / (cfg.n_steps - cfg.burn_in)
    stderr = float(np.std(rates, ddof=1) / np.sqrt(rates.size)) if rates.size > 1 else 0.0
    return float(np.mean(rates)), stderr


def op_norm_log(ins: Instrument, cfg: RunConfig, stats: Optional[EnsembleStats] = None) -> np.ndarray:
    """Per-trajectory log|W_n| from the tracked, rescaled product."""
    if not cfg.track_product:
        raise PreconditionError("op_norm_log needs track_product = true")
    stats = run(ins, cfg) if stats is None else stats
    if stats.log_op_norm is None or not np.all(np.isfinite(stats.log_op_norm)):
        raise ProductOverflow("log|W_n| is not finite")
    return stats.log_op_norm


def stationarity_check(ins: Instrument, sample: np.ndarray, n_chains: int, seed: int,
                       h: Optional[Observable] = None, alpha: float = 1e-3) -> Dict[str, Any]:
    """
    Compare (atom, x_1) with (atom, x_2) for chains started from an occupation sample.

    Atom frequencies are compared with a chi-square contingency test and the
    means of h with a two-sample z statistic.
    """
    sample = np.atleast_2d(np.asarray(sample, dtype=complex))
    rng = stream(seed, SAMPLER, 2**31, 0)
    X0 = sample[rng.integers(sample.shape[0], size=n_chains)]
    X1, _, atom1 = advance(ins, X0, 1.0 - rng.random(n_chains))
    X2, _, atom2 = advance(ins, X1, 1.0 - rng.random(n_chains))
    a = ins.n_atoms
    table = np.array([np.bincount(atom1, minlength=a), np.bincount(atom2, minlength=a)])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] > 1:
        _, p_value, _, _ = sps.chi2_contingency(table)
    else:
        p_value = 1.0
    z = 0.0
    if h is not None:
        f1, f2 = np.real(h(X1)), np.real(h(X2))
        spread = np.sqrt((np.var(f1, ddof=1) + np.var(f2, ddof=1)) / n_chains)
        z = float((f1.mean() - f2.mean()) / spread) if spread > 0 else 0.0
    passed = bool(p_value > alpha and abs(z) < 4.0)
    return {"chi2_p_value": float(p_value), "mean_z": z, "pass": passed, "counts": table.tolist()}
