import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from services.channel import ConstantObservable, QuadraticObservable, erg_check, period_and_cycles
from services.errors import BudgetExceeded, PreconditionError, QTrajError
from services.instrument import Instrument, LoadResult, instrument_from_document, instrument_from_spec, validate
from services.limits import (
    berry_esseen_scan,
    clt_check,
    default_threshold,
    gamma_estimates,
    ineqlog_scan,
    ldp_check,
    legendre_transform,
    log_moment,
    scalar_f_checks,
    spectral_curve,
    threshold_curve,
)
from services.operator import Mesh, build_mesh, discretize, leading_spectrum
from services.projective import basis_point, haar_vectors, matrix_from_json
from services.purification import g_exact, g_mc, pur_diagnostic, pur_necessary_check, GSeries
from services.rng import SCAN, stream
from services.sampler import RunConfig, run

COMMANDS = [
    "validate", "analyze-channel", "purification", "simulate", "spectrum", "scgf",
    "clt", "berry-esseen", "ldp", "lyapunov", "scalar-checks",
]


class ExperimentConfig(BaseModel):
    """Everything needed to reproduce one run: resolved command parameters, seed and overrides."""

    model_config = ConfigDict(extra="forbid")

    command: str
    instrument: Optional[str] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    tol: float = Field(default_factory=lambda: settings.tol, gt=0)
    out: Optional[str] = None

    def param(self, name: str, default: Any = None) -> Any:
        value = self.params.get(name)
        return default if value is None else value


def resolve_instrument(cfg: ExperimentConfig, document: Optional[Dict[str, Any]] = None) -> LoadResult:
    """Instrument from an inline document, a builtin:NAME string or a file path."""
    if document is not None:
        ins = instrument_from_document(document)
        return LoadResult(instrument=ins, report=validate(ins, cfg.tol), source="inline")
    if not cfg.instrument:
        raise PreconditionError(f"{cfg.command} needs an instrument")
    return instrument_from_spec(cfg.instrument, cfg.tol)


def load_observable(spec: Optional[str], k: int) -> Optional[Callable[[np.ndarray], np.ndarray]]:
    """
    Parse an observable argument.

    quad:FILE reads a JSON matrix of [re, im] pairs, diag:a,b,... builds a
    diagonal quadratic form, const:c a constant function.
    """
    if not spec:
        return None
    kind, _, body = spec.partition(":")
    if kind == "const":
        return ConstantObservable(float(body), name=spec)
    if kind == "diag":
        entries = [float(v) for v in body.split(",")]
        if len(entries) != k:
            raise PreconditionError(f"diag observable has {len(entries)} entries for dimension {k}")
        return QuadraticObservable(np.diag(entries).astype(complex), name=spec)
    if kind == "quad":
        A = matrix_from_json(json.loads(Path(body).read_text(encoding="utf-8")))
        if A.shape[0] != k:
            raise PreconditionError(f"observable is {A.shape[0]}x{A.shape[0]}, instrument dimension is {k}")
        return QuadraticObservable(A, name=spec)
    raise PreconditionError(f"unknown observable '{spec}' (quad:FILE, diag:a,b,... or const:c)")


def observable_input(spec: Optional[str]) -> List[str]:
    if spec and spec.startswith("quad:"):
        return [spec[len("quad:"):]]
    return []


def _mesh(ins: Instrument, cfg: ExperimentConfig) -> Mesh:
    kind = cfg.param("mesh_kind", "fibonacci" if ins.dim == 2 else "haar")
    return build_mesh(ins.dim, int(cfg.param("mesh_size", 400)), kind, cfg.seed)


def _result(report: Dict[str, Any], tables: Optional[Dict[str, List[Dict[str, Any]]]] = None,
            passed: Optional[bool] = None, name: str = "report") -> Dict[str, Any]:
    out = {"status": "success", "report": report, "report_name": name, "tables": tables or {}}
    if passed is not None:
        out["pass"] = bool(passed)
    return out


def process_validate(cfg: ExperimentConfig, run_id: str, document: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    loaded = resolve_instrument(cfg, document)
    ins = loaded.instrument
    logging.info(f"Run {run_id}: stochasticity defect {loaded.report.stochasticity_defect:.3e}")
    report = {
        "label": ins.label,
        "dim": ins.dim,
        "n_atoms": ins.n_atoms,
        **loaded.report.model_dump(),
        "moments": log_moment(ins),
    }
    return _result(report, passed=loaded.report.passed, name="validation")


def process_analyze_channel(cfg: ExperimentConfig, run_id: str,
                            document: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    ins = resolve_instrument(cfg, document).instrument
    tol = cfg.param("channel_tol", settings.channel_tol)
    erg = erg_check(ins, tol)
    report: Dict[str, Any] = {"erg": erg.to_dict(), "period": None, "cycles": [], "defects": None}
    if erg.holds:
        cd = period_and_cycles(ins, tol)
        logging.info(f"Run {run_id}: period {cd.m}")
        decomposition = cd.to_dict()
        report.update(period=cd.m, cycles=decomposition["cycles"],
                      peripheral_eigenvalues=decomposition["peripheral_eigenvalues"], defects=cd.defects(ins))
    else:
        logging.info(f"Run {run_id}: (Erg) fails, fixed space dimension {erg.fixed_space_dim}")
    return _result(report, name="channel")


def process_purification(cfg: ExperimentConfig, run_id: str,
                         document: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    ins = resolve_instrument(cfg, document).instrument
    n_max = int(cfg.param("nmax", 10))
    mc_samples = int(cfg.param("mc_samples", 0))
    rows, values = [], []
    for n in range(1, n_max + 1):
        row: Dict[str, Any] = {"n": n, "g_exact": None, "g_mc": None, "stderr": None}
        try:
            row["g_exact"] = g_exact(ins, n, cfg.threads)
        except BudgetExceeded as e:
            logging.info(f"Run {run_id}: {e}")
        if mc_samples >= 100:
            row["g_mc"], row["stderr"] = g_mc(ins, n, mc_samples, cfg.seed, cfg.threads)
        value = row["g_exact"] if row["g_exact"] is not None else row["g_mc"]
        if value is None:
            raise BudgetExceeded(f"g({n}) exceeds the exact budget and no Monte Carlo samples were requested")
        values.append(value)
        rows.append(row)
    series = GSeries(n=list(range(1, n_max + 1)), values=values)
    report: Dict[str, Any] = {}
    if n_max >= 6:
        report["diagnostic"] = pur_diagnostic(series)
    report["series"] = series.to_dict()
    report["pur"] = pur_necessary_check(ins, threads=cfg.threads)
    return _result(report, tables={"purification": rows}, name="purification")


def _run_config(ins: Instrument, cfg: ExperimentConfig, **overrides: Any) -> RunConfig:
    fields: Dict[str, Any] = dict(
        n_steps=int(cfg.param("steps", 1000)),
        n_traj=int(cfg.param("traj", 1000)),
        seed=cfg.seed,
        burn_in=int(cfg.param("burn_in", 0)),
        track_product=bool(cfg.param("track_product", False)),
        threads=cfg.threads,
    )
    fields.update(overrides)
    initial = cfg.param("initial_basis")
    if initial is not None:
        fields.update(initial_kind="fixed", initial_point=basis_point(ins.dim, int(initial)).to_json())
    return RunConfig(**fields)


def process_simulate(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    ins = resolve_instrument(cfg).instrument
    h = load_observable(cfg.param("observable"), ins.dim)
    run_cfg = _run_config(ins, cfg, observable=h)
    stats = run(ins, run_cfg)
    rows = stats.trajectory_rows()
    for row, x in zip(rows, stats.terminal_points):
        for i, c in enumerate(x):
            row[f"x{i}_re"], row[f"x{i}_im"] = float(c.real), float(c.imag)
    return _result(stats.summary(), tables={"trajectories": rows}, name="summary")


def process_spectrum(cfg: ExperimentConfig, run_id: str, document: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    ins = resolve_instrument(cfg, document).instrument
    mesh = _mesh(ins, cfg)
    spectrum = leading_spectrum(discretize(ins, mesh), int(cfg.param("count", 6)))
    report = {"mesh_size": mesh.size, "mesh_kind": mesh.kind, **spectrum.to_dict()}
    return _result(report, name="spectrum")


def process_scgf(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    ins = resolve_instrument(cfg).instrument
    family = cfg.param("tilt", "obs")
    h = load_observable(cfg.param("observable"), ins.dim)
    curve = spectral_curve(ins, _mesh(ins, cfg), family, cfg.param("grid"), h=h, threads=cfg.threads)
    logging.info(f"Run {run_id}: curve derivatives d1 {curve.d1:.6g}, d2 {curve.d2:.6g}")
    return _result(curve.to_dict(), tables={"scgf": curve.to_rows()}, name="curve")


def _normalized(values: np.ndarray, n: int) -> Tuple[np.ndarray, float]:
    sigma2 = float(np.var(values, ddof=1) / n) if values.size > 1 else 0.0
    return (values - values.mean()) / np.sqrt(n), sigma2


def process_clt(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    ins = resolve_instrument(cfg).instrument
    mode = cfg.param("mode", "observable")
    h = load_observable(cfg.param("observable"), ins.dim)
    if mode == "observable" and h is None:
        raise PreconditionError("clt in observable mode needs --observable")
    run_cfg = _run_config(ins, cfg, observable=h, record_occupation=False)
    stats = run(ins, run_cfg)
    values = stats.sum_h if mode == "observable" else stats.log_norm
    samples, sigma2 = _normalized(values, run_cfg.n_steps)
    report = clt_check(samples, sigma2, alpha=float(cfg.param("alpha", 0.01)), n=run_cfg.n_steps)
    logging.info(f"Run {run_id}: KS {report.ks:.4g} against critical {report.critical:.4g}")
    rows = [{"traj": j, "statistic": float(v)} for j, v in enumerate(samples)]
    return _result({"mode": mode, **report.to_dict()}, tables={"clt_samples": rows}, passed=report.passed,
                   name="verdict")


def process_berry_esseen(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    mode = cfg.param("mode", "observable")
    ins = None if mode == "coin" else resolve_instrument(cfg).instrument
    h = load_observable(cfg.param("observable"), ins.dim) if ins is not None else None
    scan = berry_esseen_scan(ins, mode, cfg.param("n_list", [100, 400, 1600, 6400]), int(cfg.param("traj", 2000)),
                             cfg.seed, h=h, threads=cfg.threads)
    rows = scan.pop("rows")
    passed = scan["pass"]
    return _result(scan, tables={"berry_esseen": rows}, passed=passed, name="verdict")


def process_ldp(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    ins = resolve_instrument(cfg).instrument
    mode = cfg.param("mode", "observable")
    h = load_observable(cfg.param("observable"), ins.dim)
    family = "obs" if mode == "observable" else "lyap"
    n_list = cfg.param("n_list", [50, 100, 200])
    mesh = _mesh(ins, cfg)
    a = cfg.param("a")
    a_sigma = cfg.param("a_sigma")
    exponent = float(cfg.param("exponent", 5.0))
    if cfg.param("grid") is None:
        a, curve = threshold_curve(ins, mesh, family, max(n_list), h=h, a=a, a_sigma=a_sigma, exponent=exponent,
                                   threads=cfg.threads)
    else:
        curve = spectral_curve(ins, mesh, family, cfg.param("grid"), h=h, threads=cfg.threads)
        if a is None:
            a = default_threshold(curve.d1, curve.d2, max(n_list), a_sigma=a_sigma, exponent=exponent)
    lo, hi = curve.slope_range()
    rate = legendre_transform(curve, np.union1d(np.linspace(lo, hi, 61), [a]))
    logging.info(f"Run {run_id}: threshold a = {a:.6g}, I(a) = {rate.at(a):.6g}")
    result = ldp_check(ins, mode, float(a), n_list, int(cfg.param("traj", 100000)),
                       rate, cfg.seed, h=h, tolerance=float(cfg.param("tolerance", 0.15)), threads=cfg.threads)
    rows = result.pop("rows")
    result["curve"] = curve.to_dict()
    return _result(result, tables={"ldp": rows, "rate": rate.to_rows(), "scgf": curve.to_rows()},
                   passed=result["pass"], name="verdict")


def process_lyapunov(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    ins = resolve_instrument(cfg).instrument
    run_cfg = _run_config(ins, cfg)
    curve = None
    if cfg.param("mesh_size", 400):
        curve = spectral_curve(ins, _mesh(ins, cfg), "lyap", cfg.param("grid", [-0.2, -0.1, 0.0, 0.1, 0.2]),
                               threads=cfg.threads)
    estimates = gamma_estimates(ins, run_cfg, curve)
    logging.info(f"Run {run_id}: gamma traj {estimates['traj']:.6g}, integral {estimates['integral']:.6g}")
    tables = {"upsilon": curve.to_rows()} if curve is not None else {}
    return _result(estimates, tables=tables, passed=estimates["consistent"], name="verdict")


def process_scalar_checks(cfg: ExperimentConfig, run_id: str) -> Dict[str, Any]:
    z = complex(str(cfg.param("z", "1.5+0.5j")).replace(" ", ""))
    t_max = float(cfg.param("t_max", 2.0))
    grid = np.geomspace(1e-8, t_max, int(cfg.param("t_points", 400)))
    checks = scalar_f_checks(int(cfg.param("n_max", 12)), z, float(cfg.param("theta", 0.5)), grid, cfg.param("r"))
    rows = []
    for bound in ("sup", "derivative", "holder"):
        rows.extend({"check": bound, **row} for row in checks.pop(bound))
    rows.append({"check": "power_holder", "n": None, **{k: v for k, v in checks.pop("power_holder").items()
                                                           if k in ("max", "bound", "pass")}})
    dim = int(cfg.param("ineqlog_dim", 2))
    sample = haar_vectors(dim, int(cfg.param("sample_size", 2000)), stream(cfg.seed, SCAN, dim))
    ineq_rows = []
    for s in cfg.param("s_list", [-1.0, 1.0]):
        scan = ineqlog_scan(sample, float(s), int(cfg.param("trials", 10000)), cfg.seed)
        ineq_rows.append({"s": scan["s"], "min": scan["min"], "max": scan["max"],
                          "frame_min_eigenvalue": scan["frame_min_eigenvalue"]})
    ineq_ok = all(r["min"] > 0 and np.isfinite(r["max"]) for r in ineq_rows)
    passed = checks["pass"] and ineq_ok
    report = {**checks, "ineqlog_pass": ineq_ok, "pass": passed}
    return _result(report, tables={"scalar_bounds": rows, "ineqlog": ineq_rows}, passed=passed, name="verdict")


PIPELINES: Dict[str, Callable[..., Dict[str, Any]]] = {
    "validate": process_validate,
    "analyze-channel": process_analyze_channel,
    "purification": process_purification,
    "simulate": process_simulate,
    "spectrum": process_spectrum,
    "scgf": process_scgf,
    "clt": process_clt,
    "berry-esseen": process_berry_esseen,
    "ldp": process_ldp,
    "lyapunov": process_lyapunov,
    "scalar-checks": process_scalar_checks,
}


def process_experiment(cfg: ExperimentConfig, run_id: str, **kwargs: Any) -> Dict[str, Any]:
    """Run one pipeline and convert library errors into an error status dict."""
    logging.info(f"Run {run_id}: {cfg.command} on {cfg.instrument or 'inline instrument'} (seed {cfg.seed})")
    try:
        pipeline = PIPELINES[cfg.command]
        result = pipeline(cfg, run_id, **kwargs)
        logging.info(f"Run {run_id}: {cfg.command} finished")
        result["run_id"] = run_id
        return result
    # scipy's ARPACK wrappers raise RuntimeError subclasses
    except (QTrajError, ValueError, OSError, KeyError, RuntimeError) as e:
        logging.error(f"Run {run_id}: Error occurred - {str(e)}")
        logging.error(f"Run {run_id}: Error type - {type(e).__name__}")
        return {
            "status": "error",
            "message": str(e),
            "run_id": run_id
        }
