from fastapi import APIRouter
from typing import Any, Dict, Optional
import logging

from pydantic import BaseModel, Field, field_validator

from app.config import settings
from app.utils import generate_run_id, log_run_start, to_jsonable
from app.services.experiment_services import (
    ExperimentConfig,
    process_experiment
)
from services.instrument import BUILTIN_PREFIX

router = APIRouter()


class AnalysisRequest(BaseModel):
    """Either an inline instrument document or a builtin:NAME string; server paths are not accepted."""

    instrument: Optional[str] = None
    document: Optional[Dict[str, Any]] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    tol: float = Field(default_factory=lambda: settings.tol, gt=0)

    @field_validator("instrument")
    @classmethod
    def builtin_only(cls, value: Optional[str]) -> Optional[str]:
        if value and not value.startswith(BUILTIN_PREFIX):
            raise ValueError(f"instrument must be a {BUILTIN_PREFIX}NAME string; send files as 'document'")
        return value


def _handle(command: str, body: AnalysisRequest) -> Dict[str, Any]:
    run_id = generate_run_id()
    log_run_start(run_id, f"/{command}")
    if body.document is None and not body.instrument:
        logging.warning(f"Run {run_id}: No instrument in request body")
        return {
            "status": "error",
            "message": "request needs 'instrument' or 'document'",
            "run_id": run_id
        }
    cfg = ExperimentConfig(command=command, instrument=body.instrument, params=body.params,
                           seed=body.seed, tol=body.tol, threads=settings.threads)
    result = process_experiment(cfg, run_id, document=body.document)
    if result["status"] == "success":
        logging.info(f"Run {run_id}: /{command} processed successfully")
    return to_jsonable(result)


# Stochasticity report
@router.post("/validate")
def validate_instrument(body: AnalysisRequest):
    return _handle("validate", body)


# (Erg), period and cyclic decomposition
@router.post("/analyze-channel")
def analyze_channel(body: AnalysisRequest):
    return _handle("analyze-channel", body)


# g(n) series and (Pur) verdict
@router.post("/purification")
def purification(body: AnalysisRequest):
    return _handle("purification", body)


# Leading eigenvalues of the discretized kernel
@router.post("/spectrum")
def spectrum(body: AnalysisRequest):
    return _handle("spectrum", body)
