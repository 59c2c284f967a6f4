# main.py

import numpy as np
import scipy
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import settings
from app.utils import setup_logging

from app.routers import analysis

setup_logging()

app = FastAPI(
    title=settings.app_name,
    description="Spectral and statistical analysis of quantum trajectories",
    version=settings.app_version
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=settings.cors_allow_credentials,
    allow_methods=settings.cors_allow_methods,
    allow_headers=settings.cors_allow_headers,
)


@app.get("/")
async def root():
    return {
        "message": f"{settings.app_name} {settings.app_version}",
        "endpoints": ["/validate", "/analyze-channel", "/purification", "/spectrum"],
    }


@app.get("/health")
async def health_check():
    # numerics versions matter when comparing outputs across hosts
    return {
        "status": "healthy",
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "threads": settings.threads,
        "dense_limit": settings.dense_limit,
    }


app.include_router(analysis.router)

if __name__ == "__main__":
    import uvicorn
    uvicorn.run("main:app", host=settings.host, port=settings.port, reload=True)
