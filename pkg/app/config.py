from pydantic_settings import BaseSettings
from typing import List

class Settings(BaseSettings):
    # Application settings
    app_name: str = "Quantum Trajectory Spectral Toolkit"
    app_version: str = "1.0.0"
    debug: bool = True

    # Server settings
    host: str = "0.0.0.0"
    port: int = 8080

    # CORS settings
    cors_origins: List[str] = ["*"]
    cors_allow_credentials: bool = True
    cors_allow_methods: List[str] = ["*"]
    cors_allow_headers: List[str] = ["*"]

    # Logging
    log_dir: str = "logs"
    log_file: str = "qtraj.log"
    log_level: str = "INFO"

    # Run output
    output_dir: str = "runs"

    # Instrument validation
    tol: float = 1e-9

    # Channel analysis
    channel_tol: float = 1e-9
    peripheral_root_tol: float = 1e-6
    superoperator_limit: int = 256
    max_squarings: int = 64

    # Purification
    g_exact_budget: int = 10_000_000
    mc_chunk: int = 4096

    # Sampler
    enumeration_budget: int = 1_000_000
    block_size: int = 1024
    step_block: int = 512
    occupation_limit: int = 100_000

    # Discretized operators
    dense_limit: int = 2000
    perron_tol: float = 1e-12
    max_iterations: int = 20000
    gap_tol: float = 1e-3
    lyapunov_tilt_floor: float = -1.5
    lyapunov_tilt_ceiling: float = 10.0
    gamma_series_max_w: float = 0.5

    # Limit theorems
    richardson_step: float = 1e-3
    hyperplane_tol: float = 1e-8
    convexity_tol: float = 1e-8

    # Workers
    threads: int = 1

    class Config:
        env_file = ".env"

settings = Settings()
