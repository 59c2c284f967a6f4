import csv, json, uuid, hashlib, logging, os
from datetime import datetime
from pathlib import Path
from typing import Dict, Any, List, Optional, Sequence, Union

import numpy as np

from app.config import settings

FLOAT_FORMAT = "{:.17g}"


def generate_run_id() -> str:
    """Generate a unique run ID for logging."""
    return str(uuid.uuid4())


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger with a file handler under settings.log_dir and a console handler."""
    os.makedirs(settings.log_dir, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, (level or settings.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(settings.log_dir, settings.log_file)),
            logging.StreamHandler()
        ]
    )


def log_run_start(run_id: str, command: str) -> None:
    """Log the start of a pipeline run."""
    logging.info(f"Run {run_id}: {command} started")


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and complex numbers into plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [float(value.real), float(value.imag)]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


def format_cell(value: Any) -> str:
    """CSV cell text: floats with 17 significant digits, '.' decimal, no locale."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    if isinstance(value, (complex, np.complexfloating)):
        return f"{FLOAT_FORMAT.format(value.real)}{'+' if value.imag >= 0 else '-'}{FLOAT_FORMAT.format(abs(value.imag))}j"
    if value is None:
        return ""
    return str(value)


def write_csv(path: Union[str, Path], rows: Sequence[Dict[str, Any]], columns: Optional[List[str]] = None) -> Path:
    """Write rows of dicts as CSV; the header is `columns` or the keys of the first row."""
    path = Path(path)
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(c)) for c in columns])
    return path


def write_json(path: Union[str, Path], data: Any) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(to_jsonable(data), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Union[str, Path], run_id: str, command: str, inputs: Sequence[Union[str, Path]],
                   outputs: Sequence[Union[str, Path]]) -> Path:
    """
    manifest.json with SHA-256 hashes of input files and of every output file.

    Builtin instruments have no file and are listed without a hash.
    """
    out_dir = Path(out_dir)
    manifest = {
        "run_id": run_id,
        "command": command,
        "created": datetime.now().isoformat(timespec="seconds"),
        "inputs": [
            {"path": str(p), "sha256": sha256_file(p) if Path(p).is_file() else None} for p in inputs
        ],
        "outputs": [
            {"path": Path(p).name, "sha256": sha256_file(p)} for p in outputs
        ],
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
        handle.write("\n")
    return out_dir / "manifest.json"


def parse_grid(text: str) -> List[float]:
    """
    Parse 'a:b:step' (inclusive of b up to rounding) or a comma list into floats.

    Returns:
        List[float]: grid values
    """
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise ValueError(f"grid '{text}' must read a:b:step with step > 0 and a <= b")
        a, b, step = parts
        count = int(np.floor((b - a) / step + 1e-9)) + 1
        return [float(v) for v in np.round(a + step * np.arange(count), 12)]
    return [float(p) for p in text.split(",") if p.strip()]


def parse_int_list(text: str) -> List[int]:
    return [int(p) for p in text.split(",") if p.strip()]
