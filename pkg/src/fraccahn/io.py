"""CSV/JSON output with fixed 17-significant-digit formatting, and run manifests."""
from __future__ import annotations

import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

FMT = "%.17g"


def _fmt_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else ("%.17g" % v)
    return str(v)


def write_csv(path, header, rows, summary: dict | None = None) -> Path:
    """Header row, then one line per row; optional trailing '# key=value' summary lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.atleast_2d(np.asarray(rows, dtype=float)) if len(rows) else np.zeros((0, len(header)))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt_value(v) for v in r) + "\n")
        for k, v in (summary or {}).items():
            fh.write(f"# {k}={_fmt_value(v)}\n")
    return path


def read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]]) if len(lines) > 1 else np.zeros((0, len(header)))
    return header, data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return float("%.17g" % v) if math.isfinite(v) else str(v)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir, *, config_hash: str, seed: int, command: str, version: str,
                   started: str, effective_config: str, workers: int, extra: dict | None = None) -> Path:
    run_dir = Path(run_dir)
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_hash": config_hash,
        "seed": seed,
        "command": command,
        "tool_version": version,
        "numpy": np.__version__,
        "started": started,
        "finished": now_iso(),
        "workers": workers,
        "effective_config": effective_config,
        "files": [{"path": str(p.relative_to(run_dir)), "sha256": sha256_file(p)} for p in files],
    }
    if extra:
        manifest.update(extra)
    return write_json(run_dir / "manifest.json", manifest)
