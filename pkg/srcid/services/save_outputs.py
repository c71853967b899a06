from __future__ import annotations
import platform
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import orjson
import pandas as pd

from srcid import __version__
from srcid.errors import OutputError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.services.config_parser import emit_config

attach_to_logger_names(["srcid.services.save_outputs"])

FLOAT_FORMAT = "%.17g"
INVALID_CHARS_RE = re.compile(r'[<>:"/\\|?*\x00-\x1f\s]+')
FORMATS = ("csv",)


def safe_name(name: str, max_len: int = 80) -> str:
    """Directory-safe scenario name."""
    name = INVALID_CHARS_RE.sub("_", name or "").strip("._")
    return (name or "run")[:max_len]


def ensure_dir(path: Union[str, Path]) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {p}: {exc}") from exc
    if not p.is_dir():
        raise OutputError(f"output path {p} is not a directory")
    return p


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        app_logger.exception("Failed to write %s", path)
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError


def write_json(data: dict, path: Path) -> Path:
    try:
        path.write_bytes(orjson.dumps(data, default=_json_default,
                                      option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    except OSError as exc:
        app_logger.exception("Failed to write %s", path)
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def manifest(result, spec=None, extra: Optional[dict] = None) -> dict:
    """Spec echo, per-level couplings and seeds, timings and tool version."""
    levels = []
    for r in result.levels:
        levels.append({
            "level": r.level, "h": r.h, "h_mesh": r.h_mesh, "tau": r.tau, "M": r.M, "rho": r.rho,
            "delta": r.delta, "seed": r.seed, "nodes": r.n_nodes, "status": r.status, "error": r.error,
            "iterations": r.report.iterations if r.report else None,
            "stop_reason": r.report.stop_reason if r.report else None,
            "elapsed_s": r.elapsed,
            "job": r.job,
        })
    data = {
        "tool": "srcid",
        "version": __version__,
        "python": platform.python_version(),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "scenario": result.scenario,
        "spec": spec.model_dump(mode="json") if spec is not None else None,
        "levels": levels,
        "eoc_mean": result.table.means,
        "failed_levels": result.table.failed,
        "elapsed_s": result.elapsed,
    }
    if extra:
        data.update(extra)
    return data


def emit_report(result, out_dir: Union[str, Path], *, spec=None, fmt: str = "csv",
                extra: Optional[dict] = None) -> Dict[str, Path]:
    """
    Write table.csv, eoc.csv, trace_<level>.csv per level, probes.csv and manifest.json into
    out_dir. Returns the written paths by name.
    """
    if fmt not in FORMATS:
        raise OutputError(f"unsupported report format {fmt!r}")
    root = ensure_dir(out_dir)
    written: Dict[str, Path] = {}
    written["table"] = write_csv(result.table.to_frame(), root / "table.csv")
    written["eoc"] = write_csv(result.table.eoc_frame(), root / "eoc.csv")
    probes = []
    for r in result.levels:
        if r.report is not None:
            written[f"trace_{r.level}"] = write_csv(r.report.to_frame(), root / f"trace_{r.level}.csv")
        if r.probes is not None and len(r.probes):
            probes.append(r.probes)
    if probes:
        written["probes"] = write_csv(pd.concat(probes, ignore_index=True), root / "probes.csv")
    written["manifest"] = write_json(manifest(result, spec, extra), root / "manifest.json")
    if spec is not None:
        try:
            (root / "experiment.toml").write_text(emit_config(spec), encoding="utf-8")
        except OSError as exc:
            raise OutputError(f"cannot write {root / 'experiment.toml'}: {exc}") from exc
        written["experiment"] = root / "experiment.toml"
    app_logger.info("Report for %s written to %s (%d files)", result.scenario, root, len(written))
    return written
