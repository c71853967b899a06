# srcid/broker/workers.py
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from datetime import datetime, timezone
from typing import Dict, List, Sequence

from srcid.logger_worker import worker_log


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def job_set(jobs: Dict[int, dict], level: int) -> dict:
    """New status record for one level: {level, status, queued_at, started_at, finished_at, pid, error}."""
    jobs[level] = {"level": level, "status": "queued", "queued_at": _now(), "started_at": None,
                   "finished_at": None, "pid": None, "error": None}
    return jobs[level]


def job_update(jobs: Dict[int, dict], level: int, **fields) -> dict:
    data = jobs.setdefault(level, {"level": level})
    data.update(fields)
    return data


def process_level(payload: dict, level: int):
    """
    Worker entry: rebuild the scenario from its spec payload and run one level.
    Failures come back as a LevelResult marked failed, never as an exception.
    """
    # imported here so the pool start-up stays cheap under the spawn start method
    from srcid.schemas import ExperimentSpec
    from srcid.services.experiments import run_level_safe
    from srcid.services.scenarios import build_scenario

    started_at = _now()
    worker_log.info("process_level START level=%d scenario=%s", level, payload.get("experiment", {}).get("scenario"))
    scenario = build_scenario(ExperimentSpec.model_validate(payload))
    result = run_level_safe(scenario, level)
    if result.ok:
        worker_log.info("process_level DONE level=%d errors=%s (%.1fs)", level, result.errors, result.elapsed)
    else:
        worker_log.error("process_level FAILED level=%d: %s", level, result.error)
    return os.getpid(), started_at, result


def run_levels(payload: dict, levels: Sequence[int], *, jobs: int = 1) -> List:
    """
    Run levels in a process pool; results come back ordered by level, each carrying its
    status record in `result.job`.
    """
    workers = max(1, min(jobs, len(levels)))
    worker_log.info("run_levels levels=%s workers=%d", list(levels), workers)
    table: Dict[int, dict] = {}
    results = {}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {}
        for level in levels:
            job_set(table, level)
            futures[pool.submit(process_level, payload, level)] = level
        for fut in as_completed(futures):
            level = futures[fut]
            try:
                pid, started_at, result = fut.result()
            except Exception as exc:
                # the worker process itself died (e.g. out of memory)
                worker_log.exception("run_levels level=%d crashed: %s", level, exc)
                job_update(table, level, status="failed", finished_at=_now(), error=str(exc))
                results[level] = _crashed_level(payload, level, exc)
            else:
                job_update(table, level, status=result.status, started_at=started_at, finished_at=_now(),
                           pid=pid, error=result.error)
                results[level] = result
            results[level].job = table[level]
    return [results[level] for level in sorted(results)]


def run_levels_inline(scenario, levels: Sequence[int]) -> List:
    """Sequential counterpart of run_levels in the calling process, with the same status records."""
    from srcid.services.experiments import run_level_safe

    table: Dict[int, dict] = {}
    for level in levels:
        job_set(table, level)
    results = []
    for level in levels:
        job_update(table, level, status="running", started_at=_now(), pid=os.getpid())
        result = run_level_safe(scenario, level)
        result.job = job_update(table, level, status=result.status, finished_at=_now(), error=result.error)
        results.append(result)
    return results


def _crashed_level(payload: dict, level: int, exc: BaseException):
    from srcid.schemas import ExperimentSpec
    from srcid.services.experiments import failed_level
    from srcid.services.scenarios import build_scenario

    return failed_level(build_scenario(ExperimentSpec.model_validate(payload)), level, exc)
