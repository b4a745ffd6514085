"""
Background Tasks Module
Runs independent experiment jobs (sweep members, refinement levels) in parallel.

- ThreadPoolExecutor workers (numpy/scipy.fft release the GIL in their kernels)
- results merged in submission order, so output never depends on scheduling
- JOB_STATUS counters for the run manifest
"""
import datetime
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, List, Sequence, Tuple

from itm.utils.errors import ItmError, ERR_EXPERIMENT_FAILED

logger = logging.getLogger(__name__)

# Job status (for the manifest)
JOB_STATUS = {
    'submitted': 0,
    'completed': 0,
    'failed': 0,
    'last_batch': None,
    'errors': [],
    'wall_times': {},
}
_STATUS_LOCK = threading.Lock()

MAX_ERRORS_KEPT = 10


def reset_status():
    with _STATUS_LOCK:
        JOB_STATUS.update({'submitted': 0, 'completed': 0, 'failed': 0, 'last_batch': None,
                           'errors': [], 'wall_times': {}})


def status_snapshot():
    with _STATUS_LOCK:
        snap = dict(JOB_STATUS)
        snap['errors'] = list(JOB_STATUS['errors'])
        snap['wall_times'] = dict(JOB_STATUS['wall_times'])
        return snap


def _timed(name: str, fn: Callable[[], Any]):
    start = time.perf_counter()
    try:
        result = fn()
    except Exception as e:
        with _STATUS_LOCK:
            JOB_STATUS['failed'] += 1
            JOB_STATUS['errors'].append({
                'time': datetime.datetime.now().isoformat(),
                'job': name,
                'error': str(e),
            })
            # Keep only last 10 errors
            if len(JOB_STATUS['errors']) > MAX_ERRORS_KEPT:
                JOB_STATUS['errors'] = JOB_STATUS['errors'][-MAX_ERRORS_KEPT:]
        logger.error(f"[Jobs] {name} failed: {e}")
        raise
    elapsed = time.perf_counter() - start
    with _STATUS_LOCK:
        JOB_STATUS['completed'] += 1
        JOB_STATUS['wall_times'][name] = elapsed
    logger.info(f"[Jobs] {name} done in {elapsed:.2f}s")
    return result


def run_jobs(jobs: Sequence[Tuple[str, Callable[[], Any]]], max_workers: int = 1) -> List[Any]:
    """
    Run named zero-argument jobs and return their results in submission order.

    Raises ItmError(ITM-700) naming the first failed job once all jobs settle.
    """
    jobs = list(jobs)
    with _STATUS_LOCK:
        JOB_STATUS['submitted'] += len(jobs)
        JOB_STATUS['last_batch'] = datetime.datetime.now().isoformat()

    if max_workers <= 1 or len(jobs) <= 1:
        outcomes = []
        for name, fn in jobs:
            try:
                outcomes.append((name, _timed(name, fn), None))
            except Exception as e:
                outcomes.append((name, None, e))
    else:
        with ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix='itm-job') as pool:
            futures = [(name, pool.submit(_timed, name, fn)) for name, fn in jobs]
            outcomes = []
            for name, fut in futures:
                try:
                    outcomes.append((name, fut.result(), None))
                except Exception as e:
                    outcomes.append((name, None, e))

    for name, _, err in outcomes:
        if err is not None:
            if isinstance(err, ItmError):
                raise ItmError(err.message, err.code, context=f"job {name}") from err
            raise ItmError(f"Job {name} failed: {err}", ERR_EXPERIMENT_FAILED, context=name) from err
    return [result for _, result, _ in outcomes]
