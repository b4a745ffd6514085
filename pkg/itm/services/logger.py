import datetime
import logging
import threading
import traceback

# Configure standard logger fallback
logger = logging.getLogger(__name__)

# In-memory error table, copied into the run manifest
ERROR_LOG = []
ERROR_LOG_LIMIT = 50
_ERROR_LOG_LOCK = threading.Lock()

# Set by the harness while an experiment runs
RUN_CONTEXT = {'run_id': None}


def log_error(message, level="ERROR", source="Solver", trace=None):
    """
    Logs an error to the standard logger and the bounded ERROR_LOG.
    """
    log_msg = f"[{level}] {source}: {message}"
    if level == "ERROR":
        logger.error(log_msg)
        if trace:
            logger.error(trace)
    else:
        logger.info(log_msg)

    entry = {
        'time': datetime.datetime.now().isoformat(),
        'level': level,
        'source': source,
        'message': message,
        'run_id': RUN_CONTEXT.get('run_id'),
    }
    if trace:
        entry['trace'] = trace
    with _ERROR_LOG_LOCK:
        ERROR_LOG.append(entry)
        if len(ERROR_LOG) > ERROR_LOG_LIMIT:
            del ERROR_LOG[:-ERROR_LOG_LIMIT]
    return True


def log_exception(e, source="System"):
    """
    Log an exception with its ItmError code and the active run id.
    """
    error_code = getattr(e, 'code', 'ITM-999')  # Default to generic system error
    run_id = RUN_CONTEXT.get('run_id') or 'NO_RUN_ID'

    # Format: [RUN_ID] [CODE] [Source] Message
    logger.error(f"[{run_id}] [{error_code}] [{source}] {e}")

    full_trace = traceback.format_exc()
    if full_trace.strip() == 'NoneType: None':
        full_trace = None

    log_error(message=f"[{error_code}] {e}", level="ERROR", source=source, trace=full_trace)


def snapshot_errors():
    with _ERROR_LOG_LOCK:
        return list(ERROR_LOG)


def clear_errors():
    with _ERROR_LOG_LOCK:
        ERROR_LOG.clear()
