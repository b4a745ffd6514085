"""
ITM Error Handling Module

Defines error codes and exception classes for consistent error handling.
See docs/ERROR_CODES.md for full documentation.
"""


class ItmError(Exception):
    """Base class for known ITM lab errors."""
    def __init__(self, message, code="ITM-999", context=None):
        super().__init__(message)
        self.message = message
        self.code = code
        self.context = context

    def __str__(self):
        if self.context:
            return f"{self.message} ({self.context})"
        return self.message


# =============================================================================
# Error Code Definitions
# =============================================================================

# 1xx - Grid & Field Errors
ERR_GRID_INVALID = "ITM-100"
ERR_FIELD_INVALID = "ITM-101"
ERR_FIELD_MISMATCH = "ITM-102"
ERR_SYMBOL_INVALID = "ITM-103"

# 2xx - Media & Schedule Errors
ERR_MEDIUM_INVALID = "ITM-200"
ERR_WINDOW_INVALID = "ITM-201"
ERR_SCHEDULE_OVERLAP = "ITM-202"
ERR_JUMP_SAMPLED = "ITM-203"
ERR_PRESET_UNKNOWN = "ITM-204"

# 3xx - Spectral Oracle Errors
ERR_ORACLE_ALIGNMENT = "ITM-300"
ERR_ORACLE_NOT_REAL = "ITM-301"
ERR_ORACLE_MEDIUM = "ITM-302"

# 4xx - Evolve Errors
ERR_CFL_VIOLATION = "ITM-400"
ERR_EDGE_STRADDLE = "ITM-401"
ERR_SOLVABILITY = "ITM-402"
ERR_TIME_INVALID = "ITM-403"

# 5xx - Refocus Errors
ERR_TRACE_MISALIGNED = "ITM-500"
ERR_EMPTY_BALL = "ITM-501"

# 6xx - Analysis Errors
ERR_RATE_INPUT = "ITM-600"
ERR_NONCONSTANT_A = "ITM-601"
ERR_SCENARIO_MISMATCH = "ITM-602"

# 7xx - Experiment Errors
ERR_EXPERIMENT_FAILED = "ITM-700"
ERR_EXPERIMENT_KIND = "ITM-701"

# 9xx - System Errors
ERR_CONFIG_LOAD = "ITM-900"
ERR_CONFIG_SCHEMA = "ITM-901"
ERR_FILE_IO = "ITM-902"
ERR_SYSTEM_UNKNOWN = "ITM-999"


# =============================================================================
# Helper Functions
# =============================================================================

def itm_assert(condition, message, code=ERR_SYSTEM_UNKNOWN, context=None):
    """Assert a condition, raising ItmError if false."""
    if not condition:
        raise ItmError(message, code, context)


def raise_config_error(path, message):
    """Raise a schema error pointing at the offending config field."""
    raise ItmError(message, ERR_CONFIG_SCHEMA, context=path)
