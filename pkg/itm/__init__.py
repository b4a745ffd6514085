"""
ITM wave laboratory.

Wave equation with instantaneous-time-mirror coefficients: time-domain
solvers, the constant-coefficient Fourier oracle, jump-condition limit and
the refocusing measurement harness.
"""
import os
import logging
from logging.handlers import RotatingFileHandler

__version__ = "1.0.0"

LOG_FORMAT = '%(asctime)s [%(levelname)s] [RUN_%(thread)d] %(message)s'


def setup_logging(out_dir=None, verbose=False):
    """Attach the rotating run log (itm.log in out_dir) to the root logger."""
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger()

    handler = None
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
            handler = RotatingFileHandler(
                os.path.join(out_dir, 'itm.log'),
                maxBytes=10*1024*1024,  # 10MB
                backupCount=5
            )
            handler.setFormatter(logging.Formatter(LOG_FORMAT))
        except Exception as e:
            # Fallback to console if file write fails (read-only out dir, tests)
            handler = None
            print(f"Warning: Could not set up file logging: {e}")

    if handler is None:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

    handler.setLevel(level)
    root.addHandler(handler)
    root.setLevel(level)
    return handler
