"""Recurrent adversarial video enhancement from unpaired clips."""

import os

if os.environ.get("RAVE_DETERMINISTIC", "") == "1":
    from threadpoolctl import threadpool_limits

    _limits = threadpool_limits(1)

__version__ = "0.1.0"
