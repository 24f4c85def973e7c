"""Error metrics in the dB convention used throughout the experiments."""
from __future__ import annotations

import math

import numpy as np

from kalmannet.errors import InvalidArgumentError

__all__ = ["mse_linear", "mse_db", "NEG_INF_DB"]

NEG_INF_DB = -math.inf


def mse_linear(estimates, truth) -> float:
    """Squared error averaged over trajectories, time steps and state components."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise InvalidArgumentError(f"shape mismatch: {est.shape} vs {tru.shape}")
    return float(np.mean((est - tru) ** 2))


def mse_db(estimates, truth) -> float:
    """``10 log10`` of :func:`mse_linear`.

    A zero error returns ``-inf`` (``NEG_INF_DB``); check with ``math.isinf``.
    Non-finite estimates (a diverged filter) give ``nan``.
    """
    mse = mse_linear(estimates, truth)
    if mse == 0.0:
        return NEG_INF_DB
    if not math.isfinite(mse):
        return math.nan
    return 10.0 * math.log10(mse)
