"""Calibration metrics: classification ECE and regression ENCE."""

from __future__ import annotations

import numpy as np


class EmptyInput(Exception):
    pass


def ece(confidences, correct, bins: int = 10) -> float:
    """Expected calibration error over uniform confidence bins on [0, 1].

    Samples landing exactly on a bin edge go to the higher bin; empty bins
    contribute nothing.
    """
    conf = np.asarray(confidences, dtype=float).ravel()
    corr = np.asarray(correct, dtype=bool).ravel()
    if conf.size == 0 or conf.size != corr.size:
        raise EmptyInput("need equal-length nonempty confidence/correct lists")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    total = conf.size
    out = 0.0
    for j in range(bins):
        sel = idx == j
        n = int(sel.sum())
        if n == 0:
            continue
        acc = corr[sel].mean()
        avg_conf = conf[sel].mean()
        out += (n / total) * abs(acc - avg_conf)
    return float(out)


def ence(predicted_vars, squared_errors, bins: int = 10) -> float:
    """Expected normalized calibration error for regression.

    Bins uniformly over the predicted-variance range; per nonempty bin
    compares the RMSE against the root mean predicted variance, normalized by
    the latter. Empty bins are skipped and the divisor reduced accordingly.
    """
    var = np.asarray(predicted_vars, dtype=float).ravel()
    err2 = np.asarray(squared_errors, dtype=float).ravel()
    if var.size == 0 or var.size != err2.size:
        raise EmptyInput("need equal-length nonempty variance/error lists")
    if np.any(var <= 0):
        raise ValueError("predicted variances must be positive")
    if bins < 1:
        raise ValueError("need at least 1 bin")
    lo, hi = float(var.min()), float(var.max())
    if hi <= lo:
        idx = np.zeros(var.size, dtype=int)
    else:
        idx = np.minimum(((var - lo) / (hi - lo) * bins).astype(int), bins - 1)
    out = 0.0
    populated = 0
    for j in range(bins):
        sel = idx == j
        if not sel.any():
            continue
        root_mvar = np.sqrt(var[sel].mean())
        rmse = np.sqrt(err2[sel].mean())
        out += abs(root_mvar - rmse) / root_mvar
        populated += 1
    return float(out / populated)
