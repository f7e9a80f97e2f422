"""Training and run diagnostics.

Scalar metrics recorded per run: the relative squared error norm of the
predicted nonlocal strain (l2rse), relative parameter movement between
training snapshots (delta_theta) and the slope of its trend, a collapse
detector for trivial constant-mean solutions, and the peak-strain report.
Normalized variants divide by the Gauss-point count of the data set.
"""

from dataclasses import dataclass

import numpy as np

# Thresholds of the trivial-solution detector: relative spread of the
# predictions, and relative shift of their mean from the mean input strain.
TRIVIAL_SPREAD_TOL = 1.0e-3
TRIVIAL_MEAN_TOL = 1.0e-2

# Rows with |true| below this fraction of max |true| are excluded from
# l2rse instead of dividing by (near) zero.
L2RSE_NEARZERO_FRACTION = 1.0e-14


class MetricsError(ValueError):
    """Undefined metric for the given inputs."""


def l2rse_report(pred, true):
    """l2rse value plus the count of excluded near-zero-true rows.

    l2rse = sqrt(sum_i ((pred_i - true_i) / true_i)^2) over included rows.
    Rows with |true_i| < 1e-14 * max |true| are excluded and counted.
    """
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise MetricsError(f"need matching 1D arrays, got {pred.shape} and {true.shape}")
    tmax = np.max(np.abs(true))
    if tmax == 0.0:
        raise MetricsError("every true value is zero; l2rse undefined")
    keep = np.abs(true) >= L2RSE_NEARZERO_FRACTION * tmax
    excluded = int(np.sum(~keep))
    rel = (pred[keep] - true[keep]) / true[keep]
    return float(np.sqrt(np.sum(rel * rel))), excluded


def l2rse(pred, true):
    """See :func:`l2rse_report`; returns the value only."""
    value, _ = l2rse_report(pred, true)
    return value


def delta_theta(prev, curr):
    """Relative parameter movement ||curr - prev||_2 / ||prev||_2."""
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise MetricsError("parameter vectors differ in shape")
    nrm = np.linalg.norm(prev)
    if nrm == 0.0:
        raise MetricsError("previous parameter vector has zero norm")
    return float(np.linalg.norm(curr - prev) / nrm)


def slope_fit(samples):
    """OLS slope of delta-theta samples against their index.

    The first sample is omitted (warm-up transient); the abscissae keep
    their original indices. Needs at least 3 samples before removal.
    Plain textbook formula: sum((x - xbar)(y - ybar)) / sum((x - xbar)^2).
    """
    y = np.asarray(samples, dtype=float)
    if y.ndim != 1 or y.size < 3:
        raise MetricsError("slope_fit needs at least 3 samples")
    x = np.arange(1.0, y.size, dtype=float)
    y = y[1:]
    xbar = np.mean(x)
    ybar = np.mean(y)
    dx = x - xbar
    return float(np.sum(dx * (y - ybar)) / np.sum(dx * dx))


def trivial_detector(pred, eps_eq):
    """Detect collapse to the constant mean-strain solution.

    Flags when the predictions are (relatively) constant and their mean sits
    at the mean input local strain:

        std(pred) / |mean(pred)| < 1e-3   and
        |mean(pred) - mean(eps_eq)| / |mean(eps_eq)| < 1e-2.

    Returns
    -------
    flag : bool
    evidence : dict with spread_ratio and mean_shift
    """
    pred = np.asarray(pred, dtype=float)
    eps_eq = np.asarray(eps_eq, dtype=float)
    if pred.size == 0 or eps_eq.size == 0:
        raise MetricsError("empty inputs to trivial_detector")
    mean_pred = float(np.mean(pred))
    mean_eq = float(np.mean(eps_eq))
    std_pred = float(np.std(pred))
    if mean_pred != 0.0:
        spread = std_pred / abs(mean_pred)
    else:
        # Exactly constant zero is still constant; otherwise undecidable.
        spread = 0.0 if std_pred == 0.0 else np.inf
    shift = abs(mean_pred - mean_eq) / abs(mean_eq) if mean_eq != 0.0 else np.inf
    flag = bool(spread < TRIVIAL_SPREAD_TOL and shift < TRIVIAL_MEAN_TOL)
    return flag, {"spread_ratio": float(spread), "mean_shift": float(shift)}


@dataclass
class MaxStrainReport:
    """Peak predicted versus reference nonlocal strain."""

    max_pred: float
    max_true: float
    rel_error: float
    argmax_pred: int
    argmax_true: int
    argmax_match: bool

    def to_dict(self):
        return {
            "max_pred": self.max_pred,
            "max_true": self.max_true,
            "rel_error": self.rel_error,
            "argmax_pred": self.argmax_pred,
            "argmax_true": self.argmax_true,
            "argmax_match": self.argmax_match,
        }


def max_strain_report(pred, true):
    """Signed relative error of the field maximum and argmax agreement."""
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape or pred.size == 0:
        raise MetricsError("need matching non-empty arrays")
    ap = int(np.argmax(pred))
    at = int(np.argmax(true))
    mt = float(true[at])
    if mt == 0.0:
        raise MetricsError("reference maximum is zero; relative error undefined")
    mp = float(pred[ap])
    return MaxStrainReport(
        max_pred=mp,
        max_true=mt,
        rel_error=(mp - mt) / mt,
        argmax_pred=ap,
        argmax_true=at,
        argmax_match=ap == at,
    )
