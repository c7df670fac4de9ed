"""Power-law fit y = a f^b for dataset-fraction scaling curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qksttn.errors import FitDomainError


@dataclass(frozen=True)
class PowerLawFit:
    a: float
    b: float
    sigma_a: float
    sigma_b: float

    def __call__(self, f):
        return self.a * np.asarray(f, dtype=float) ** self.b


def fit_power_law(f, y) -> PowerLawFit:
    """Least squares on ``log y = log a + b log f``.

    Uncertainties come from linearizing the fit model: the parameter
    covariance ``s^2 (J^T J)^-1`` of the log-linear problem, propagated to
    ``a`` through ``d a = a d(log a)``. With only two points the residual
    variance is undefined and both uncertainties are NaN.
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    if f.shape != y.shape or f.ndim != 1:
        raise FitDomainError("f and y must be 1-D arrays of equal length")
    if f.size < 2 or np.unique(f).size < 2:
        raise FitDomainError("need at least two distinct fractions")
    if np.any(y <= 0) or np.any(f <= 0) or not np.all(np.isfinite(y)):
        raise FitDomainError("power-law fit needs strictly positive, finite f and y")
    J = np.column_stack([np.ones_like(f), np.log(f)])
    coef, *_ = np.linalg.lstsq(J, np.log(y), rcond=None)
    log_a, b = coef
    dof = f.size - 2
    if dof > 0:
        resid = np.log(y) - J @ coef
        cov = (resid @ resid / dof) * np.linalg.inv(J.T @ J)
        s_log_a, s_b = np.sqrt(np.diag(cov))
    else:
        s_log_a = s_b = float("nan")
    a = float(np.exp(log_a))
    return PowerLawFit(a, float(b), a * float(s_log_a), float(s_b))
