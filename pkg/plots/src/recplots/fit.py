"""Independent log-log least-squares power-law fit.

Deliberately reimplemented here (not imported from the trainer package) so
the annotated fit doubles as a cross-component consistency check against the
values the pipeline records in sweep_fit.csv.
"""

import numpy as np


def power_law_fit(sizes, losses) -> tuple[float, float, float]:
    """loss ~ a * size^(-b); returns (a, b, r2) with r2 on log residuals.

    Zero total variance (constant losses) is defined as r2 = 1.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if sizes.size < 3:
        raise ValueError("power-law fit needs at least 3 points")
    if (sizes <= 0).any() or (losses <= 0).any():
        raise ValueError("sizes and losses must be positive")
    x, y = np.log(sizes), np.log(losses)
    xm, ym = x.mean(), y.mean()
    var = ((x - xm) ** 2).sum()
    if var == 0:
        raise ValueError("sizes must not all be equal")
    slope = ((x - xm) * (y - ym)).sum() / var
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = float((resid**2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(np.exp(intercept)), float(-slope), float(r2)
