"""Small damped Gauss-Newton (Levenberg-Marquardt) solver with optional box
projection, shared by the initial-localization fit and the actuator-pose
optimization. Both problems are tiny (4-5 parameters), so the normal-equation
form with diagonal damping is the right tool.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class LmResult:
    x: np.ndarray
    cost: float  # 0.5 * ||r||^2
    residual_norm: float
    gradient_norm: float
    iterations: int
    converged: bool


def levenberg_marquardt(
    residual_jac: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    max_iter: int = 100,
    gtol: float = 1e-12,
    xtol: float = 1e-14,
    damping0: float = 1e-3,
) -> LmResult:
    """Minimize 0.5*||r(x)||^2 with Marquardt-damped Gauss-Newton steps.

    If bounds are given, candidate steps are projected onto the box before the
    accept/reject test, so delivered iterates are always feasible.
    """
    x = np.asarray(x0, dtype=float).copy()
    if lower is not None or upper is not None:
        lo = -np.inf if lower is None else np.asarray(lower, dtype=float)
        hi = np.inf if upper is None else np.asarray(upper, dtype=float)
        x = np.clip(x, lo, hi)
    else:
        lo = hi = None

    r, J = residual_jac(x)
    cost = 0.5 * float(r @ r)
    lam = damping0
    iterations = 0
    converged = False
    while iterations < max_iter:
        iterations += 1
        g = J.T @ r
        if float(np.max(np.abs(g), initial=0.0)) <= gtol:
            converged = True
            break
        JtJ = J.T @ J
        diag = np.maximum(np.diag(JtJ), 1e-30)
        accepted = False
        while lam <= 1e12:
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + step, lo, hi) if lo is not None else x + step
            r_new, J_new = residual_jac(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if cost_new < cost:
                small = np.linalg.norm(x_new - x) <= xtol * (xtol + np.linalg.norm(x))
                x, r, J, cost = x_new, r_new, J_new, cost_new
                lam = max(lam * 0.33, 1e-12)
                accepted = True
                converged = bool(small)
                break
            lam *= 10.0
        if not accepted or converged:
            break
    return LmResult(
        x=x,
        cost=cost,
        residual_norm=float(np.sqrt(2.0 * cost)),
        gradient_norm=float(np.max(np.abs(J.T @ r), initial=0.0)),
        iterations=iterations,
        converged=converged,
    )
