from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATUSES = ("optimal", "infeasible", "max_iter", "numerical", "infeasible_subproblem")


@dataclass
class SolveReport:
    """Outcome of a solve. Multipliers follow the sign convention ``>= 0`` for
    inequalities and bounds; ``active_set`` can warm-start the next QP."""

    x_star: np.ndarray
    status: str
    iterations: int
    kkt_residual: float
    wall_time: float
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_lb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active_set: tuple[int, ...] = ()
    message: str = ""
    merit_history: list = field(default_factory=list)
    hessian: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def summary(self) -> dict:
        return {"status": self.status, "iterations": int(self.iterations),
                "kkt_residual": float(self.kkt_residual), "wall_time": float(self.wall_time)}
