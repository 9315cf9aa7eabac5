"""Global-best particle swarm optimisation over a box around a seed point."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

from ..errors import ConfigurationError


@dataclass
class PsoConfig:
    swarm_size: int = 24
    iterations: int = 40
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    seed: int = 0
    search_halfwidth: float = 0.5

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ConfigurationError("swarm_size must be >= 2")
        # 0 iterations is accepted and means "keep the seed point"
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if np.any(np.asarray(self.search_halfwidth) <= 0):
            raise ConfigurationError("search_halfwidth must be positive")


@dataclass
class PsoResult:
    best_position: np.ndarray
    best_cost: float
    history: List[float] = field(default_factory=list)  # global best after each evaluation round
    evaluations: int = 0


class MonotonicityError(AssertionError):
    pass


def pso_minimize(cost: Callable[[np.ndarray], np.ndarray], dim: int, config: PsoConfig,
                 seed_zero=True) -> PsoResult:
    """Minimise ``cost`` over ``[-halfwidth, halfwidth]^dim``.

    ``cost`` takes a (P, dim) batch and returns P costs; the whole swarm is
    evaluated in one call so reductions happen in a fixed order.  With
    ``seed_zero`` particle 0 starts at the origin, so the result is never
    worse than the unmodified starting point.
    """
    hw = np.broadcast_to(np.asarray(config.search_halfwidth, dtype=float), (dim,))
    if config.iterations == 0:
        x = np.zeros(dim)
        c = float(cost(x[None])[0])
        return PsoResult(x, c, [c], 1)

    rng = np.random.default_rng(config.seed)
    P = config.swarm_size
    pos = rng.uniform(-hw, hw, size=(P, dim))
    if seed_zero:
        pos[0] = 0.0
    vel = 0.5 * (rng.uniform(-hw, hw, size=(P, dim)) - pos)
    vmax = hw

    costs = np.asarray(cost(pos), dtype=float)
    pbest, pbest_cost = pos.copy(), costs.copy()
    g = int(np.argmin(pbest_cost))
    gbest, gbest_cost = pbest[g].copy(), float(pbest_cost[g])
    history = [gbest_cost]
    evals = P

    for _ in range(config.iterations):
        r1 = rng.random((P, dim))
        r2 = rng.random((P, dim))
        vel = (config.inertia * vel
               + config.cognitive * r1 * (pbest - pos)
               + config.social * r2 * (gbest - pos))
        vel = np.clip(vel, -vmax, vmax)
        pos = pos + vel
        out = np.abs(pos) > hw
        pos = np.clip(pos, -hw, hw)
        vel[out] = 0.0

        costs = np.asarray(cost(pos), dtype=float)
        evals += P
        better = costs < pbest_cost
        pbest[better] = pos[better]
        pbest_cost[better] = costs[better]
        g = int(np.argmin(pbest_cost))
        if pbest_cost[g] < gbest_cost:
            gbest, gbest_cost = pbest[g].copy(), float(pbest_cost[g])
        if gbest_cost > history[-1]:
            raise MonotonicityError("global best cost increased")
        history.append(gbest_cost)
    return PsoResult(gbest, gbest_cost, history, evals)
