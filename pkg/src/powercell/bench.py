"""Timing of one Newton iteration's diagram build and Hessian assembly."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .boundary import BoundaryModel
from .diagram import PolygonDomain
from .energy import EnergyModel, EnergyTerm
from .system import SystemState

DEFAULT_SIZES = (1000, 2000, 5000, 10000)
GROWTH_LIMIT = 15.0


@dataclass
class BenchResult:
    sizes: list
    seconds: list
    build_seconds: list

    @property
    def growth(self) -> float:
        """Time ratio between the largest and smallest size."""
        return self.seconds[-1] / self.seconds[0]

    @property
    def size_ratio(self) -> float:
        return self.sizes[-1] / self.sizes[0]

    def rows(self) -> list:
        return [{"sites": n, "seconds": t, "diagram_seconds": b, "assembly_seconds": t - b}
                for n, t, b in zip(self.sizes, self.seconds, self.build_seconds)]


def bench_state(n: int, rng) -> SystemState:
    """Unit-square foam with jittered-grid sites and a C1 energy."""
    k = int(np.ceil(np.sqrt(n)))
    g = (np.stack(np.meshgrid(np.arange(k), np.arange(k)), -1).reshape(-1, 2)[:n] + 0.5) / k
    pts = np.clip(g + rng.uniform(-0.3, 0.3, g.shape) / k, 1e-6, 1 - 1e-6)
    energy = EnergyModel([EnergyTerm("area_target", 1.0), EnergyTerm("second_moment", 1.0),
                          EnergyTerm("site_centroid", 1.0)])
    params = np.c_[pts, np.zeros(n), np.full(n, 1.0 / n)]
    return SystemState(params, (True, True, True, False), BoundaryModel.fixed(PolygonDomain.rectangle(0, 0, 1, 1)),
                       energy)


def time_iteration(state: SystemState, repeats: int = 3):
    """Best-of-``repeats`` wall time of (diagram build, build + order-2 evaluation)."""
    best, best_build = np.inf, np.inf
    for _ in range(repeats):
        state._cache.clear()
        state._diagrams.clear()
        t0 = time.perf_counter()
        state.diagram_at()
        t1 = time.perf_counter()
        state.evaluate(order=2)
        t2 = time.perf_counter()
        best, best_build = min(best, t2 - t0), min(best_build, t1 - t0)
    return best_build, best


def run_bench(sizes=DEFAULT_SIZES, seed: int = 0, repeats: int = 3) -> BenchResult:
    rng = np.random.default_rng(seed)
    secs, builds = [], []
    for n in sizes:
        b, t = time_iteration(bench_state(int(n), rng), repeats)
        secs.append(t)
        builds.append(b)
    return BenchResult([int(n) for n in sizes], secs, builds)
