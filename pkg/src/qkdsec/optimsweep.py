"""Derivative-free optimization of free protocol parameters, and the
distance-sweep orchestration.

The objective (secret-key rate at one distance) is deterministic and
moderately expensive, so a bounded Nelder-Mead with projection and
restart-on-stall does the job; sweeps walk the distance grid warm-starting
each point from its neighbor's optimum.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Parameter:
    name: str
    lower: float
    upper: float
    transform: str = "linear"    # "linear" | "log"

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)) \
                or self.lower >= self.upper:
            raise ValueError(f"bad bounds for {self.name}")
        if self.transform == "log" and self.lower <= 0:
            raise ValueError(f"log-transformed {self.name} needs positive bounds")

    def encode(self, value: float) -> float:
        v = min(max(value, self.lower), self.upper)
        return math.log(v) if self.transform == "log" else v

    def decode(self, x: float) -> float:
        if self.transform == "log":
            return min(max(math.exp(x), self.lower), self.upper)
        return min(max(x, self.lower), self.upper)

    @property
    def encoded_bounds(self) -> tuple:
        if self.transform == "log":
            return math.log(self.lower), math.log(self.upper)
        return self.lower, self.upper


@dataclass(frozen=True)
class ParameterSpace:
    parameters: tuple

    @property
    def names(self):
        return [p.name for p in self.parameters]

    def decode(self, x: np.ndarray) -> dict:
        return {p.name: p.decode(float(v)) for p, v in zip(self.parameters, x)}

    def encode(self, values: dict) -> np.ndarray:
        return np.array([p.encode(values[p.name]) for p in self.parameters])

    def project(self, x: np.ndarray) -> np.ndarray:
        out = x.copy()
        for k, p in enumerate(self.parameters):
            lo, hi = p.encoded_bounds
            out[k] = min(max(out[k], lo), hi)
        return out


def bb84_space() -> ParameterSpace:
    return ParameterSpace((
        Parameter("p_z", 0.5, 0.98),
        Parameter("alpha", 1e-3, 0.6, "log"),
        Parameter("gamma_w", 1.0, 1e4, "log"),
    ))


def mdi_space() -> ParameterSpace:
    return ParameterSpace((
        Parameter("p_z", 0.3, 0.98),
        Parameter("p_key_given_z", 0.05, 0.99),
        Parameter("alpha", 1e-3, 0.6, "log"),
        Parameter("mu", 5e-3, 1.5, "log"),
        Parameter("gamma_w", 1.0, 1e4, "log"),
    ))


def decoy_space() -> ParameterSpace:
    return ParameterSpace((
        Parameter("p_z", 0.5, 0.98),
        Parameter("alpha", 1e-2, 0.6, "log"),
        Parameter("gamma_w", 1.0, 1e4, "log"),
        Parameter("intensity_0", 0.05, 1.0, "log"),
        Parameter("intensity_1", 5e-3, 0.5, "log"),
        Parameter("p_int_0", 0.2, 0.94),
        Parameter("p_int_1", 0.03, 0.6),
    ))


@dataclass
class OptimizeConfig:
    max_evals: int = 120
    restarts: int = 1
    initial_step: float = 0.25
    f_tol: float = 1e-4        # relative objective stall tolerance
    seed: int = 0


@dataclass
class OptimizeResult:
    best_params: dict
    best_value: float
    evaluations: int
    history: list = field(default_factory=list)


def nelder_mead(objective, space: ParameterSpace, x0: np.ndarray,
                config: OptimizeConfig) -> OptimizeResult:
    """Bounded Nelder-Mead (maximization) with projection and seeded
    restart-on-stall; deterministic for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    dim = len(space.parameters)
    evals = 0
    cache: dict = {}

    def f(x):
        nonlocal evals
        key = tuple(np.round(x, 12))
        if key in cache:
            return cache[key]
        evals += 1
        val = objective(space.decode(space.project(x)))
        cache[key] = val
        return val

    best_x, best_v = space.project(x0), f(space.project(x0))
    for restart in range(config.restarts + 1):
        if evals >= config.max_evals:
            break
        if restart == 0:
            start = best_x
        else:
            jitter = rng.uniform(-0.5, 0.5, dim) * config.initial_step
            start = space.project(best_x + jitter)
        simplex = [start]
        for k in range(dim):
            p = space.parameters[k]
            lo, hi = p.encoded_bounds
            step = config.initial_step * (hi - lo)
            cand = start.copy()
            cand[k] = cand[k] + step if cand[k] + step <= hi else cand[k] - step
            simplex.append(space.project(cand))
        vals = [f(x) for x in simplex]
        while evals < config.max_evals:
            order = np.argsort(vals)[::-1]     # maximize: best first
            simplex = [simplex[i] for i in order]
            vals = [vals[i] for i in order]
            if vals[0] > best_v:
                best_v, best_x = vals[0], simplex[0]
            spread = abs(vals[0] - vals[-1])
            if spread <= config.f_tol * (abs(vals[0]) + 1e-12):
                break
            centroid = np.mean(simplex[:-1], axis=0)
            worst = simplex[-1]
            refl = space.project(centroid + (centroid - worst))
            fr = f(refl)
            if fr > vals[0]:
                expa = space.project(centroid + 2.0 * (centroid - worst))
                fe = f(expa)
                simplex[-1], vals[-1] = (expa, fe) if fe > fr else (refl, fr)
            elif fr > vals[-2]:
                simplex[-1], vals[-1] = refl, fr
            else:
                contr = space.project(centroid - 0.5 * (centroid - worst))
                fc = f(contr)
                if fc > vals[-1]:
                    simplex[-1], vals[-1] = contr, fc
                else:
                    for k in range(1, len(simplex)):
                        simplex[k] = space.project(simplex[0] + 0.5 * (simplex[k] - simplex[0]))
                        vals[k] = f(simplex[k])
        if vals and vals[0] > best_v:
            best_v, best_x = vals[0], simplex[0]
    return OptimizeResult(best_params=space.decode(best_x), best_value=best_v,
                          evaluations=evals)


def optimize_point(objective, space: ParameterSpace, start: dict,
                   config: OptimizeConfig | None = None) -> OptimizeResult:
    """Maximize the keyrate objective over the space from a start point."""
    cfg = config or OptimizeConfig()
    x0 = space.encode(start)
    return nelder_mead(objective, space, x0, cfg)


@dataclass
class SweepResult:
    distances: list
    results: list                 # evaluator-native result per distance
    params: list                  # optimized parameter dict per distance
    meta: dict = field(default_factory=dict)


def sweep(evaluate, space: ParameterSpace, distances, start: dict,
          config: OptimizeConfig | None = None) -> SweepResult:
    """Optimize per distance, warm-starting from the previous optimum.

    ``evaluate(distance, params) -> result`` must expose ``.rate``; the
    sweep stores the full result objects in distance order.
    """
    cfg = config or OptimizeConfig()
    distances = list(distances)
    if not distances:
        return SweepResult(distances=[], results=[], params=[])
    if any(b <= a for a, b in zip(distances, distances[1:])):
        raise ValueError("distances must be strictly increasing")
    results, params = [], []
    current = dict(start)
    t0 = time.time()
    for d in distances:
        holder = {}

        def objective(p, _d=d, _h=holder):
            res = evaluate(_d, p)
            key = tuple(sorted(p.items()))
            _h[key] = res
            return res.rate

        opt = optimize_point(objective, space, current, cfg)
        best_key = tuple(sorted(opt.best_params.items()))
        res = holder.get(best_key) or evaluate(d, opt.best_params)
        results.append(res)
        params.append(opt.best_params)
        if res.rate > 0:
            current = opt.best_params
    return SweepResult(distances=distances, results=results, params=params,
                       meta={"wall_time_s": time.time() - t0,
                             "seed": cfg.seed, "max_evals": cfg.max_evals})
