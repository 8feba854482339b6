"""Seeded trial suites over random instances, shared by the CLI and the tests.

Every suite returns a JSON-ready dict with the number of violations, the
smallest slack seen and one entry per instance.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .arch import random_dag
from .bounds import rademacher_bound
from .verify import (
    concentration_check,
    empirical_rademacher,
    lambda_objective,
    lambda_star,
    peeling_lhs,
    peeling_rhs,
    random_peeling_instance,
)

PEELING_TOL = 1e-9
LAMBDA_GRID = np.logspace(-8.0, 8.0, 1000)
LAMBDA_RTOL = 1e-3


def _summary(name: str, seed: int, rows: list[dict], violations: int) -> dict:
    return {
        "check": name,
        "seed": seed,
        "trials": len(rows),
        "violations": violations,
        "min_slack": min((r["slack"] for r in rows), default=float("nan")),
        "instances": rows,
    }


def check_peeling(seed: int = 0, trials: Optional[int] = None) -> dict:
    """LHS <= RHS + 1e-9 on random instances (q <= 3, m <= 8, p <= 3, h <= 3)."""
    rng = np.random.default_rng(seed)
    rows, bad = [], 0
    for k in range(trials or 200):
        inst = random_peeling_instance(rng)
        lhs = peeling_lhs(inst, seed=seed * 100003 + k)
        rhs = peeling_rhs(inst)
        bad += lhs > rhs + PEELING_TOL
        rows.append({"q": inst.q, "m": inst.m, "p": inst.p, "h": inst.h, "g": inst.g,
                     "lhs": lhs, "rhs": rhs, "slack": rhs - lhs})
    return _summary("peeling", seed, rows, int(bad))


def check_dominance(seed: int = 0, trials: Optional[int] = None) -> dict:
    """Closed-form Rademacher bound >= empirical lower bound on tiny networks."""
    rng = np.random.default_rng(seed)
    rows, bad = [], 0
    for k in range(trials or 50):
        L = int(rng.integers(1, 4))
        g = random_dag(rng, L, max_width=6, max_deg=3, d0=int(rng.integers(1, 9)))
        m = int(rng.integers(1, 9))
        X = rng.uniform(0.0, 1.0, size=(m, g.channels[0], g.widths[0]))
        r = float(rng.choice([0.5, 1.0, 2.0]))
        emp = empirical_rademacher(g, r, X, seed=seed * 100003 + k).value
        bound = rademacher_bound(g, r, X)
        bad += emp > bound
        rows.append({"L": L, "widths": list(g.widths), "m": m, "rho": r,
                     "empirical": emp, "bound": bound, "slack": bound - emp})
    return _summary("rademacher", seed, rows, int(bad))


def check_concentration(seed: int = 0, trials: Optional[int] = None) -> dict:
    """The moment bound holds with strictly positive log-scale slack."""
    rng = np.random.default_rng(seed)
    rows, bad = [], 0
    for _ in range(trials or 100):
        m = int(rng.integers(1, 11))
        p = int(rng.integers(1, 5))
        z = rng.standard_normal((m, p)) * rng.uniform(0.1, 2.0)
        alpha = float(10.0 ** rng.uniform(-2.0, 1.0))
        res = concentration_check(z, alpha)
        bad += not res.slack > 0
        rows.append({"m": m, "p": p, "alpha": alpha, "lhs_log": res.lhs_log,
                     "rhs_log": res.rhs_log, "slack": res.slack})
    return _summary("concentration", seed, rows, int(bad))


def check_lambda(seed: int = 0, trials: Optional[int] = None) -> dict:
    """The closed-form lambda matches the minimum over a fixed log grid within 1e-3."""
    rng = np.random.default_rng(seed)
    rows, bad = [], 0
    while len(rows) < (trials or 20):
        L = int(rng.integers(1, 9))
        deg = int(rng.integers(1, 26))
        r = float(10.0 ** rng.uniform(-1.0, 2.0))
        P = float(10.0 ** rng.uniform(0.0, 6.0))
        lam = lambda_star(L, deg, r, P)
        if not LAMBDA_GRID[0] < lam < LAMBDA_GRID[-1]:
            continue
        at_star = float(lambda_objective(lam, L, deg, r, P))
        grid_min = float(np.min(lambda_objective(LAMBDA_GRID, L, deg, r, P)))
        closed = r * math.sqrt(P) * (1.0 + math.sqrt(2.0 * L * math.log(2.0 * deg)))
        rel = (grid_min - at_star) / at_star
        ok = -1e-12 <= rel <= LAMBDA_RTOL and math.isclose(at_star, closed, rel_tol=1e-12)
        bad += not ok
        rows.append({"L": L, "deg": deg, "rho": r, "P": P, "lambda_star": lam,
                     "value_at_star": at_star, "grid_min": grid_min, "slack": rel})
    return _summary("lambda", seed, rows, int(bad))
