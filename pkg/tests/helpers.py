"""Independent oracles shared by several test modules."""
import numpy as np


def central_difference(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def smoothness_violations(problem, pairs, scale, seed, center=None):
    """Count pairs breaking F_i(y) - F_i(x) <= <grad F_i(x), y-x> + L/2 |y-x|^2 (tiny float slack)."""
    rng = np.random.default_rng(seed)
    center = problem.initial_point() if center is None else center
    L = problem.L
    bad = 0
    for p in range(pairs):
        i = p % problem.n
        x = center + scale * rng.standard_normal(problem.d)
        y = center + scale * rng.standard_normal(problem.d)
        lhs = problem.local_loss(i, y) - problem.local_loss(i, x)
        rhs = problem.local_gradient(i, x) @ (y - x) + 0.5 * L * (y - x) @ (y - x)
        if lhs > rhs + 1e-9 * (1 + abs(rhs)):
            bad += 1
    return bad
