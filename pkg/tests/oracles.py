"""Independent reference implementations the tests compare against.

Everything here is deliberately naive: brute force, closed forms, or
literal translations of definitions. Nothing imports from doughplan
internals beyond public entry points needed to build inputs.
"""

import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment


def half_sq_cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - y[None, :, :]
    return 0.5 * np.sum(diff * diff, axis=-1)


def hungarian_cost(x: np.ndarray, y: np.ndarray) -> float:
    """Optimal assignment cost under c = 0.5 * ||x - y||^2, mean-normalized."""
    c = half_sq_cost_matrix(x, y)
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].mean())


def brute_force_cost(x: np.ndarray, y: np.ndarray) -> float:
    """Minimum over every permutation; only viable for tiny clouds."""
    n = len(x)
    assert n <= 7, "factorial blowup"
    c = half_sq_cost_matrix(x, y)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, c[np.arange(n), perm].mean())
    return float(best)


def fd_cloud_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar cloud function, one coordinate at a time."""
    g = np.zeros_like(x, dtype=float)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp = x.copy()
            xm = x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            g[i, j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_action_gradient(loss_fn, actions: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar loss over an action matrix."""
    g = np.zeros_like(actions, dtype=float)
    for i in range(actions.shape[0]):
        for j in range(actions.shape[1]):
            ap = actions.copy()
            am = actions.copy()
            ap[i, j] += h
            am[i, j] -= h
            g[i, j] = (loss_fn(ap) - loss_fn(am)) / (2.0 * h)
    return g


def sphere_union_volume(r: float, d: float) -> float:
    """Closed-form volume of two equal spheres with center distance d < 2r."""
    lens = np.pi * (4.0 * r + d) * (2.0 * r - d) ** 2 / 12.0
    return 2.0 * (4.0 / 3.0) * np.pi * r**3 - lens


def sum_l1_rows(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of per-point L1 distances, written as a naive loop."""
    total = 0.0
    for pa, pb in zip(a, b):
        for ca, cb in zip(pa, pb):
            total += abs(ca - cb)
    return total
