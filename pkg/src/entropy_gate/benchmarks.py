"""Classic minimization test functions for checking the swarm engine.

Each entry maps a name to ``(function, default half-width)``; the search box
is ``[-w, w]^n`` and every function has its global minimum 0 at the origin
except Rosenbrock (at all ones).
"""

import numpy as np


def sphere(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x))


def rastrigin(x):
    x = np.asarray(x, dtype=np.float64)
    return float(10.0 * x.size + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))


def rosenbrock(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


def ackley(x):
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    a = -20.0 * np.exp(-0.2 * np.sqrt(np.sum(x * x) / n))
    b = -np.exp(np.sum(np.cos(2.0 * np.pi * x)) / n)
    return float(a + b + 20.0 + np.e)


def griewank(x):
    x = np.asarray(x, dtype=np.float64)
    i = np.arange(1, x.size + 1)
    return float(1.0 + np.sum(x * x) / 4000.0 - np.prod(np.cos(x / np.sqrt(i))))


FUNCTIONS = {
    "sphere": (sphere, 5.0),
    "rastrigin": (rastrigin, 5.12),
    "rosenbrock": (rosenbrock, 2.048),
    "ackley": (ackley, 32.768),
    "griewank": (griewank, 600.0),
}
