"""Shared test utilities: finite differences and tolerance checks."""

import numpy as np


def assert_close(analytic, numeric, rel, abs_floor):
    """Elementwise |a - n| <= rel * |n| + abs_floor."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.abs(analytic - numeric)
    bound = rel * np.abs(numeric) + abs_floor
    worst = np.max(err - bound)
    assert np.all(err <= bound), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max err {err.max():.3e}, max |numeric| {np.abs(numeric).max():.3e}"
    )


def central_difference(f, x, h):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad
