import numpy as np

EPS = 1e-9


def guard(d):
    """Replace denominators with ``|d| < EPS`` by ``sign(d) * EPS`` (sign(0) = +1)."""
    d = np.asarray(d, dtype=float)
    small = np.abs(d) < EPS
    return np.where(small, np.where(d < 0, -EPS, EPS), d)


def scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x
