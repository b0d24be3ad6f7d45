"""Independent reference computations used by the tests."""
import math

import numpy as np

GRID = np.arange(-30.0, 30.0 + 5e-4, 1e-3)


def grid_product_moments(means, variances, grid=GRID):
    """Mean and variance of the normalized pointwise product of 1-D Normal
    densities, by brute-force numerical integration on a grid."""
    log_density = np.zeros_like(grid)
    for m, v in zip(means, variances):
        log_density += -0.5 * (grid - m) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
    w = np.exp(log_density - log_density.max())
    w /= w.sum()
    mean = float(np.sum(w * grid))
    var = float(np.sum(w * (grid - mean) ** 2))
    return mean, var


def mc_kl(mu_q, var_q, mu_p, var_p, n, rng):
    """Monte Carlo estimate of KL(q||p) for diagonal Gaussians, summed over
    dimensions.  Returns (estimate, standard error)."""
    mu_q, var_q, mu_p, var_p = map(np.asarray, (mu_q, var_q, mu_p, var_p))
    z = mu_q + np.sqrt(var_q) * rng.standard_normal((n,) + mu_q.shape)
    log_q = -0.5 * ((z - mu_q) ** 2 / var_q + np.log(2 * np.pi * var_q))
    log_p = -0.5 * ((z - mu_p) ** 2 / var_p + np.log(2 * np.pi * var_p))
    d = (log_q - log_p).reshape(n, -1).sum(1)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n))


def central_difference(f, x, h):
    """d f / d x[i] for every entry of a flat float64 array, by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
