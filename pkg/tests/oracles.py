"""Numerical-integration oracles, independent of the closed forms under test."""
import numpy as np
from scipy import integrate, stats


def kl_quad(m1, s1, m2, s2):
    p, q = stats.norm(m1, s1), stats.norm(m2, s2)
    f = lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x))
    lo, hi = m1 - 14 * s1, m1 + 14 * s1
    return integrate.quad(f, lo, hi, points=[m1], limit=400, epsabs=1e-13, epsrel=1e-12)[0]


def crps_quad(m, s, y):
    F = stats.norm(m, s).cdf
    lo, hi = min(m - 14 * s, y), max(m + 14 * s, y)
    left = integrate.quad(lambda x: F(x) ** 2, lo, y, limit=400, epsabs=1e-13)[0]
    right = integrate.quad(lambda x: (1 - F(x)) ** 2, y, hi, limit=400, epsabs=1e-13)[0]
    return left + right


def interval_quad(m, s, y, L):
    lp = stats.norm(m, s).logpdf
    return -integrate.quad(lp, y - L, y + L, limit=200, epsabs=1e-13)[0]


def random_cases(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        (rng.normal(0, 2), rng.uniform(0.2, 3), rng.normal(0, 2), rng.uniform(0.2, 3),
         rng.normal(0, 3), rng.uniform(0.05, 3))
        for _ in range(n)
    ]
