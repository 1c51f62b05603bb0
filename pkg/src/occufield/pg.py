"""Exact Polya-Gamma PG(1, z) sampling via Devroye's alternating-series method.

Used to turn Bernoulli-logit full conditionals into Gaussian ones: with
w ~ PG(1, x·b) the coefficient update is conjugate normal. PG(1, z) is a
quarter of a tilted Jacobi variable; the sampler mixes a truncated
inverse-Gaussian proposal on (0, t] with a truncated exponential on
(t, inf) and accepts through the partial sums of the alternating series.

The kernels take a numpy Generator so draws are reproducible and the
compiled code stays on one RNG stream with the rest of the chain.
"""

import math

import numpy as np
from numba import njit

_TRUNC = 0.64  # series crossover point; any t in [0.64, pi/2) works


@njit(cache=True)
def _norm_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@njit(cache=True)
def _series_coef(n, x):
    # n-th coefficient of the Jacobi density's alternating series at x
    np_half = n + 0.5
    if x <= _TRUNC:
        return math.pi * np_half * math.pow(2.0 / (math.pi * x), 1.5) * math.exp(-2.0 * np_half * np_half / x)
    return math.pi * np_half * math.exp(-np_half * np_half * math.pi * math.pi * x / 2.0)


@njit(cache=True)
def _trunc_inv_gauss(gen, c, t):
    """Inverse-Gaussian(mu=1/c, lambda=1) restricted to (0, t]."""
    if c * t <= 1.0:
        # mean above the cutoff: rejection with an inverse-chi-square proposal
        while True:
            e1 = gen.standard_exponential()
            e2 = gen.standard_exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = gen.standard_exponential()
                e2 = gen.standard_exponential()
            x = t / ((1.0 + t * e1) * (1.0 + t * e1))
            if gen.random() <= math.exp(-0.5 * c * c * x):
                return x
    else:
        mu = 1.0 / c
        while True:
            y = gen.standard_normal()
            y = y * y
            x = mu + 0.5 * mu * mu * y - 0.5 * mu * math.sqrt(4.0 * mu * y + (mu * y) * (mu * y))
            if gen.random() > mu / (mu + x):
                x = mu * mu / x
            if x <= t:
                return x


@njit(cache=True)
def pg_draw(gen, z):
    """One exact draw from PG(1, z)."""
    c = 0.5 * abs(z)
    k = math.pi * math.pi / 8.0 + c * c / 2.0
    p_expo = math.pi / (2.0 * k) * math.exp(-k * _TRUNC)
    # mass of the inverse-Gaussian piece: 2 exp(-c) * IG cdf at the cutoff;
    # the tail term vanishes long before exp(2c) can overflow
    sqrt_t = math.sqrt(_TRUNC)
    cdf_ig = _norm_cdf((c * _TRUNC - 1.0) / sqrt_t)
    if c < 300.0:
        cdf_ig += math.exp(2.0 * c) * _norm_cdf(-(c * _TRUNC + 1.0) / sqrt_t)
    p_ig = 2.0 * math.exp(-c) * cdf_ig
    frac_expo = p_expo / (p_expo + p_ig)
    while True:
        if gen.random() < frac_expo:
            x = _TRUNC + gen.standard_exponential() / k
        else:
            x = _trunc_inv_gauss(gen, c, _TRUNC)
        s = _series_coef(0, x)
        y = gen.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _series_coef(n, x)
                if y > s:
                    break


@njit(cache=True)
def pg_draw_vec(gen, z, out):
    for i in range(z.shape[0]):
        out[i] = pg_draw(gen, z[i])
    return out


def random_pg(z, rng: np.random.Generator) -> np.ndarray:
    """Vector of PG(1, z_i) draws."""
    z = np.ascontiguousarray(np.atleast_1d(z), dtype=float)
    out = np.empty_like(z)
    pg_draw_vec(rng, z, out)
    return out


def pg_mean(z):
    """E[PG(1, z)] = tanh(z/2) / (2 z), with the z -> 0 limit 1/4."""
    z = np.asarray(z, dtype=float)
    out = np.full_like(z, 0.25)
    nz = np.abs(z) > 1e-8
    out[nz] = np.tanh(z[nz] / 2.0) / (2.0 * z[nz])
    return out
