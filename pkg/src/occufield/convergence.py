"""Chain convergence diagnostics: split-chain R-hat and autocorrelation ESS.

Both accept a (chains, draws) array or a PosteriorSamples plus parameter
name. Degenerate inputs (zero within-chain variance) are flagged as NaN.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError


def _as_chain_array(samples, parameter=None) -> np.ndarray:
    if parameter is not None:
        samples = samples.parameter_array(parameter)
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise UsageError(f"expected (chains, draws) array, got shape {arr.shape}")
    return arr


def gelman_rubin(samples, parameter: str = None) -> float:
    """Split-chain potential scale reduction factor.

    Each chain is split in half, so m chains yield 2m sequences; returns
    sqrt(Vhat / W), >= 1 up to floating error. NaN flags a degenerate case
    (zero within-chain variance, e.g. identical constant chains).
    """
    arr = _as_chain_array(samples, parameter)
    m, n = arr.shape
    if m < 2:
        raise UsageError("gelman_rubin needs at least 2 chains")
    if n < 10:
        raise UsageError("gelman_rubin needs at least 10 draws per chain")
    half = n // 2
    split = np.concatenate([arr[:, :half], arr[:, half : 2 * half]], axis=0)
    within = split.var(axis=1, ddof=1).mean()
    if within <= 0 or not np.isfinite(within):
        return float("nan")
    n_s = split.shape[1]
    between = n_s * split.mean(axis=1).var(ddof=1)
    var_hat = (n_s - 1) / n_s * within + between / n_s
    # chance fluctuations can push var_hat below W; the statistic is defined >= 1
    return float(max(np.sqrt(var_hat / within), 1.0))


def effective_sample_size(samples, parameter: str = None) -> float:
    """Autocorrelation-sum ESS over all chains pooled.

    Per-chain autocorrelations are averaged; the lag sum uses Geyer's
    initial-positive-sequence truncation on paired lags. The estimate is
    capped at the total number of draws; a constant chain is degenerate
    and reported as NaN.
    """
    arr = _as_chain_array(samples, parameter)
    m, n = arr.shape
    total = m * n
    if total < 100:
        raise UsageError("effective_sample_size needs at least 100 draws")
    var = arr.var(axis=1, ddof=0).mean()
    if var <= 0 or not np.isfinite(var):
        return float("nan")
    max_lag = n - 1
    acov = np.zeros(max_lag + 1)
    for c in range(m):
        x = arr[c] - arr[c].mean()
        full = np.correlate(x, x, mode="full")[n - 1 :]
        acov += full / n
    acov /= m
    rho = acov / acov[0]
    # pairwise sums of (rho_{2k-1}, rho_{2k}); stop at the first negative pair
    tau = 1.0
    k = 1
    while k + 1 <= max_lag:
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
        k += 2
    ess = total / tau
    return float(min(max(ess, 1e-12), total))
