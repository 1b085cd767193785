"""Shared Monte Carlo helpers for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from clocklab.clocks import ClockParams, ou_transition, skew_normalizer


def batch_paths(p: ClockParams, times, n_paths: int, dt: float, seed: int,
                chunk: int = 1000):
    """Sample many clock paths and return their values at selected times.

    Returns a dict ``t -> (states, skews, displays)`` of arrays of length
    ``n_paths``, generated with the exact one-step transition and
    trapezoidal display integration (the same scheme the library uses,
    but vectorized across paths).
    """
    times = sorted(times)
    n_steps = int(round(times[-1] / dt))
    record = {int(round(t / dt)): t for t in times}
    if len(record) != len(times):
        raise ValueError("requested times collide on the grid")
    decay, noise_std = ou_transition(p, dt)
    grid_times = np.arange(n_steps + 1) * dt
    c = skew_normalizer(grid_times, p)
    rng = np.random.default_rng(seed)
    out = {t: [] for t in times}
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        z = rng.standard_normal((m, n_steps))
        states = np.empty((m, n_steps + 1))
        states[:, 0] = 0.0
        states[:, 1:] = lfilter([noise_std], [1.0, -decay], z, axis=1)
        skews = c[None, :] * np.exp(states)
        displays = np.empty((m, n_steps + 1))
        displays[:, 0] = 0.0
        np.cumsum(0.5 * dt * (skews[:, 1:] + skews[:, :-1]), axis=1,
                  out=displays[:, 1:])
        for k, t in record.items():
            out[t].append((states[:, k].copy(), skews[:, k].copy(),
                           displays[:, k].copy()))
        done += m
    return {
        t: tuple(np.concatenate(parts) for parts in zip(*chunks))
        for t, chunks in out.items()
    }


def sem(samples) -> float:
    """Standard error of the sample mean."""
    samples = np.asarray(samples)
    return float(samples.std(ddof=1) / np.sqrt(len(samples)))


def var_se(samples) -> float:
    """Approximate standard error of the sample variance (normal theory)."""
    samples = np.asarray(samples)
    return float(samples.var(ddof=1) * np.sqrt(2.0 / (len(samples) - 1)))
