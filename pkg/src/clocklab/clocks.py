"""Ground-truth stochastic clocks and their analytics.

Each hardware clock is modeled by a mean-reverting log-skew state
``X(t)`` (an Ornstein-Uhlenbeck process started at zero), a positive
instantaneous skew ``a(t) = c(t) * exp(X(t))`` whose deterministic
normalizer ``c(t)`` keeps the mean skew at exactly one, and a time
display ``tau(t)`` obtained by integrating the skew.  This module
generates sample paths on a fixed grid, evaluates the closed-form
moments and variance bounds of all three processes, computes the Allan
variance of the skew (analytically and from display samples), fits
clock parameters to measured Allan curves, and derives the parameters
of the *relative* clock seen across a link between two nodes.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

__all__ = [
    "ClockParams",
    "ClockTrajectory",
    "RelParams",
    "AllanPoint",
    "ou_step_exact",
    "ou_step_euler",
    "ou_transition",
    "simulate_clock",
    "sample_displays",
    "ou_variance",
    "skew_normalizer",
    "skew_moments",
    "skew_autocorrelation",
    "display_variance_bounds",
    "allan_variance_analytic",
    "allan_variance_empirical",
    "fit_params_from_allan",
    "relative_params",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_allan_csv",
]


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClockParams:
    """Parameters of one clock.

    Parameters
    ----------
    alpha : float
        Mean-reversion rate of the log-skew state (1/time).  Shared by
        every clock in a network; must be positive.
    epsilon : float
        Diffusion coefficient of the log-skew state (1/sqrt(time)).
        Zero only for the reference clock, which then ticks perfectly.
    """

    alpha: float
    epsilon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be nonnegative and finite, got {self.epsilon!r}")

    @property
    def stationary_state_variance(self) -> float:
        """Long-run variance of the log-skew state, epsilon^2 / (2 alpha)."""
        return self.epsilon**2 / (2.0 * self.alpha)


@dataclass(frozen=True)
class RelParams:
    """Parameters of the relative clock of a link (i, j).

    The ratio ``a_ij(t) = a_j(t) / a_i(t)`` of two independent clock
    skews is itself a log-normal clock with combined diffusion
    ``eps_ij = sqrt(eps_i^2 + eps_j^2)`` and a deterministic normalizer
    ``c_ij(t)`` that converges to ``c_ij_inf``.
    """

    alpha: float
    eps_i: float
    eps_j: float
    eps_ij: float = field(init=False)
    c_ij_inf: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "eps_ij", math.hypot(self.eps_i, self.eps_j))
        object.__setattr__(
            self, "c_ij_inf", math.exp(-(self.eps_j**2 - self.eps_i**2) / (4.0 * self.alpha))
        )

    def c_ij(self, t):
        """Deterministic normalizer of the relative skew at time ``t``.

        Equals ``c_j(t) / c_i(t)``; starts at 1 and decays to
        ``c_ij_inf`` at rate ``2 alpha``.
        """
        q = (self.eps_j**2 - self.eps_i**2) / self.alpha
        return self.c_ij_inf * np.exp(0.25 * q * np.exp(-2.0 * self.alpha * np.asarray(t, float)))

    def relative_skew_mean(self, t):
        """Mean of the relative skew a_j/a_i at time ``t``.

        Exceeds one whenever the *denominator* clock is noisy: the
        mean equals ``exp(Var X_i(t))`` because 1/a_i is log-normal
        with positive bias while a_j has mean one.
        """
        vi = ou_variance(t, ClockParams(self.alpha, self.eps_i)) if self.eps_i > 0 else 0.0
        return np.exp(vi)

    def combined(self) -> ClockParams:
        """The (alpha, eps_ij) pair driving the relative state X_j - X_i."""
        return ClockParams(self.alpha, self.eps_ij)


@dataclass(frozen=True)
class AllanPoint:
    """One point (averaging interval T, Allan variance sigma2) of an Allan curve."""

    T: float
    sigma2: float

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError(f"averaging interval must be positive, got {self.T!r}")
        if self.sigma2 < 0:
            raise ValueError(f"Allan variance must be nonnegative, got {self.sigma2!r}")


@dataclass(frozen=True)
class ClockTrajectory:
    """A ground-truth clock sample path on a uniform reference-time grid.

    Attributes
    ----------
    dt : float
        Grid step in reference time.
    states : numpy.ndarray
        Log-skew state X at grid points; ``states[0] == 0``.
    skews : numpy.ndarray
        Instantaneous skew a at grid points; strictly positive.
    displays : numpy.ndarray
        Time display tau at grid points; ``displays[0] == 0`` and
        strictly increasing.
    seed : int
        RNG seed that produced the path (recorded for reproducibility).
    """

    dt: float
    states: np.ndarray
    skews: np.ndarray
    displays: np.ndarray
    seed: int

    @property
    def times(self) -> np.ndarray:
        """Reference-time grid points."""
        return np.arange(len(self.states)) * self.dt

    def display_at(self, t: float) -> float:
        """Display value at reference time ``t``, linearly interpolated."""
        return float(np.interp(t, self.times, self.displays))


# ---------------------------------------------------------------------------
# Single-step transitions
# ---------------------------------------------------------------------------

def ou_transition(p: ClockParams, dt: float) -> tuple[float, float]:
    """Decay factor and noise standard deviation of the exact OU transition.

    Returns ``(exp(-alpha dt), epsilon * sqrt((1 - exp(-2 alpha dt)) / (2 alpha)))``,
    the two coefficients of the distributionally exact one-step recursion.
    """
    if dt < 0:
        raise ValueError(f"step must be nonnegative, got {dt!r}")
    decay = math.exp(-p.alpha * dt)
    noise_std = p.epsilon * math.sqrt((1.0 - decay * decay) / (2.0 * p.alpha))
    return decay, noise_std


def ou_step_exact(x, dt: float, p: ClockParams, z):
    """Advance the log-skew state by one exact-in-distribution step.

    Parameters
    ----------
    x : float or numpy.ndarray
        Current state value(s).
    dt : float
        Positive step size in reference time.
    p : ClockParams
        Clock parameters.
    z : float or numpy.ndarray
        Standard normal draw(s), one per state.

    Returns
    -------
    float or numpy.ndarray
        ``exp(-alpha dt) x + epsilon sqrt((1 - exp(-2 alpha dt)) / (2 alpha)) z``.
        Iterating this recursion reproduces the continuous-time
        transition law exactly at the grid points, for any step size.

    Raises
    ------
    ValueError
        If ``dt <= 0`` or any input is non-finite ("non-finite state").
    """
    if not dt > 0:
        raise ValueError(f"step must be positive, got {dt!r}")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite state")
    decay, noise_std = ou_transition(p, dt)
    out = decay * x + noise_std * z
    return float(out) if out.ndim == 0 else out


def ou_step_euler(x, dt: float, p: ClockParams, z):
    """Advance the state by one Euler-Maruyama step (strong order 1 here).

    Provided for the convergence comparison against :func:`ou_step_exact`;
    simulation code always uses the exact step.

    Raises
    ------
    ValueError
        If ``alpha * dt >= 1`` ("unstable step") or inputs are non-finite.
    """
    if not dt > 0:
        raise ValueError(f"step must be positive, got {dt!r}")
    if p.alpha * dt >= 1.0:
        raise ValueError(f"unstable step: alpha*dt = {p.alpha * dt:g} >= 1")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite state")
    out = (1.0 - p.alpha * dt) * x + p.epsilon * math.sqrt(dt) * z
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Path generation
# ---------------------------------------------------------------------------

def skew_normalizer(t, p: ClockParams):
    """Deterministic factor c(t) = exp(-(eps^2/4 alpha)(1 - exp(-2 alpha t))).

    Multiplying ``exp(X(t))`` by this factor keeps the mean skew at one
    for every ``t``.
    """
    t = np.asarray(t, dtype=float)
    out = np.exp(-0.25 * p.epsilon**2 / p.alpha * (1.0 - np.exp(-2.0 * p.alpha * t)))
    return float(out) if out.ndim == 0 else out


def _ar1_states(n_steps: int, decay: float, noise_std: float, z: np.ndarray,
                x0: float = 0.0) -> np.ndarray:
    """States x_1..x_n of x_k = decay*x_{k-1} + noise_std*z_k, given x_0."""
    zi = np.array([decay * x0])
    out, _ = lfilter([noise_std], [1.0, -decay], z[:n_steps], zi=zi)
    return out


def simulate_clock(p: ClockParams, horizon: float, dt: float, seed: int) -> ClockTrajectory:
    """Generate one ground-truth clock path on a uniform grid.

    Parameters
    ----------
    p : ClockParams
        Clock parameters.
    horizon : float
        Final reference time; the grid has ``round(horizon/dt)`` steps.
    dt : float
        Grid step.
    seed : int
        Seed for the path's own random generator; recorded on the
        result, so the path is bit-reproducible.

    Returns
    -------
    ClockTrajectory
        States advanced with the exact transition, skews
        ``c(k dt) exp(X_k)``, and displays integrated with the
        trapezoidal rule on the grid.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon!r}")
    if not dt > 0:
        raise ValueError(f"step must be positive, got {dt!r}")
    n_steps = max(1, int(round(horizon / dt)))
    rng = np.random.default_rng(seed)
    decay, noise_std = ou_transition(p, dt)
    z = rng.standard_normal(n_steps)
    states = np.empty(n_steps + 1)
    states[0] = 0.0
    states[1:] = _ar1_states(n_steps, decay, noise_std, z)
    times = np.arange(n_steps + 1) * dt
    skews = skew_normalizer(times, p) * np.exp(states)
    displays = np.empty(n_steps + 1)
    displays[0] = 0.0
    np.cumsum(0.5 * dt * (skews[1:] + skews[:-1]), out=displays[1:])
    return ClockTrajectory(dt=dt, states=states, skews=skews, displays=displays, seed=seed)


def sample_displays(p: ClockParams, spacing: float, count: int, dt: float, seed: int,
                    chunk_steps: int = 1_000_000) -> np.ndarray:
    """Display values tau(0), tau(spacing), ..., tau(count*spacing).

    Streams the underlying grid in chunks so that long horizons (used
    by empirical Allan-variance estimation) never materialize the full
    path.  ``spacing`` must be an integer multiple of ``dt``.
    """
    if not (spacing > 0 and dt > 0 and count >= 1):
        raise ValueError("spacing, dt must be positive and count >= 1")
    per = int(round(spacing / dt))
    if per < 1 or abs(per * dt - spacing) > 1e-9 * spacing:
        raise ValueError(f"spacing {spacing!r} is not a multiple of dt {dt!r}")
    total = per * count
    rng = np.random.default_rng(seed)
    decay, noise_std = ou_transition(p, dt)
    out = np.empty(count + 1)
    out[0] = 0.0
    acc = 0.0          # display integral so far
    x_prev = 0.0       # state at the last grid point processed
    a_prev = 1.0       # skew at the last grid point processed
    done = 0           # grid steps processed
    next_record = 1
    while done < total:
        n = min(chunk_steps, total - done)
        z = rng.standard_normal(n)
        xs = _ar1_states(n, decay, noise_std, z, x0=x_prev)
        ts = (done + 1 + np.arange(n)) * dt
        sk = skew_normalizer(ts, p) * np.exp(xs)
        seg = np.empty(n)
        seg[0] = 0.5 * dt * (a_prev + sk[0])
        seg[1:] = 0.5 * dt * (sk[1:] + sk[:-1])
        cum = acc + np.cumsum(seg)
        while next_record * per <= done + n:
            out[next_record] = cum[next_record * per - done - 1]
            next_record += 1
        acc = cum[-1]
        x_prev = xs[-1]
        a_prev = sk[-1]
        done += n
    return out


# ---------------------------------------------------------------------------
# Closed-form moments and bounds
# ---------------------------------------------------------------------------

def ou_variance(t, p: ClockParams):
    """Variance of the log-skew state: (eps^2 / 2 alpha)(1 - exp(-2 alpha t))."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be nonnegative")
    out = p.stationary_state_variance * (1.0 - np.exp(-2.0 * p.alpha * t))
    return float(out) if out.ndim == 0 else out


def skew_moments(t, p: ClockParams):
    """Mean and variance of the skew at time ``t``.

    The mean is exactly one by construction; the variance is
    ``exp(Var X(t)) - 1``, nondecreasing in ``t`` and bounded by
    ``exp(eps^2 / 2 alpha) - 1``.
    """
    var = np.exp(ou_variance(t, p)) - 1.0
    mean = np.ones_like(np.asarray(t, dtype=float))
    if mean.ndim == 0:
        return 1.0, float(var)
    return mean, var


def skew_autocorrelation(r, s, p: ClockParams):
    """E[a(r) a(s)] = exp((eps^2/2 alpha)(exp(-alpha |r-s|) - exp(-alpha (r+s)))).

    Symmetric in (r, s); equals 1 + Var a(t) on the diagonal and 1 when
    either argument is 0 (the skew starts deterministically at one).
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(r < 0) or np.any(s < 0):
        raise ValueError("times must be nonnegative")
    q = p.stationary_state_variance
    out = np.exp(q * (np.exp(-p.alpha * np.abs(r - s)) - np.exp(-p.alpha * (r + s))))
    return float(out) if out.ndim == 0 else out


def display_variance_bounds(t, p: ClockParams):
    """Lower and upper bounds on Var tau(t).

    The lower bound ``(exp(h(t)) - 1) t^2`` applies Jensen's inequality
    to the average covariance

        h(t) = (eps^2 / (alpha^2 t^2)) [ t + (1 - exp(-2 alpha t))/(2 alpha)
                                         - (2/alpha)(1 - exp(-alpha t)) ],

    and the upper bound is ``(exp(eps^2 / 2 alpha) - 1) t^2``.  Both
    scale as t^2; the true variance grows close to linearly in between.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    a, e2 = p.alpha, p.epsilon**2
    h = e2 / (a**2 * t**2) * (
        t + (1.0 - np.exp(-2.0 * a * t)) / (2.0 * a) - 2.0 / a * (1.0 - np.exp(-a * t))
    )
    lower = np.expm1(h) * t * t
    upper = np.expm1(e2 / (2.0 * a)) * t * t
    if lower.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


# ---------------------------------------------------------------------------
# Allan variance
# ---------------------------------------------------------------------------

def _skew_kernel(u: np.ndarray, p: ClockParams) -> np.ndarray:
    """Stationary-phase skew correlation kernel K(u) = exp(q exp(-alpha |u|))."""
    return np.exp(p.stationary_state_variance * np.exp(-p.alpha * np.abs(u)))


def allan_variance_analytic(T: float, p: ClockParams, quad_steps: int = 256) -> float:
    """Allan variance of the skew over averaging interval ``T``.

    Evaluates the two double integrals of the skew correlation kernel
    over ``[0,T]^2`` and ``[0,T] x [-T,0]`` by composite 2-D
    trapezoidal quadrature with ``quad_steps`` panels per axis, and
    returns their difference scaled by ``1/T^2``.

    Parameters
    ----------
    T : float
        Averaging interval, positive.
    p : ClockParams
        Clock parameters.
    quad_steps : int
        Panels per axis (at least 64).

    Returns
    -------
    float
        Nonnegative up to quadrature tolerance; exactly 0 for a
        noiseless clock.
    """
    if not T > 0:
        raise ValueError(f"averaging interval must be positive, got {T!r}")
    if quad_steps < 64:
        raise ValueError(f"quad_steps must be at least 64, got {quad_steps!r}")
    h = T / quad_steps
    grid = np.arange(quad_steps + 1) * h
    w = np.full(quad_steps + 1, h)
    w[0] = w[-1] = 0.5 * h
    tt = grid[:, None]
    same = _skew_kernel(tt - grid[None, :], p)          # s in [0, T]
    opposite = _skew_kernel(tt - (grid[None, :] - T), p)  # s in [-T, 0]
    i_same = w @ same @ w
    i_opposite = w @ opposite @ w
    return float((i_same - i_opposite) / (T * T))


def allan_variance_empirical(displays, T: float) -> float:
    """Allan variance estimated from display samples spaced ``T`` apart.

    ``displays`` holds tau(0), tau(T), tau(2T), ...; consecutive
    window-averaged skews ``abar_k = (tau(kT) - tau((k-1)T)) / T`` are
    differenced and the estimate is ``sum(diff^2) / (2 * n_diffs)``.

    Raises
    ------
    ValueError
        With fewer than 3 samples ("insufficient samples").
    """
    if not T > 0:
        raise ValueError(f"averaging interval must be positive, got {T!r}")
    displays = np.asarray(displays, dtype=float)
    if displays.ndim != 1 or len(displays) < 3:
        raise ValueError("insufficient samples")
    abar = np.diff(displays) / T
    d = np.diff(abar)
    return float(np.sum(d * d) / (2.0 * len(d)))


def fit_params_from_allan(points, quad_steps: int = 128, n_starts: int = 8,
                          seed: int = 0) -> ClockParams:
    """Fit clock parameters to an Allan-variance curve.

    Minimizes the mean absolute error between
    :func:`allan_variance_analytic` and the given points by
    derivative-free multi-start coordinate descent over
    ``(log alpha, log epsilon)``; starts are drawn log-uniformly over
    alpha in [1e-1, 1e3] and epsilon in [1e-6, 1e1].

    Parameters
    ----------
    points : sequence of AllanPoint
        At least two points with distinct positive intervals.
    quad_steps : int
        Quadrature panels used during fitting (coarser than the
        default analytic evaluation; the objective is smooth in the
        parameters so this only rescales a shared bias).
    n_starts : int
        Number of random restarts.
    seed : int
        Seed of the restart generator, so fits are reproducible.

    Returns
    -------
    ClockParams
        The best candidate found; the residual is logged.

    Raises
    ------
    ValueError
        If no candidate achieves a finite objective ("fit failed").
    """
    pts = list(points)
    if len(pts) < 2:
        raise ValueError("need at least two Allan points")
    ts = np.array([q.T for q in pts])
    if np.any(ts <= 0) or len(np.unique(ts)) != len(ts):
        raise ValueError("averaging intervals must be distinct and positive")
    targets = np.array([q.sigma2 for q in pts])

    def objective(log_a: float, log_e: float) -> float:
        cand = ClockParams(math.exp(log_a), math.exp(log_e))
        vals = np.array([allan_variance_analytic(t, cand, quad_steps) for t in ts])
        return float(np.mean(np.abs(vals - targets)))

    lo = (math.log(1e-3), math.log(1e-8))
    hi = (math.log(1e6), math.log(1e3))
    rng = np.random.default_rng(seed)
    starts = np.column_stack([
        rng.uniform(math.log(1e-1), math.log(1e3), n_starts),
        rng.uniform(math.log(1e-6), math.log(1e1), n_starts),
    ])
    best = (math.inf, None)
    for u0, v0 in starts:
        u, v = float(u0), float(v0)
        f = objective(u, v)
        step = 1.0
        while step > 1e-4:
            improved = False
            for axis in (0, 1):
                for sign in (1.0, -1.0):
                    while True:
                        cu = u + sign * step if axis == 0 else u
                        cv = v + sign * step if axis == 1 else v
                        cu = min(max(cu, lo[0]), hi[0])
                        cv = min(max(cv, lo[1]), hi[1])
                        fc = objective(cu, cv)
                        if math.isfinite(fc) and fc < f:
                            u, v, f = cu, cv, fc
                            improved = True
                        else:
                            break
            if not improved:
                step *= 0.5
        if math.isfinite(f) and f < best[0]:
            best = (f, (u, v))
    if best[1] is None:
        raise ValueError("fit failed: no finite-objective candidate")
    u, v = best[1]
    logger.info("Allan fit: alpha=%.6g epsilon=%.6g residual=%.3e",
                math.exp(u), math.exp(v), best[0])
    return ClockParams(math.exp(u), math.exp(v))


# ---------------------------------------------------------------------------
# Relative (link) parameters
# ---------------------------------------------------------------------------

def relative_params(pi: ClockParams, pj: ClockParams) -> RelParams:
    """Parameters of the relative clock a_j / a_i across a link.

    Both endpoints must share the same mean-reversion rate; the
    relative log-skew ``X_j - X_i`` is again mean-reverting with
    combined diffusion ``sqrt(eps_i^2 + eps_j^2)``.

    Raises
    ------
    ValueError
        If the rates differ ("alpha convention violated").
    """
    if pi.alpha != pj.alpha:
        raise ValueError(
            f"alpha convention violated: {pi.alpha!r} != {pj.alpha!r}"
        )
    return RelParams(alpha=pi.alpha, eps_i=pi.epsilon, eps_j=pj.epsilon)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def write_trajectory_csv(traj: ClockTrajectory, path) -> None:
    """Write a trajectory as CSV with header ``t,x,skew,display``."""
    data = np.column_stack([traj.times, traj.states, traj.skews, traj.displays])
    np.savetxt(path, data, delimiter=",", header="t,x,skew,display",
               comments="", fmt="%.17g")


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    """Read a trajectory CSV back into arrays keyed by column name."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if [c.strip() for c in header] != ["t", "x", "skew", "display"]:
        raise ValueError(f"unexpected trajectory header {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, k] for k, name in enumerate(header)}


def write_allan_csv(points, path) -> None:
    """Write Allan points as CSV with header ``T,sigma2``."""
    data = np.array([[q.T, q.sigma2] for q in points])
    np.savetxt(path, data, delimiter=",", header="T,sigma2", comments="", fmt="%.17g")
