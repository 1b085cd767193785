"""Link measurements from time-stamped packet exchanges.

A sender emits two packets carrying its own display values; the
receiver logs its display at each arrival.  The log-ratio of the
receive and send intervals, plus a deterministic correction that
removes the drift of the relative-skew normalizer, is an unbiased noisy
measurement of the relative log-skew across the link.  This module
also models the random per-packet delays, the variance of the induced
measurement noise, the two-way offset/delay estimator, and the
receipt-time prediction used as the protocol-level performance metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from clocklab.clocks import ClockParams, relative_params

__all__ = [
    "DelayModel",
    "StampRecord",
    "Measurement",
    "draw_delay",
    "noise_variance",
    "skew_measurement",
    "measurement_epoch",
    "offset_delay_estimate",
    "predict_receipt",
]

DELAY_KINDS = ("constant", "uniform", "truncated-normal")


@dataclass(frozen=True)
class DelayModel:
    """Per-packet communication delay distribution.

    Draws are i.i.d. across packets and links, independent of the clock
    noises, strictly positive, and bounded by ``bound``.

    Parameters
    ----------
    kind : str
        One of ``constant``, ``uniform`` (on [mean-spread, mean+spread])
        or ``truncated-normal`` (normal(mean, spread^2) truncated to
        (0, bound]).
    mean : float
        Central delay value.
    spread : float
        Half-width (uniform) or standard deviation (truncated-normal);
        ignored for constant delays.
    bound : float or None
        Largest possible delay; derived from the other fields when
        omitted.
    """

    kind: str
    mean: float
    spread: float = 0.0
    bound: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in DELAY_KINDS:
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if not self.mean > 0:
            raise ValueError(f"mean delay must be positive, got {self.mean!r}")
        if self.spread < 0:
            raise ValueError(f"spread must be nonnegative, got {self.spread!r}")
        if self.kind == "uniform" and self.spread > self.mean:
            raise ValueError("uniform spread may not exceed the mean (delays must stay positive)")
        if self.kind == "truncated-normal" and self.spread == 0:
            raise ValueError("truncated-normal delays need a positive spread")
        if self.bound is None:
            if self.kind == "constant":
                derived = self.mean
            elif self.kind == "uniform":
                derived = self.mean + self.spread
            else:
                derived = self.mean + 4.0 * self.spread
            object.__setattr__(self, "bound", derived)
        if self.bound < self.mean:
            raise ValueError("bound must not be below the mean delay")

    @property
    def variance(self) -> float:
        """Variance of one delay draw."""
        if self.kind == "constant":
            return 0.0
        if self.kind == "uniform":
            return self.spread**2 / 3.0
        a = (0.0 - self.mean) / self.spread
        b = (self.bound - self.mean) / self.spread
        return float(truncnorm.var(a, b, loc=self.mean, scale=self.spread))


def draw_delay(m: DelayModel, rng: np.random.Generator, size: int | None = None):
    """Draw one delay (or ``size`` of them) from the model."""
    if m.kind == "constant":
        return m.mean if size is None else np.full(size, m.mean)
    if m.kind == "uniform":
        out = rng.uniform(m.mean - m.spread, m.mean + m.spread, size)
        return float(out) if size is None else out
    a = (0.0 - m.mean) / m.spread
    b = (m.bound - m.mean) / m.spread
    out = truncnorm.rvs(a, b, loc=m.mean, scale=m.spread, size=size, random_state=rng)
    return float(out) if size is None else out


@dataclass(frozen=True)
class StampRecord:
    """The four time-stamps of one two-packet exchange on a link (i, j).

    For a ``skew-pair``, node i sends both packets: ``s`` holds the two
    send stamps (i's clock) and ``r`` the two receive stamps (j's
    clock).  For an ``offset-roundtrip``, the first pair is the forward
    leg i->j (sent at ``s[0]`` by i, received at ``r[0]`` by j) and the
    second the reverse leg j->i (sent at ``s[1]`` by j, received at
    ``r[1]`` by i).
    """

    link: tuple[int, int]
    s: tuple[float, float]
    r: tuple[float, float]
    kind: str = "skew-pair"
    true_send_times: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("skew-pair", "offset-roundtrip"):
            raise ValueError(f"unknown stamp record kind {self.kind!r}")
        if len(self.s) != 2 or len(self.r) != 2:
            raise ValueError("a stamp record holds exactly two (send, receive) pairs")


@dataclass(frozen=True)
class Measurement:
    """One link observation: value y at epoch t_k with noise variance sigma2."""

    link: tuple[int, int]
    t_k: float
    y: float
    sigma2: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.y):
            raise ValueError(f"measurement value must be finite, got {self.y!r}")
        if not self.sigma2 > 0:
            raise ValueError(f"noise variance must be positive, got {self.sigma2!r}")


def noise_variance(delta_s: float, m: DelayModel | None, floor: float = 1e-6) -> float:
    """Modeled variance of the measurement noise for send separation ``delta_s``.

    ``floor + 2 Var(d) / delta_s^2``: the dominant noise term is the
    difference of the two packet delays divided by the separation, so
    widening the separation quiets the measurement quadratically, down
    to a floor that accounts for stamping granularity and the ignored
    higher-order terms.
    """
    if not delta_s > 0:
        raise ValueError(f"send separation must be positive, got {delta_s!r}")
    var_d = 0.0 if m is None else m.variance
    return floor + 2.0 * var_d / delta_s**2


def skew_measurement(rec: StampRecord, pi: ClockParams, pj: ClockParams, t_k: float,
                     delay_model: DelayModel | None = None,
                     floor: float = 1e-6) -> Measurement:
    """Relative log-skew measurement from a two-packet exchange.

    Computes ``log |(r1 - r0) / (s1 - s0)| - log c_ij(t_k)``: the raw
    log-ratio estimates the log of the relative skew ``a_j/a_i``, and
    subtracting the log of the deterministic relative normalizer
    ``c_ij(t_k)`` centers the value on the relative state
    ``X_j - X_i``, so the result is unbiased for any pair of diffusion
    coefficients.  The absolute value tolerates out-of-order delivery
    (a receive interval that came out negative).

    Parameters
    ----------
    rec : StampRecord
        A ``skew-pair`` record for the link (i, j); node i sent.
    pi, pj : ClockParams
        Sender and receiver clock parameters.
    t_k : float
        Measurement epoch (reference time if known, otherwise the
        receiver-clock proxy; see :func:`measurement_epoch`).
    delay_model : DelayModel, optional
        Used to size the noise variance; without it only the floor
        applies.
    floor : float
        Variance floor.

    Raises
    ------
    ValueError
        ``"non-increasing send stamps"`` if s1 <= s0;
        ``"degenerate receive stamps"`` if r1 == r0.
    """
    if rec.kind != "skew-pair":
        raise ValueError(f"skew measurement needs a skew-pair record, got {rec.kind!r}")
    s0, s1 = rec.s
    r0, r1 = rec.r
    if s1 <= s0:
        raise ValueError(f"non-increasing send stamps: {s0!r} -> {s1!r}")
    if r1 == r0:
        raise ValueError(f"degenerate receive stamps: both {r0!r}")
    rp = relative_params(pi, pj)
    y = math.log(abs((r1 - r0) / (s1 - s0))) - math.log(rp.c_ij(t_k))
    sigma2 = noise_variance(s1 - s0, delay_model, floor)
    return Measurement(link=rec.link, t_k=t_k, y=y, sigma2=sigma2)


def measurement_epoch(rec: StampRecord, reference_node: int = 0) -> float:
    """Epoch at which a skew-pair measurement applies.

    The reference node's displays are exact reference time, so when it
    is the sender the first send stamp is used; otherwise the closing
    receive stamp serves as the receiver-clock proxy.
    """
    return rec.s[0] if rec.link[0] == reference_node else rec.r[1]


def offset_delay_estimate(rec: StampRecord, a_ij_hat: float,
                          a_ji_hat: float) -> tuple[float, float, float]:
    """Offset and per-direction delay estimates from one roundtrip.

    Parameters
    ----------
    rec : StampRecord
        An ``offset-roundtrip`` record with the forward leg (s_i, r_ij)
        and reverse leg (s_j, r_ji).
    a_ij_hat, a_ji_hat : float
        Current relative-skew estimates for the two directions.

    Returns
    -------
    (tau_ij_hat, d_ji_hat, d_ij_hat)
        Offset of j's display relative to i's, and the two delay
        estimates (reverse leg first, in its receiver's clock units at
        equal skews).  The reverse-leg delay is clamped at zero, and
        the forward estimate is its skew-scaled image; with equal
        constant skews, symmetric constant delays, and exact skew
        estimates the offset is recovered exactly.

    Raises
    ------
    ValueError
        ``"invalid skew estimate"`` for non-positive skew estimates.
    """
    if rec.kind != "offset-roundtrip":
        raise ValueError(f"offset estimation needs an offset-roundtrip record, got {rec.kind!r}")
    if not (a_ij_hat > 0 and a_ji_hat > 0):
        raise ValueError(
            f"invalid skew estimate: a_ij={a_ij_hat!r}, a_ji={a_ji_hat!r}"
        )
    s_i, s_j = rec.s
    r_ij, r_ji = rec.r
    raw = (r_ji - s_j) + (r_ij - s_i) + (s_j - r_ij) * (1.0 - a_ji_hat)
    d_ji_hat = max(0.0, raw / (2.0 * a_ji_hat))
    d_ij_hat = a_ij_hat * d_ji_hat
    tau_ij_hat = -r_ji + s_j + a_ij_hat * d_ji_hat
    return tau_ij_hat, d_ji_hat, d_ij_hat


def predict_receipt(s0: float, r0: float, s1: float, a_hat: float) -> float:
    """Predicted receive stamp of a follow-up packet sent at ``s1``.

    Extrapolates from the previous (send, receive) pair with the
    current relative-skew estimate: ``r0 + a_hat (s1 - s0)``.  The
    absolute gap to the actual receive stamp is the end-to-end
    synchronization quality metric: with equal constant delays and the
    exact average relative skew the prediction error is zero.
    """
    if not s1 > s0:
        raise ValueError(f"follow-up send stamp must increase: {s0!r} -> {s1!r}")
    if not a_hat > 0:
        raise ValueError(f"invalid skew estimate: {a_hat!r}")
    return r0 + a_hat * (s1 - s0)
