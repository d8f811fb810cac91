"""Closed-form Brownian-bridge schedule and posterior algebra.

The forward marginal is
    q(x_t | x_0, y) = N((1 - m_t) x_0 + m_t y, delta_t I),
with m_t = t/T and delta_t = 2 s (m_t - m_t^2).  The single-step transition
consistent with these marginals is
    x_t = a_t x_{t-1} + b_t y + sqrt(delta_step_t) eps,
    a_t = (1 - m_t) / (1 - m_{t-1}),   b_t = m_t - a_t m_{t-1},
    delta_step_t = delta_t - a_t^2 delta_{t-1}.

Conditioning the jointly Gaussian (x_{t-1}, x_t) on (x_0, y) yields the exact
posterior q(x_{t-1} | x_t, x_0, y); the mean is expressed here in the
(x_t, y, eps) basis where eps is the raw forward noise
    eps = (x_t - (1 - m_t) x_0 - m_t y) / sqrt(delta_t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BridgeSchedule:
    """Precomputed bridge quantities for a fixed (T, s).

    All arrays have length T + 1 and are indexed by the step t; entries at
    steps where a quantity is undefined (t = 0 and/or t = T) are zero.
    """

    T: int
    s: float
    m: np.ndarray
    delta: np.ndarray
    delta_step: np.ndarray
    post_var: np.ndarray
    coef_x: np.ndarray
    coef_y: np.ndarray
    coef_eps: np.ndarray


def build_schedule(T: int, s: float = 1.0) -> BridgeSchedule:
    """Build the full schedule for a T-step bridge with variance scale s."""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if s <= 0:
        raise ValueError(f"s must be positive, got {s!r}")

    t = np.arange(T + 1, dtype=np.float64)
    m = t / T
    delta = 2.0 * s * (m - m * m)

    delta_step = np.zeros(T + 1)
    post_var = np.zeros(T + 1)
    coef_x = np.zeros(T + 1)
    coef_y = np.zeros(T + 1)
    coef_eps = np.zeros(T + 1)

    # t = T is handled by the loop: a_T = 0, so delta_step[T] = delta[T] = 0.
    for k in range(1, T + 1):
        a = (1.0 - m[k]) / (1.0 - m[k - 1])
        delta_step[k] = delta[k] - a * a * delta[k - 1]

    for k in range(1, T):
        a = (1.0 - m[k]) / (1.0 - m[k - 1])
        b = m[k] - a * m[k - 1]
        gain = a * delta[k - 1] / delta[k]
        post_var[k] = delta[k - 1] * delta_step[k] / delta[k]
        # Mean in the (x_t, x_0, y) basis.
        shrink = 1.0 - gain * a
        c_x0 = shrink * (1.0 - m[k - 1])
        c_y0 = shrink * m[k - 1] - gain * b
        # Re-express x_0 through the raw forward noise.
        one_minus_m = 1.0 - m[k]
        coef_x[k] = gain + c_x0 / one_minus_m
        coef_y[k] = c_y0 - c_x0 * m[k] / one_minus_m
        coef_eps[k] = -c_x0 * np.sqrt(delta[k]) / one_minus_m

    return BridgeSchedule(
        T=int(T),
        s=float(s),
        m=m,
        delta=delta,
        delta_step=delta_step,
        post_var=post_var,
        coef_x=coef_x,
        coef_y=coef_y,
        coef_eps=coef_eps,
    )


def posterior_params(sched: BridgeSchedule, t: int) -> tuple[float, float, float, float]:
    """Return (c_x, c_y, c_eps, var) of q(x_{t-1} | x_t, x_0, y) at step t.

    The posterior mean is c_x * x_t + c_y * y + c_eps * eps with eps the raw
    forward noise; var is the posterior variance.
    """
    if not 1 <= t <= sched.T - 1:
        raise ValueError(f"t must satisfy 1 <= t <= T-1, got t={t}, T={sched.T}")
    return (
        float(sched.coef_x[t]),
        float(sched.coef_y[t]),
        float(sched.coef_eps[t]),
        float(sched.post_var[t]),
    )


def _numeric_posterior(sched: BridgeSchedule, t: int, x0: float, y: float,
                       x_t: float) -> tuple[float, float]:
    """Gaussian-conditioning oracle for the posterior at step t.

    Builds the joint covariance of (x_{t-1}, x_t) given (x_0, y) and
    conditions on x_t numerically with linear algebra, independently of the
    closed-form coefficient derivation.
    """
    m = sched.m
    a = (1.0 - m[t]) / (1.0 - m[t - 1])
    b = m[t] - a * m[t - 1]
    mu_prev = (1.0 - m[t - 1]) * x0 + m[t - 1] * y
    mu_t = a * mu_prev + b * y
    cov = np.array([
        [sched.delta[t - 1], a * sched.delta[t - 1]],
        [a * sched.delta[t - 1], sched.delta[t]],
    ])
    gain = np.linalg.solve(cov[1:2, 1:2], cov[1:2, 0:1])[0, 0]
    mean = mu_prev + gain * (x_t - mu_t)
    var = cov[0, 0] - gain * cov[1, 0]
    return float(mean), float(var)


def posterior_oracle_check(sched: BridgeSchedule, trials: int, seed: int = 0) -> float:
    """Max abs discrepancy between closed-form and numeric posteriors.

    Draws random scalar (x_0, y, x_t, t) instances and compares the
    coefficient-based posterior mean/variance against the conditioning
    oracle.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(1, sched.T))
        x0 = float(rng.normal())
        y = float(rng.normal())
        x_t = float(rng.normal((1.0 - sched.m[t]) * x0 + sched.m[t] * y,
                               np.sqrt(sched.delta[t])))
        eps = (x_t - (1.0 - sched.m[t]) * x0 - sched.m[t] * y) / np.sqrt(sched.delta[t])
        c_x, c_y, c_eps, var = posterior_params(sched, t)
        mean = c_x * x_t + c_y * y + c_eps * eps
        ref_mean, ref_var = _numeric_posterior(sched, t, x0, y, x_t)
        worst = max(worst, abs(mean - ref_mean), abs(var - ref_var))
    return worst
