"""Forward process, training objectives, and reverse sampling for the bridge.

Tensor convention: inputs with ndim >= 3 are treated as batched with dim 0
the batch axis, and norms are taken per sample over all remaining elements;
lower-rank inputs are treated as a single sample.
"""

from __future__ import annotations

import numpy as np
import torch

from .schedule import BridgeSchedule

DEFAULT_EPS_CONST = 1e-8
DEFAULT_X0_ITERS = 3

RAW = "raw"
UNITIZED = "unitized"


def _flat_norm(v: torch.Tensor) -> torch.Tensor:
    """Per-sample Euclidean norm, broadcastable against v."""
    if v.ndim >= 3:
        dims = tuple(range(1, v.ndim))
        return v.flatten(1).norm(dim=1).reshape(-1, *([1] * (v.ndim - 1)))
    return v.norm()


def _check_shapes(x0: torch.Tensor, y: torch.Tensor):
    if x0.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(y.shape)}")


def sample_forward(sched: BridgeSchedule, x0: torch.Tensor, y: torch.Tensor,
                   t: int, generator: torch.Generator | None = None
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw x_t from the forward marginal; also return the noise used."""
    _check_shapes(x0, y)
    if not 0 <= t <= sched.T:
        raise ValueError(f"t out of range: {t}")
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    m = sched.m[t]
    x_t = (1.0 - m) * x0 + m * y + np.sqrt(sched.delta[t]) * eps
    return x_t, eps


def unit_direction(x0: torch.Tensor, y: torch.Tensor,
                   eps_const: float = DEFAULT_EPS_CONST) -> torch.Tensor:
    return (y - x0) / (_flat_norm(y - x0) + eps_const)


def directional_noise(sched: BridgeSchedule, x0: torch.Tensor, y: torch.Tensor,
                      t: int, eps: torch.Tensor,
                      eps_const: float = DEFAULT_EPS_CONST) -> torch.Tensor:
    """Unitized training target: m_t * unit(y - x0) + sqrt(delta_t) * eps."""
    _check_shapes(x0, y)
    if eps_const <= 0:
        raise ValueError("eps_const must be positive")
    m = sched.m[t]
    return m * unit_direction(x0, y, eps_const) + np.sqrt(sched.delta[t]) * eps


def raw_noise(sched: BridgeSchedule, x0: torch.Tensor, y: torch.Tensor,
              t: int, eps: torch.Tensor) -> torch.Tensor:
    """Raw (non-unitized) target: m_t * (y - x0) + sqrt(delta_t) * eps."""
    _check_shapes(x0, y)
    m = sched.m[t]
    return m * (y - x0) + np.sqrt(sched.delta[t]) * eps


def _call_model(model, x_t, t, branch=None, control=None):
    if torch.is_tensor(t):
        t_tensor = t.to(x_t.dtype)
    else:
        t_tensor = torch.full((x_t.shape[0],), float(t), dtype=x_t.dtype)
    if branch is not None and control is not None:
        residuals = branch(x_t, t_tensor, control)
        return model(x_t, t_tensor, residuals)
    return model(x_t, t_tensor)


def training_loss(model, x0: torch.Tensor, y: torch.Tensor,
                  sched: BridgeSchedule, objective: str = UNITIZED,
                  generator: torch.Generator | None = None,
                  branch=None, control: torch.Tensor | None = None,
                  eps_const: float = DEFAULT_EPS_CONST) -> torch.Tensor:
    """Mean squared noise-matching loss over a batch; t drawn per sample."""
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise ValueError("batch must be a nonempty (B, 1, H, W) tensor")
    _check_shapes(x0, y)
    if objective not in (RAW, UNITIZED):
        raise ValueError(f"unknown objective {objective!r}")
    ts = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=generator)
    m = torch.from_numpy(sched.m[ts.numpy()]).to(x0.dtype).reshape(-1, 1, 1, 1)
    sd = torch.from_numpy(
        np.sqrt(sched.delta[ts.numpy()])).to(x0.dtype).reshape(-1, 1, 1, 1)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = (1.0 - m) * x0 + m * y + sd * eps
    if objective == UNITIZED:
        target = m * unit_direction(x0, y, eps_const) + sd * eps
    else:
        target = m * (y - x0) + sd * eps
    pred = _call_model(model, x_t, ts, branch, control)
    return ((target - pred) ** 2).mean()


def train_denoiser(model, x0_all: torch.Tensor, y_all: torch.Tensor,
                   sched: BridgeSchedule, objective: str = UNITIZED,
                   iters: int = 500, batch_size: int = 8, lr: float = 1e-3,
                   seed: int = 0,
                   eps_const: float = DEFAULT_EPS_CONST) -> list[float]:
    """Simple Adam loop over the noise-matching loss; returns the loss trace."""
    if x0_all.shape[0] == 0:
        raise ValueError("training set is empty")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    trace = []
    n = x0_all.shape[0]
    for _ in range(iters):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        loss = training_loss(model, x0_all[idx], y_all[idx], sched, objective,
                             gen, eps_const=eps_const)
        optim.zero_grad()
        loss.backward()
        optim.step()
        trace.append(float(loss.detach()))
    return trace


def estimate_x0(sched: BridgeSchedule, x_t: torch.Tensor, y: torch.Tensor,
                eps_hat: torch.Tensor, t: int,
                eps_const: float = DEFAULT_EPS_CONST,
                iters: int = DEFAULT_X0_ITERS) -> torch.Tensor:
    """Invert the unitized prediction to an x_0 estimate.

    Solves the fixed point
        x_0 = (x_t - m_t y - (eps_hat - m_t u(x_0))) / (1 - m_t),
        u(x_0) = (y - x_0) / (||y - x_0|| + eps_const),
    iterated from u = 0.  The u = 0 seed cancels the shared noise term
    between x_t and eps_hat, so the first candidate is already exact up to
    the direction term and later iterates refine only that term; seeding
    from the noisy (y - x_t) direction instead can diverge near t = T.
    The iterate with the smallest direction-consistency residual
    m_t ||u(x_0_cand) - u_used|| is returned.
    """
    if not 1 <= t <= sched.T - 1:
        raise ValueError(f"t must satisfy 1 <= t <= T-1, got {t}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = float(sched.m[t])
    one_minus_m = 1.0 - m

    def candidate(u):
        return (x_t - m * y - eps_hat + m * u) / one_minus_m

    def direction(x0c):
        d = y - x0c
        return d / (_flat_norm(d) + eps_const)

    best = None
    best_res = None

    def consider(u):
        nonlocal best, best_res
        x0c = candidate(u)
        res = _flat_norm(m * (direction(x0c) - u))
        if best is None:
            best, best_res = x0c, res
        else:
            take = res < best_res
            if x0c.ndim >= 3:
                best = torch.where(take, x0c, best)
                best_res = torch.minimum(res, best_res)
            elif bool(take):
                best, best_res = x0c, res
        return x0c

    u = torch.zeros_like(x_t)
    for _ in range(iters):
        x0c = consider(u)
        u = direction(x0c)
    return best


def reverse_step(sched: BridgeSchedule, x_t: torch.Tensor, y: torch.Tensor,
                 x0_hat: torch.Tensor, t_hi: int, t_lo: int,
                 generator: torch.Generator | None = None,
                 deterministic: bool = False) -> torch.Tensor:
    """Sample x_{t_lo} from the exact bridge posterior on the two-point
    sub-schedule {t_lo, t_hi}, conditioning on (x_{t_hi}, x0_hat, y)."""
    if not 0 <= t_lo < t_hi <= sched.T:
        raise ValueError(f"invalid step pair ({t_hi}, {t_lo})")
    m_lo, m_hi = sched.m[t_lo], sched.m[t_hi]
    d_lo, d_hi = sched.delta[t_lo], sched.delta[t_hi]
    if t_lo == 0:
        return x0_hat
    mu_lo = (1.0 - m_lo) * x0_hat + m_lo * y
    if t_hi == sched.T:
        # x_T = y carries no extra information beyond the pinned endpoint.
        mean, var = mu_lo, d_lo
    else:
        a = (1.0 - m_hi) / (1.0 - m_lo)
        b = m_hi - a * m_lo
        gain = a * d_lo / d_hi
        mean = mu_lo + gain * (x_t - a * mu_lo - b * y)
        var = d_lo * (d_hi - a * a * d_lo) / d_hi
    if deterministic:
        return mean
    eps = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + np.sqrt(max(var, 0.0)) * eps


def stride_grid(T: int, num_steps: int) -> list[int]:
    """Uniformly strided descending step grid from T to 0, inclusive."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, T], got {num_steps}")
    return [int(round(v)) for v in np.linspace(T, 0, num_steps + 1)]


def sample(model, sched: BridgeSchedule, y: torch.Tensor, num_steps: int,
           generator: torch.Generator | None = None,
           branch=None, control: torch.Tensor | None = None,
           eps_const: float = DEFAULT_EPS_CONST,
           x0_iters: int = DEFAULT_X0_ITERS,
           deterministic: bool = False,
           x0_clip: tuple[float, float] | None = (0.0, 1.0)) -> torch.Tensor:
    """Reverse-sample x_0 from x_T = y over a strided step grid.

    The model is evaluated at min(t_hi, T-1), where the unitized prediction
    is invertible.  The per-step x_0 estimate divides the prediction error
    by (1 - m_t), which approaches 1/T near t = T; clipping the estimate to
    the known pixel range keeps that amplification from polluting the whole
    trajectory.  The final output is clipped to [0, 1].
    """
    grid = stride_grid(sched.T, num_steps)
    x = y.clone()
    with torch.no_grad():
        for t_hi, t_lo in zip(grid[:-1], grid[1:]):
            t_eval = min(t_hi, sched.T - 1)
            eps_hat = _call_model(model, x, t_eval, branch, control)
            x0_hat = estimate_x0(sched, x, y, eps_hat, t_eval, eps_const, x0_iters)
            if x0_clip is not None:
                x0_hat = x0_hat.clamp(*x0_clip)
            x = reverse_step(sched, x, y, x0_hat, t_hi, t_lo, generator,
                             deterministic)
    return x.clamp(0.0, 1.0)
