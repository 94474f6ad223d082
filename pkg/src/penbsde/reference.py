"""Ground-truth producers for one-dimensional benchmarks.

* ``solve_hjb_fd``: explicit monotone finite differences for

      u_t + max_a [ b u_x + 1/2 sigma^2 u_xx + sum_j w_j (u(x + beta_j) - u - beta_j u_x) + f ] = 0,
      u(T, x) = g(x),

  over a uniform grid of controls, for kernels with finitely many atoms.
  Small marks (``|e| <= delta_split``) enter through the second-order Taylor
  surrogate ``1/2 beta^2 u_xx``. Larger marks are evaluated directly with
  linear interpolation.
* ``bs_closed_form``: Black-Scholes call at zero rate.
* ``poisson_series_value``: ``E g(x + a (N - rate T))`` for Poisson ``N``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import CFLViolation, DomainTooSmall, TruncationTooShort
from .model import ControlledModel

Array = np.ndarray


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

_NUM = (3.52624965998911e-02, 0.700383064443688, 6.37396220353165, 33.912866078383,
        112.079291497871, 221.213596169931, 220.206867912376)
_DEN = (8.83883476483184e-02, 1.75566716318264, 16.064177579207, 86.7807322029461,
        296.564248779674, 637.333633378831, 793.826512519948, 440.413735824752)


def norm_cdf(x):
    """Standard normal CDF by Hart's rational approximation.

    Absolute error is below 1e-14 over the real line, well inside the
    1e-7 requirement.
    """
    x = np.asarray(x, float)
    z = np.abs(x)
    e = np.exp(-0.5 * z * z)
    num = np.zeros_like(z)
    for c in _NUM:
        num = num * z + c
    den = np.zeros_like(z)
    for c in _DEN:
        den = den * z + c
    with np.errstate(divide="ignore", invalid="ignore"):
        cf = z + 0.65
        for k in (4.0, 3.0, 2.0, 1.0):
            cf = z + k / cf
        tail = np.where(z < 7.07106781186547, e * num / den, e / cf / 2.506628274631)
    tail = np.where(z > 37.0, 0.0, tail)
    out = np.where(x > 0, 1.0 - tail, tail)
    return out if out.ndim else float(out)


def bs_closed_form(spot, strike, maturity, vol):
    """Black-Scholes call price with zero interest rate."""
    if min(spot, strike, maturity, vol) <= 0:
        raise ValueError("bs_closed_form needs positive inputs")
    s = vol * np.sqrt(maturity)
    d1 = np.log(spot / strike) / s + 0.5 * s
    return float(spot * norm_cdf(d1) - strike * norm_cdf(d1 - s))


@dataclass(frozen=True)
class SeriesValue:
    """Poisson series result with the neglected tail mass."""

    value: float
    tail_mass: float
    terms: int

    def __float__(self):
        return float(self.value)


def poisson_series_value(x: float, jump_size: float, rate: float, horizon: float,
                         g: Callable, truncation_terms: Optional[int] = None) -> SeriesValue:
    """``E g(x + a (N - rate horizon))`` with ``N ~ Poisson(rate horizon)``.

    Terms ``k = 0 .. truncation_terms - 1`` are summed. When
    ``truncation_terms`` is None the smallest count with tail mass below 1e-13
    is used.

    Raises
    ------
    TruncationTooShort
        If the neglected tail mass is 1e-12 or more.
    """
    mean = rate * horizon
    if mean < 0:
        raise ValueError("rate * horizon must be nonnegative")
    if truncation_terms is None:
        truncation_terms = int(stats.poisson.ppf(1 - 1e-13, mean)) + 2 if mean > 0 else 1
        while stats.poisson.sf(truncation_terms - 1, mean) >= 1e-13:
            truncation_terms += 1
    tail = float(stats.poisson.sf(truncation_terms - 1, mean)) if mean > 0 else 0.0
    if tail >= 1e-12:
        raise TruncationTooShort(tail)
    k = np.arange(truncation_terms)
    pmf = stats.poisson.pmf(k, mean) if mean > 0 else (k == 0).astype(float)
    vals = np.asarray(g(x + jump_size * (k - mean)), float)
    return SeriesValue(float(np.dot(pmf, vals) / pmf.sum()), tail, int(truncation_terms))


def benchmark_oracle(model: ControlledModel, t: float, x) -> Optional[float]:
    """Closed-form value of a built-in benchmark at ``(t, x)``, or None if unknown.

    * uvm: a convex payoff makes the largest volatility optimal, so the value
      is the Black-Scholes price at ``sigma_hi``.
    * nondominated-jump: ``E|x - kappa + a (N - rate tau)|`` is convex in the
      jump size ``a``, so the maximum over the interval is at an endpoint.
    * trivial-drift: ``x + drift tau``. constant- and controlled-intensity:
      ``g(x) = x`` along a martingale, so ``x``.
    """
    tau = model.horizon - t
    x0 = float(np.asarray(x, float).reshape(-1)[0])
    p = model.params
    if model.name == "uvm":
        return bs_closed_form(x0, p["strike"], tau, p["sigma_hi"])
    if model.name == "nondominated-jump":
        g = lambda y: np.abs(y - p["kappa"])
        ends = (p["center"] - p["radius"], p["center"] + p["radius"])
        return max(poisson_series_value(x0, a, p["rate"], tau, g).value for a in ends)
    if model.name == "trivial-drift":
        return x0 + p["drift"] * tau
    if model.name in ("constant-intensity", "controlled-intensity"):
        return x0
    return None


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FdGrid:
    """Space, time and control discretization for ``solve_hjb_fd``.

    ``margin`` is the largest distance, as a multiple of the domain width,
    that a jump may land outside the domain.
    """

    x_min: float
    x_max: float
    nodes: int
    time_steps: int
    control_nodes: int = 21
    delta_split: float = 1e-3
    t0: float = 0.0
    t1: float = 1.0
    margin: float = 0.5

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("need x_min < x_max")
        if self.nodes < 3 or self.time_steps < 1 or self.control_nodes < 1:
            raise ValueError("nodes >= 3, time_steps >= 1 and control_nodes >= 1 are required")
        if not self.delta_split > 0:
            raise ValueError("delta_split must be positive")

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.nodes - 1)

    @property
    def dt_fd(self):
        return (self.t1 - self.t0) / self.time_steps

    @property
    def x(self):
        return np.linspace(self.x_min, self.x_max, self.nodes)

    @staticmethod
    def stable(model: ControlledModel, x_min, x_max, nodes, control_nodes=21, delta_split=1e-3,
               t0=0.0, t1=None, margin=0.5, safety=0.99):
        """Grid with the fewest time steps that satisfy the CFL bound."""
        t1 = model.horizon if t1 is None else t1
        probe = FdGrid(x_min, x_max, nodes, 1, control_nodes, delta_split, t0, t1, margin)
        rate = _operators(model, probe)[1]
        steps = max(1, int(np.ceil((t1 - t0) * rate / safety)))
        return FdGrid(x_min, x_max, nodes, steps, control_nodes, delta_split, t0, t1, margin)


@dataclass
class FdSolution:
    """Values on the (time, space) grid; ``values[m]`` is time ``times[m]``."""

    times: Array
    x: Array
    values: Array
    controls: Array
    boundary_policy: str = "terminal payoff frozen outside the domain (ghost nodes and jump landings)"

    def value_at(self, t, x):
        m = int(np.argmin(np.abs(self.times - t)))
        return float(np.interp(x, self.x, self.values[m]))

    def to_csv(self, path, time_stride: int = 1):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["time", "x", "value"])
            for m in range(0, len(self.times), time_stride):
                for xi, v in zip(self.x, self.values[m]):
                    wr.writerow([repr(float(self.times[m])), repr(float(xi)), repr(float(v))])


def fd_controls(model: ControlledModel, count: int) -> Array:
    """Uniform control grid along the first axis of the ball, shape (count, q)."""
    cs = model.control_set
    offs = np.linspace(-cs.radius, cs.radius, count) if count > 1 else np.zeros(1)
    pts = np.repeat(cs.center.reshape(1, -1), len(offs), axis=0)
    pts[:, 0] += offs
    return pts


@dataclass
class _ControlOp:
    drift: Array          # effective drift per node (includes large-mark compensation)
    diff2: Array          # sigma^2 + sum over small marks of w beta^2
    jumps: list           # (left index, interpolation weight t, rate) per large mark
    cost: Array


def _operators(model: ControlledModel, grid: FdGrid):
    if model.dim_x != 1:
        raise ValueError("the finite-difference reference is one-dimensional")
    kern = model.intensity
    if model.has_jumps and not kern.is_atomic:
        raise ValueError("the finite-difference reference needs an atomic kernel")
    x = grid.x
    X = x[:, None]
    dx = grid.dx
    lo = grid.x_min - grid.margin * (grid.x_max - grid.x_min)
    hi = grid.x_max + grid.margin * (grid.x_max - grid.x_min)
    ops, worst = [], 0.0
    for a in fd_controls(model, grid.control_nodes):
        A = np.repeat(a.reshape(1, -1), x.size, axis=0)
        drift = np.asarray(model.drift(X, A), float)[:, 0].copy()
        sig = np.asarray(model.diffusion(X, A), float)[:, 0, :]
        diff2 = np.sum(sig * sig, axis=1)
        jumps, lam_big = [], np.zeros(x.size)
        if model.has_jumps:
            for marks, weights in kern.atom_table(A):
                beta = np.asarray(model.jump_size(X, A, marks), float)[:, 0]
                small = np.linalg.norm(marks, axis=1) <= grid.delta_split
                diff2 = diff2 + np.where(small, weights * beta * beta, 0.0)
                big_w = np.where(small, 0.0, weights)
                if not np.any(big_w > 0):
                    continue
                dest = x + beta
                if np.any((dest[big_w > 0] < lo) | (dest[big_w > 0] > hi)):
                    raise DomainTooSmall(f"jump destination outside [{lo:.4g}, {hi:.4g}]")
                i = np.clip(np.floor((dest - grid.x_min) / dx).astype(np.int64), 0, x.size - 2)
                t = np.clip((dest - x[i]) / dx, 0.0, 1.0)
                outside = (dest < grid.x_min - 1e-12 * dx) | (dest > grid.x_max + 1e-12 * dx)
                frozen = np.asarray(model.terminal_cost(dest[:, None]), float).reshape(x.size)
                drift = drift - big_w * beta
                lam_big += big_w
                jumps.append((i, t, big_w, outside, frozen))
        cost = np.asarray(model.running_cost(X, A), float).reshape(x.size)
        ops.append(_ControlOp(drift, diff2, jumps, cost))
        worst = max(worst, float(np.max(diff2 / dx**2 + np.abs(drift) / dx + lam_big)))
    return ops, worst


def solve_hjb_fd(model: ControlledModel, grid: FdGrid) -> FdSolution:
    """Explicit backward marching with a maximum over the control grid.

    For each fixed control the update is a nonnegative combination of
    neighbouring values plus a source term whenever the CFL number is at most
    one. Jump destinations inside the domain are linearly interpolated. Outside
    the domain (ghost nodes and jump landings up to ``grid.margin`` times the
    width away) the terminal payoff is used. This keeps every weight
    nonnegative, so the scheme preserves order between payoffs.

    Raises
    ------
    CFLViolation
        If ``dt_fd * max(sigma^2/dx^2 + |b|/dx + intensity) > 1``.
    DomainTooSmall
        If a jump lands beyond the margin.
    """
    ops, rate = _operators(model, grid)
    dt, dx = grid.dt_fd, grid.dx
    if dt * rate > 1.0 + 1e-12:
        raise CFLViolation(dt * rate)
    x = grid.x
    n = x.size
    u = np.asarray(model.terminal_cost(x[:, None]), float).reshape(n).copy()
    values = np.empty((grid.time_steps + 1, n))
    values[-1] = u
    ghost = np.empty(n + 2)
    ghost[[0, -1]] = np.asarray(model.terminal_cost(np.array([[x[0] - dx], [x[-1] + dx]])), float)
    for m in range(grid.time_steps - 1, -1, -1):
        ghost[1:-1] = u
        fwd = (ghost[2:] - u) / dx
        bwd = (u - ghost[:-2]) / dx
        second = (ghost[2:] - 2 * u + ghost[:-2]) / dx**2
        best = None
        for op in ops:
            gen = (np.maximum(op.drift, 0) * fwd + np.minimum(op.drift, 0) * bwd
                   + 0.5 * op.diff2 * second + op.cost)
            for i, t, w, outside, frozen in op.jumps:
                landed = np.where(outside, frozen, (1 - t) * u[i] + t * u[i + 1])
                gen = gen + w * (landed - u)
            best = gen if best is None else np.maximum(best, gen)
        u = u + dt * best
        values[m] = u
    times = grid.t0 + dt * np.arange(grid.time_steps + 1)
    return FdSolution(times=times, x=x, values=values, controls=fd_controls(model, grid.control_nodes))
