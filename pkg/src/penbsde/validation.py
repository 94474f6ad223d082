"""Statistical checks tying simulated output to its defining identities.

* ``poisson_count_test``: jump counts under a constant intensity against the
  Poisson law (mean z-score and chi-square goodness of fit).
* ``laplace_functional_test``: the compensated exponential
  ``exp(-sum l(tau, e) + int (1 - e^{-l}) lambda(I_u, de) du)`` has mean one
  for a Cox measure.
* ``martingale_residual_test``: one-step residuals of a backward solution
  have mean zero and are orthogonal to functions of the current state.
* ``sweep_diagnostics``: monotonicity, constraint decay and anchor
  independence read off a penalty sweep.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .bsde import BsdeSolution, PenaltySweepReport
from .forward import PathEnsemble, stream
from .model import ControlledModel, IntensityKernel

Array = np.ndarray

DEFAULT_THRESHOLD = 4.0


@dataclass
class StatTestReport:
    """Outcome of a single z-score test; ``passed`` iff ``|z_score| <= threshold``."""

    name: str
    statistic: float
    std_error: float
    z_score: float
    threshold: float
    n_samples: int
    passed: bool = field(init=False)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(abs(self.z_score) <= self.threshold)

    def to_dict(self):
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out


def _z(stat, se, atol=1e-12):
    """z-score; statistics within ``atol`` of zero count as exactly zero (round-off)."""
    if abs(stat) <= atol:
        return 0.0
    if se > 0:
        return float(stat / se)
    return float(np.sign(stat) * np.inf)


# ---------------------------------------------------------------------------
# jump law
# ---------------------------------------------------------------------------

def poisson_count_test(ensemble: PathEnsemble, rate: float, threshold: float = 3.0,
                       significance: float = 1e-3) -> StatTestReport:
    """Per-path jump counts against ``Poisson(rate * span)``.

    The z-score is for the sample mean. ``details`` carries the chi-square
    statistic, its p-value and ``gof_passed`` (p-value above ``significance``).
    Bins with expected count below 5 are pooled into the upper tail.
    """
    counts = ensemble.jump_counts()
    n = counts.size
    mean = rate * (ensemble.grid.t1 - ensemble.grid.t0)
    z = _z(counts.mean() - mean, np.sqrt(mean / n))
    top = 0
    while n * stats.poisson.sf(top, mean) >= 5:
        top += 1
    edges = np.arange(top + 1)
    observed = np.array([np.sum(counts == k) for k in edges[:-1]] + [np.sum(counts >= top)], float)
    expected = n * np.append(stats.poisson.pmf(edges[:-1], mean), stats.poisson.sf(top - 1, mean))
    chi2, p = stats.chisquare(observed, expected)
    rep = StatTestReport("poisson_count", float(counts.mean()), float(np.sqrt(mean / n)), z,
                         threshold, n, details={"chi2": float(chi2), "p_value": float(p),
                                                "bins": int(observed.size),
                                                "gof_passed": bool(p > significance)})
    rep.passed = rep.passed and rep.details["gof_passed"]
    return rep


def laplace_functional_test(ensemble: PathEnsemble, kernel: IntensityKernel, ell: Callable,
                            threshold: float = DEFAULT_THRESHOLD, mark_samples: int = 64) -> StatTestReport:
    """Mean-one test of the compensated exponential of a Cox measure.

    Parameters
    ----------
    ell : callable
        ``ell(t (M,), marks (M, m)) -> (M,)`` nonnegative and bounded. It is
        read at the opening time of the grid step (a step function in time),
        which is the time the thinning uses for the intensity, so the
        identity holds exactly on the grid.
    mark_samples : int
        Monte Carlo mark draws for the compensator of non-atomic kernels.
        Atomic kernels are integrated exactly.
    """
    grid = ensemble.grid
    N, dt = ensemble.n_paths, grid.dt
    times = grid.times
    jumps = ensemble.jumps
    S = np.zeros(N)
    if jumps.count:
        lj = np.asarray(ell(times[jumps.step], jumps.marks), float)
        if np.any(lj < 0):
            raise ValueError("ell must be nonnegative")
        np.add.at(S, jumps.path, lj)
    comp = np.zeros(N)
    if not kernel.is_null:
        for k in range(grid.steps):
            a = ensemble.I[k]
            tk = np.full(N, times[k])
            if kernel.is_atomic:
                for marks, weights in kernel.atom_table(a):
                    comp += dt * weights * -np.expm1(-np.asarray(ell(tk, marks), float))
            else:
                u = stream(ensemble.master_seed, "backward-marks", 10_000 + k).random(
                    (mark_samples, N, kernel.mark_uniforms))
                acc = np.zeros(N)
                for s in range(mark_samples):
                    acc += -np.expm1(-np.asarray(ell(tk, kernel.mark_sampler(a, u[s])), float))
                comp += dt * np.asarray(kernel.total_rate(a), float) * acc / mark_samples
    M = np.exp(comp - S)
    se = float(M.std(ddof=1) / np.sqrt(N)) if N > 1 else 0.0
    stat = float(M.mean())
    return StatTestReport("laplace_functional", stat, se, _z(stat - 1.0, se), threshold, N,
                          details={"mean_jumps": float(jumps.count / N)})


# ---------------------------------------------------------------------------
# backward residuals
# ---------------------------------------------------------------------------

def _test_functions(U):
    """Columns 1, z and z^2 - 1 of the standardized features (constant features give 0)."""
    sd = U.std(axis=0)
    Z = np.where(sd > 0, (U - U.mean(axis=0)) / np.where(sd > 0, sd, 1.0), 0.0)
    return np.concatenate([np.ones((U.shape[0], 1)), Z, np.where(sd > 0, Z * Z - 1.0, 0.0)], axis=1)


def martingale_residual_test(sol: BsdeSolution, ensemble: PathEnsemble, model: ControlledModel,
                             threshold: float = DEFAULT_THRESHOLD) -> StatTestReport:
    """One-step residuals ``Y_{k+1} - E_k Y_{k+1} - Z_k dW_k - V_k dB_k``.

    ``E_k Y_{k+1}`` is recovered from the stored solution as
    ``Y_k - (f + n |V_k|) dt``. Two families of z-scores are formed: the
    residual mean at every step, and for every test function ``phi`` of
    ``(X_k, w_k)`` (constant, linear and centered quadratic in standardized
    features) the sum over steps of ``mean(residual * phi)``. The
    reported statistic is the one with the largest ``|z|``. ``details``
    includes the mean per-step residual variance.
    """
    if sol.Y is None:
        raise ValueError("solution was computed without arrays")
    grid = ensemble.grid
    dt, N = grid.dt, ensemble.n_paths
    atol = 1e-10 * (1.0 + float(np.max(np.abs(sol.Y))))
    worst = (0.0, 0.0, 0.0, "none")
    D = ensemble.X.shape[2] + ensemble.w.shape[2]
    orth_sum, orth_var = np.zeros(1 + 2 * D), np.zeros(1 + 2 * D)
    res_var = []
    for k in range(grid.steps):
        x, a = ensemble.X[k], ensemble.I[k]
        run = np.asarray(model.running_cost(x, a), float)
        cont = sol.Y[k] - dt * run - sol.K_increments[k]
        rho = (sol.Y[k + 1] - cont - np.einsum("nd,nd->n", sol.Z[k], ensemble.dW[k])
               - np.einsum("nq,nq->n", sol.V[k], ensemble.dB[k]))
        res_var.append(float(rho.var()))
        m, se = float(rho.mean()), float(rho.std(ddof=1) / np.sqrt(N))
        z = _z(m, se, atol)
        if abs(z) > abs(worst[2]):
            worst = (m, se, z, f"mean at step {k}")
        prod = rho[:, None] * _test_functions(np.concatenate([x, ensemble.w[k]], axis=1))
        orth_sum += prod.mean(axis=0)
        orth_var += prod.var(axis=0, ddof=1) / N
    for j in range(orth_sum.size):
        se = float(np.sqrt(orth_var[j]))
        z = _z(float(orth_sum[j]), se, atol * grid.steps)
        if abs(z) > abs(worst[2]):
            worst = (float(orth_sum[j]), se, z, f"orthogonality to test function {j}")
    return StatTestReport("martingale_residual", worst[0], worst[1], worst[2], threshold, N,
                          details={"worst": worst[3], "mean_residual_variance": float(np.mean(res_var))})


# ---------------------------------------------------------------------------
# sweep diagnostics
# ---------------------------------------------------------------------------

@dataclass
class SweepDiagnostics:
    monotone: bool
    constraint_decaying: bool
    a_independent: bool
    slope: float
    final_spread_fraction: float
    values: list
    constraint_norms: list
    a_spreads: list

    @property
    def all_pass(self) -> bool:
        return self.monotone and self.constraint_decaying and self.a_independent

    def to_dict(self):
        out = asdict(self)
        out["all_pass"] = self.all_pass
        return out


ZERO_NORM = 1e-12


def loglog_slope(penalties, norms) -> float:
    """Least-squares slope of ``log norm`` against ``log penalty``."""
    p = np.asarray(penalties, float)
    F = np.asarray(norms, float)
    if np.all(F <= ZERO_NORM):
        return -np.inf
    if np.any(F <= 0) or np.any(p <= 0):
        return float("nan")
    return float(np.polyfit(np.log(p), np.log(F), 1)[0])


def sweep_diagnostics(report: PenaltySweepReport, spread_fraction: float = 0.03,
                      max_slope: float = -0.5) -> SweepDiagnostics:
    """Monotonicity, constraint decay and anchor independence of a sweep.

    ``constraint_decaying`` requires the norms to decrease strictly with a
    log-log slope at most ``max_slope``. Norms that are zero up to round-off
    (below 1e-12) pass.
    ``a_independent`` requires the final anchor spread to be at most
    ``spread_fraction`` of the final value's magnitude.
    """
    if len(report.penalties) < 3:
        raise ValueError("sweep diagnostics need at least 3 penalties")
    F = np.asarray(report.constraint_norms, float)
    slope = loglog_slope(report.penalties, F)
    if np.all(F <= ZERO_NORM):
        decaying = True
    else:
        decaying = bool(np.all(np.diff(F) < 0) and slope <= max_slope)
    v, s = abs(report.values[-1]), report.a_spreads[-1]
    frac = 0.0 if s <= 1e-12 * (1.0 + v) else (s / v if v > 0 else np.inf)
    return SweepDiagnostics(
        monotone=bool(all(report.monotone_flags)),
        constraint_decaying=decaying,
        a_independent=bool(frac <= spread_fraction),
        slope=slope,
        final_spread_fraction=float(frac),
        values=list(report.values),
        constraint_norms=list(report.constraint_norms),
        a_spreads=list(report.a_spreads),
    )
