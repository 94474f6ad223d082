"""Forward simulation of the randomized control system.

The state ``X`` is driven by a Brownian motion ``W`` and a Cox jump measure
whose intensity is controlled by ``I = h(a + B - B_t)``, where ``B`` is an
independent Brownian motion and ``h`` the ball surjection. Jumps are drawn by
thinning a homogeneous Poisson stream at the kernel's rate bound.

Randomness is counter based: every (purpose, path chunk) pair owns a Philox
stream derived from the master seed, so an ensemble is a pure function of its
inputs and does not depend on how many workers assemble it.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import Explosion, MajorantViolated
from .model import ControlledModel, ControlSet, IntensityKernel, surjection_h

Array = np.ndarray

CHUNK_SIZE = 4096

PURPOSES = {
    "dW": 1,
    "dB": 2,
    "candidates": 3,
    "accept": 4,
    "marks": 5,
    "compensator": 6,
    "start": 7,
    "backward-marks": 8,
}


def stream(master_seed: int, purpose: str, chunk: int) -> np.random.Generator:
    """Independent generator for one (purpose, chunk) cell of the seed space."""
    ss = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=(PURPOSES[purpose], int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_slices(n_paths: int, chunk_size: int = CHUNK_SIZE):
    """Fixed partition of path indices into chunks (independent of worker count)."""
    return [slice(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t1`` with ``steps`` intervals."""

    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError("time grid needs t0 < t1")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def step_of(self, tau):
        """Index of the grid interval containing ``tau`` (closed on the right)."""
        k = np.ceil((np.asarray(tau) - self.t0) / self.dt).astype(np.int64) - 1
        return np.clip(k, 0, self.steps - 1)


@dataclass
class JumpEvents:
    """Accepted jump events stored as flat arrays sorted by (path, time)."""

    path: Array
    step: Array
    time: Array
    marks: Array

    @property
    def count(self) -> int:
        return int(self.path.shape[0])

    def counts_per_path(self, n_paths: int) -> Array:
        return np.bincount(self.path, minlength=n_paths)

    @staticmethod
    def empty(mark_dim=1):
        return JumpEvents(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, mark_dim)))

    @staticmethod
    def concat(parts, mark_dim=1):
        parts = [p for p in parts if p.count]
        if not parts:
            return JumpEvents.empty(mark_dim)
        return JumpEvents(
            np.concatenate([p.path for p in parts]),
            np.concatenate([p.step for p in parts]),
            np.concatenate([p.time for p in parts]),
            np.concatenate([p.marks for p in parts]),
        )


@dataclass
class PathEnsemble:
    """Simulated forward paths on a common grid.

    Arrays are laid out time-major: ``X`` has shape (steps + 1, N, d), ``dW``
    (steps, N, d), ``dB`` (steps, N, q), ``w`` and ``I`` (steps + 1, N, q).
    ``w`` is the unclamped anchor process ``a + B - B_t`` and ``I = h(w)``.
    ``compensator`` holds the per-step compensator drift (before multiplying
    by dt), shape (steps, N, d).
    """

    grid: TimeGrid
    n_paths: int
    master_seed: int
    x0: Array
    anchor: Array
    start_spread: float
    dW: Array
    dB: Array
    w: Array
    I: Array
    X: Array
    compensator: Array
    jumps: JumpEvents
    model_name: str = "custom"

    @property
    def I_path(self):
        return self.I

    @property
    def X_path(self):
        return self.X

    def jump_counts(self) -> Array:
        return self.jumps.counts_per_path(self.n_paths)

    def dump_csv(self, path, max_paths: Optional[int] = None):
        """Write (path, step, time, X.., I.., jump_count_so_far) rows."""
        n = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        d, q = self.X.shape[2], self.I.shape[2]
        times = self.grid.times
        counts = np.zeros((self.grid.steps + 1, n), dtype=np.int64)
        sel = self.jumps.path < n
        np.add.at(counts, (self.jumps.step[sel] + 1, self.jumps.path[sel]), 1)
        counts = np.cumsum(counts, axis=0)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path", "step", "time"] + [f"x{i}" for i in range(d)]
                        + [f"i{j}" for j in range(q)] + ["jump_count_so_far"])
            for p in range(n):
                for k in range(self.grid.steps + 1):
                    wr.writerow([p, k, repr(float(times[k]))]
                                + [repr(float(v)) for v in self.X[k, p]]
                                + [repr(float(v)) for v in self.I[k, p]] + [int(counts[k, p])])


# ---------------------------------------------------------------------------
# elementary simulators
# ---------------------------------------------------------------------------

def simulate_brownians(grid: TimeGrid, n_paths: int, dims: int, master_seed: int,
                       purpose: str = "dW", chunk_size: int = CHUNK_SIZE):
    """Gaussian increments of variance ``dt``, shape (steps, n_paths, dims).

    Each fixed chunk of paths draws from its own stream, so the array is
    identical however the chunks are scheduled.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    out = np.empty((grid.steps, n_paths, dims))
    sq = np.sqrt(grid.dt)
    for c, sl in enumerate(chunk_slices(n_paths, chunk_size)):
        rng = stream(master_seed, purpose, c)
        out[:, sl, :] = rng.standard_normal((grid.steps, sl.stop - sl.start, dims)) * sq
    return out


def anchor_path(anchor, dB):
    """Unclamped anchor process ``w_k = a + sum_{j<k} dB_j``, shape (steps + 1, N, q)."""
    steps, n, q = dB.shape
    a = np.broadcast_to(np.asarray(anchor, float).reshape(-1, q) if np.ndim(anchor) == 2
                        else np.asarray(anchor, float).reshape(1, q), (n, q))
    w = np.empty((steps + 1, n, q))
    w[0] = a
    np.cumsum(dB, axis=0, out=w[1:])
    w[1:] += a
    return w


def simulate_I(start_time, anchor, dB, control_set: ControlSet):
    """Control path ``I_{t_k} = h(a + sum_{j<k} dB_j)``, shape (steps + 1, N, q).

    ``start_time`` is accepted for symmetry with the continuous-time
    definition; the grid already starts there.
    """
    w = anchor_path(anchor, dB)
    s, n, q = w.shape
    return surjection_h(w.reshape(-1, q), control_set).reshape(s, n, q)


def _thin_chunk(I_chunk, kernel: IntensityKernel, grid: TimeGrid, master_seed, chunk, offset):
    """Thinning for one chunk of paths; returns JumpEvents with global path indices."""
    n = I_chunk.shape[1]
    span = grid.t1 - grid.t0
    rng_c = stream(master_seed, "candidates", chunk)
    counts = rng_c.poisson(kernel.rate_bound * span, size=n)
    total = int(counts.sum())
    if total == 0:
        return JumpEvents.empty(kernel.mark_dim)
    path = np.repeat(np.arange(n), counts)
    times = grid.t0 + span * rng_c.random(total)
    order = np.lexsort((times, path))
    path, times = path[order], times[order]
    step = grid.step_of(times)
    a = I_chunk[step, path]
    rate = np.asarray(kernel.total_rate(a), float)
    bad = rate > kernel.rate_bound * (1 + 1e-12)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise MajorantViolated(offset + path[i], rate[i], kernel.rate_bound)
    rng_a = stream(master_seed, "accept", chunk)
    keep = rng_a.random(total) * kernel.rate_bound < rate
    path, times, step, a = path[keep], times[keep], step[keep], a[keep]
    rng_m = stream(master_seed, "marks", chunk)
    u = rng_m.random((path.shape[0], kernel.mark_uniforms))
    marks = np.asarray(kernel.mark_sampler(a, u), float).reshape(path.shape[0], kernel.mark_dim)
    return JumpEvents(path + offset, step, times, marks)


def simulate_cox_thinning(I_path, kernel: IntensityKernel, grid: TimeGrid, seed: int,
                          chunk_size: int = CHUNK_SIZE):
    """Cox jump events by thinning against ``kernel.rate_bound``.

    Candidate times form a homogeneous Poisson stream on (t0, t1]; a candidate
    at ``tau`` is kept with probability ``total_rate(I_tau) / rate_bound``,
    where ``I_tau`` is the grid value at the opening of the step containing
    ``tau``. Kept events receive marks from the kernel's sampler.

    Raises
    ------
    MajorantViolated
        If a realized rate exceeds the bound.
    """
    if kernel.is_null:
        return JumpEvents.empty(kernel.mark_dim)
    n = I_path.shape[1]
    parts = [_thin_chunk(I_path[:, sl], kernel, grid, seed, c, sl.start)
             for c, sl in enumerate(chunk_slices(n, chunk_size))]
    return JumpEvents.concat(parts, kernel.mark_dim)


def _jump_ranges(jumps: JumpEvents, steps: int):
    order = np.argsort(jumps.step, kind="stable")
    bounds = np.searchsorted(jumps.step[order], np.arange(steps + 1))
    return order, bounds


def simulate_X_euler(model: ControlledModel, x0, I_path, dW, jumps: JumpEvents, grid: TimeGrid,
                     seed: int = 0, chunk: int = 0, path_offset: int = 0, return_compensator=False):
    """Euler scheme with compensated jumps.

    ``X_{k+1} = X_k + b dt + sigma dW_k + sum_{jumps in step k} beta(X_k, I_k, e)
    - comp_k dt``, all coefficients frozen at the step's opening state.

    ``jumps`` may carry global path indices; ``path_offset`` is subtracted.

    Raises
    ------
    Explosion
        If a non-finite state appears.
    """
    steps, n, d = dW.shape
    X = np.empty((steps + 1, n, d))
    X[0] = np.broadcast_to(np.asarray(x0, float).reshape(-1, d) if np.ndim(x0) == 2
                           else np.asarray(x0, float).reshape(1, d), (n, d))
    comp_all = np.zeros((steps, n, d))
    dt = grid.dt
    order, bounds = _jump_ranges(jumps, steps)
    atomic = model.intensity.is_atomic
    rng_comp = None if (atomic or not model.has_jumps) else stream(seed, "compensator", chunk)
    for k in range(steps):
        x, a = X[k], I_path[k]
        incr = model.drift(x, a) * dt + np.einsum("nij,nj->ni", model.diffusion(x, a), dW[k])
        if model.has_jumps:
            uni = None
            if rng_comp is not None:
                uni = rng_comp.random((model.compensator_samples, n, model.intensity.mark_uniforms))
            comp = model.compensator(x, a, uni)
            comp_all[k] = comp
            incr -= comp * dt
            sel = order[bounds[k]:bounds[k + 1]]
            if sel.size:
                p = jumps.path[sel] - path_offset
                np.add.at(incr, p, model.jump_size(x[p], a[p], jumps.marks[sel]))
        X[k + 1] = x + incr
        if not np.all(np.isfinite(X[k + 1])):
            raise Explosion(k + 1)
    return (X, comp_all) if return_compensator else X


# ---------------------------------------------------------------------------
# ensemble orchestration
# ---------------------------------------------------------------------------

def _simulate_chunk(model, grid, x0, anchor, start_spread, master_seed, chunk, sl):
    n = sl.stop - sl.start
    d, q = model.dim_x, model.dim_a
    sq = np.sqrt(grid.dt)
    dW = stream(master_seed, "dW", chunk).standard_normal((grid.steps, n, d)) * sq
    dB = stream(master_seed, "dB", chunk).standard_normal((grid.steps, n, q)) * sq
    w = anchor_path(anchor, dB)
    I = surjection_h(w.reshape(-1, q), model.control_set).reshape(w.shape)
    start = np.broadcast_to(np.asarray(x0, float).reshape(1, d), (n, d)).copy()
    if start_spread > 0:
        start += start_spread * stream(master_seed, "start", chunk).standard_normal((n, d))
    jumps = (_thin_chunk(I, model.intensity, grid, master_seed, chunk, sl.start)
             if model.has_jumps else JumpEvents.empty(model.intensity.mark_dim))
    X, comp = simulate_X_euler(model, start, I, dW, jumps, grid, seed=master_seed, chunk=chunk,
                               path_offset=sl.start, return_compensator=True)
    return dW, dB, w, I, X, comp, jumps


def simulate_ensemble(model: ControlledModel, grid: TimeGrid, n_paths: int, x0, anchor,
                      master_seed: int, start_spread: float = 0.0, workers: int = 1,
                      chunk_size: int = CHUNK_SIZE) -> PathEnsemble:
    """Simulate ``n_paths`` forward paths from ``(grid.t0, x0, anchor)``.

    Parameters
    ----------
    start_spread : float
        Standard deviation of an optional Gaussian dispersion of the initial
        state. A dispersed start gives the regression information about the
        value's dependence on the state near ``x0`` at early times; the value
        is then read from the fitted step-0 function at ``x0``.
    workers : int
        Thread count used to simulate chunks; does not affect the output.
    """
    if grid.t1 > model.horizon + 1e-12:
        raise ValueError("time grid extends beyond the model horizon")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.asarray(x0, float).reshape(model.dim_x)
    anchor = np.asarray(anchor, float).reshape(model.dim_a)
    slices = chunk_slices(n_paths, chunk_size)
    job = lambda c: _simulate_chunk(model, grid, x0, anchor, start_spread, master_seed, c, slices[c])
    if workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, range(len(slices))))
    else:
        parts = [job(c) for c in range(len(slices))]
    cat = lambda i: np.concatenate([p[i] for p in parts], axis=1)
    return PathEnsemble(
        grid=grid, n_paths=n_paths, master_seed=int(master_seed), x0=x0, anchor=anchor,
        start_spread=float(start_spread), dW=cat(0), dB=cat(1), w=cat(2), I=cat(3), X=cat(4),
        compensator=cat(5), jumps=JumpEvents.concat([p[6] for p in parts], model.intensity.mark_dim),
        model_name=model.name,
    )
