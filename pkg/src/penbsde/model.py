"""Problem data for controlled jump-diffusions with randomized controls.

A ``ControlledModel`` bundles the coefficients of the controlled state
equation, the controlled jump intensity, the running and terminal costs and
the ball-shaped control set. Every coefficient map is vectorized over a
leading batch axis:

============  ==============================  ==============
map           arguments                       returns
============  ==============================  ==============
drift         x (N, d), a (N, q)              (N, d)
diffusion     x (N, d), a (N, q)              (N, d, d)
jump_size     x (N, d), a (N, q), e (N, m)    (N, d)
running_cost  x (N, d), a (N, q)              (N,)
terminal_cost x (N, d)                        (N,)
total_rate    a (N, q)                        (N,)
mark_sampler  a (N, q), u (N, k) uniforms     (N, m)
============  ==============================  ==============

The module also provides the smooth surjection from R^q onto the control
ball used to randomize the control, and statistical spot checks of the
standing regularity assumptions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NotInOpenBall

Array = np.ndarray


# ---------------------------------------------------------------------------
# control set and surjection
# ---------------------------------------------------------------------------

def radial_profile(rho):
    """Quintic smoothstep ``6 rho^5 - 15 rho^4 + 10 rho^3`` on [0, 1], 1 beyond.

    The profile has zero first and second derivatives at both 0 and 1, which
    makes the induced ball map twice continuously differentiable across the
    sphere.
    """
    rho = np.asarray(rho, dtype=float)
    r = np.clip(rho, 0.0, 1.0)
    return r * r * r * (10.0 + r * (-15.0 + 6.0 * r))


@dataclass(frozen=True)
class ControlSet:
    """Closed Euclidean ball ``{a : |a - center| <= radius}`` in R^q."""

    center: Array
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float)).copy()
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError("control set radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def bounds(self):
        """Axis-aligned bounding box (lo, hi) of the ball."""
        return self.center - self.radius, self.center + self.radius

    def contains(self, a, tol=1e-12):
        a = np.asarray(a, dtype=float)
        return np.linalg.norm(np.atleast_2d(a) - self.center, axis=-1) <= self.radius + tol


def _as_points(a, dim):
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    squeeze = arr.ndim == 1
    pts = arr.reshape(-1, dim) if squeeze else arr
    return pts, squeeze


def surjection_h(a, control_set: ControlSet):
    """Map any point of R^q onto the closed control ball.

    Works in normalized coordinates ``u = (a - center) / radius``: the
    direction is kept and the length ``|u|`` is replaced by
    ``radial_profile(|u|)``. Points outside the ball land on the sphere.

    Parameters
    ----------
    a : array_like, shape (q,) or (N, q)
    control_set : ControlSet

    Returns
    -------
    ndarray with the same shape as ``a``.
    """
    q = control_set.dim
    pts, squeeze = _as_points(a, q)
    u = (pts - control_set.center) / control_set.radius
    rho = np.linalg.norm(u, axis=1)
    scale = np.zeros_like(rho)
    pos = rho > 0
    scale[pos] = radial_profile(rho[pos]) / rho[pos]
    out = control_set.center + control_set.radius * u * scale[:, None]
    return out.reshape(q) if squeeze else out


def _invert_profile(target, tol=1e-15, max_iter=200):
    """Bisection for ``radial_profile(rho) = target`` with target in [0, 1)."""
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = radial_profile(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


def surjection_preimage(y, control_set: ControlSet):
    """Return a point ``a`` with ``surjection_h(a) == y`` for y in the open ball.

    The radial profile is strictly increasing on [0, 1], so the preimage inside
    the ball is unique; it is found by bisection on the profile.

    Raises
    ------
    NotInOpenBall
        If any target lies on or outside the sphere.
    """
    q = control_set.dim
    pts, squeeze = _as_points(y, q)
    u = (pts - control_set.center) / control_set.radius
    s = np.linalg.norm(u, axis=1)
    if np.any(~np.isfinite(s)) or np.any(s >= 1.0):
        raise NotInOpenBall(f"max normalized radius {np.max(s):.6g}")
    rho = _invert_profile(s)
    scale = np.zeros_like(s)
    pos = s > 0
    scale[pos] = rho[pos] / s[pos]
    out = control_set.center + control_set.radius * u * scale[:, None]
    return out.reshape(q) if squeeze else out


def interior_anchors(control_set: ControlSet, count: int, fraction: float = 0.5):
    """Deterministic probe anchors inside ``fraction * radius`` of the center.

    For q = 1 the anchors are evenly spaced on the segment; in higher
    dimensions they sit on a circle in the first two coordinates (plus the
    center when count is odd).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    c, rad = control_set.center, fraction * control_set.radius
    if count == 1:
        return c[None, :].copy()
    if control_set.dim == 1:
        return c + rad * np.linspace(-1.0, 1.0, count)[:, None]
    k = count - (count % 2)
    ang = 2 * np.pi * np.arange(k) / k
    pts = np.repeat(c[None, :], count, axis=0)
    pts[:k, 0] += rad * np.cos(ang)
    pts[:k, 1] += rad * np.sin(ang)
    return pts


# ---------------------------------------------------------------------------
# intensity kernel
# ---------------------------------------------------------------------------

def _const_mark(value):
    value = np.atleast_1d(np.asarray(value, dtype=float))

    def mark(a):
        return np.broadcast_to(value, (np.shape(a)[0], value.shape[0])).copy()

    return mark


@dataclass(frozen=True)
class Atom:
    """One atom of a finite-mark kernel.

    ``mark`` is either a constant mark vector or a map ``a (N, q) -> (N, m)``;
    the latter lets the jump location itself depend on the control, which is
    how families like ``{delta_a}`` (no common dominating measure) are written.
    ``weight`` maps ``a (N, q) -> (N,)`` nonnegative rates.
    """

    mark: Callable[[Array], Array]
    weight: Callable[[Array], Array]

    def __post_init__(self):
        if not callable(self.mark):
            object.__setattr__(self, "mark", _const_mark(self.mark))


@dataclass(frozen=True)
class IntensityKernel:
    """Finite-activity jump intensity ``lambda(a, de)``.

    Parameters
    ----------
    total_rate : callable
        ``a (N, q) -> (N,)`` total mass ``lambda(a, E)``.
    mark_sampler : callable
        ``(a (N, q), u (N, mark_uniforms)) -> marks (N, mark_dim)``; draws from
        the normalized kernel using the supplied uniforms.
    rate_bound : float
        Majorant of ``total_rate`` over the control ball, used for thinning.
    mark_dim, mark_uniforms : int
        Mark dimension and number of uniforms consumed per mark.
    atoms : sequence of Atom, optional
        Exact atomic representation (used by the finite-difference reference,
        the compensator and the backward one-jump expansion).
    """

    total_rate: Callable[[Array], Array]
    mark_sampler: Callable[[Array, Array], Array]
    rate_bound: float
    mark_dim: int = 1
    mark_uniforms: int = 1
    atoms: Optional[Sequence[Atom]] = None

    def __post_init__(self):
        if not np.isfinite(self.rate_bound) or self.rate_bound <= 0:
            raise ValueError("rate_bound must be a finite positive number (finite activity only)")
        if self.atoms is not None:
            object.__setattr__(self, "atoms", tuple(self.atoms))

    @property
    def is_null(self) -> bool:
        """True when the kernel is declared identically zero (no atoms)."""
        return self.atoms is not None and len(self.atoms) == 0

    @property
    def is_atomic(self) -> bool:
        return self.atoms is not None

    def atom_table(self, a):
        """Marks and weights of every atom at controls ``a``.

        Returns a list of ``(marks (N, m), weights (N,))`` pairs.
        """
        if self.atoms is None:
            raise ValueError("kernel has no atomic representation")
        return [(np.asarray(at.mark(a), float), np.asarray(at.weight(a), float)) for at in self.atoms]

    @staticmethod
    def null(mark_dim=1):
        """Kernel with no jumps at all."""
        return IntensityKernel(
            total_rate=lambda a: np.zeros(np.shape(a)[0]),
            mark_sampler=lambda a, u: np.zeros((np.shape(a)[0], mark_dim)),
            rate_bound=1.0,
            mark_dim=mark_dim,
            atoms=(),
        )

    @staticmethod
    def from_atoms(atoms, rate_bound, mark_dim=1):
        """Build a kernel whose total rate and sampler follow from its atoms."""
        atoms = tuple(atoms)

        def total_rate(a):
            return sum(np.asarray(at.weight(a), float) for at in atoms)

        def sampler(a, u):
            table = [(np.asarray(at.mark(a), float), np.asarray(at.weight(a), float)) for at in atoms]
            w = np.stack([t[1] for t in table], axis=1)
            tot = w.sum(axis=1, keepdims=True)
            cum = np.cumsum(w / np.where(tot > 0, tot, 1.0), axis=1)
            idx = np.minimum((u[:, :1] > cum).sum(axis=1), len(atoms) - 1)
            marks = np.stack([t[0] for t in table], axis=1)
            return marks[np.arange(len(idx)), idx]

        return IntensityKernel(total_rate, sampler, rate_bound, mark_dim=mark_dim,
                               mark_uniforms=1, atoms=atoms)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlledModel:
    """Coefficients of a controlled jump-diffusion with terminal and running cost.

    See the module docstring for the calling convention of the maps.
    """

    dim_x: int
    dim_a: int
    horizon: float
    drift: Callable
    diffusion: Callable
    jump_size: Callable
    intensity: IntensityKernel
    running_cost: Callable
    terminal_cost: Callable
    control_set: ControlSet
    name: str = "custom"
    compensator_samples: int = 16
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_a < 1:
            raise ValueError("dim_x and dim_a must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.control_set.dim != self.dim_a:
            raise ValueError("control set dimension differs from dim_a")

    def h(self, a):
        return surjection_h(a, self.control_set)

    @property
    def has_jumps(self) -> bool:
        return not self.intensity.is_null

    def compensator(self, x, a, uniforms=None):
        """Compensator drift ``int beta(x, a, e) lambda(a, de)`` per path.

        Exact for atomic kernels. Otherwise a Monte Carlo average over
        ``uniforms`` of shape (S, N, mark_uniforms) mark draws, times the total
        rate.
        """
        n = x.shape[0]
        if self.intensity.is_null:
            return np.zeros((n, self.dim_x))
        if self.intensity.is_atomic:
            out = np.zeros((n, self.dim_x))
            for marks, weights in self.intensity.atom_table(a):
                out += self.jump_size(x, a, marks) * weights[:, None]
            return out
        if uniforms is None:
            raise ValueError("non-atomic kernel needs uniforms for the compensator")
        acc = np.zeros((n, self.dim_x))
        for u in uniforms:
            acc += self.jump_size(x, a, self.intensity.mark_sampler(a, u))
        return acc / len(uniforms) * self.intensity.total_rate(a)[:, None]


# ---------------------------------------------------------------------------
# assumption spot checks
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    """Empirical regularity ratios and the flags raised against their caps."""

    lipschitz: dict
    growth: float
    max_rate: float
    rate_bound: float
    caps: dict
    flags: dict

    @property
    def all_clear(self) -> bool:
        return not any(self.flags.values())


def validate_model(model: ControlledModel, budget: int = 1000, seed: int = 0,
                   x_range=(-10.0, 10.0), lipschitz_cap=1e3, growth_cap=1e3):
    """Spot-check Lipschitz, linear-growth and rate-majorant assumptions.

    Draws ``budget`` states uniformly in ``x_range`` per coordinate and
    controls uniformly in the control ball, then reports the largest observed
    ratios. This is a sampling diagnostic, not a proof.
    """
    if budget < 2:
        raise ValueError("budget must be >= 2")
    rng = np.random.default_rng(seed)
    d, q = model.dim_x, model.dim_a
    cs = model.control_set

    def ball(n):
        v = rng.standard_normal((n, q))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = rng.random(n) ** (1.0 / q)
        return cs.center + cs.radius * v * r[:, None]

    x1 = rng.uniform(*x_range, size=(budget, d))
    x2 = rng.uniform(*x_range, size=(budget, d))
    a1, a2 = ball(budget), ball(budget)
    dist = np.linalg.norm(x1 - x2, axis=1) + np.linalg.norm(a1 - a2, axis=1)
    dist = np.maximum(dist, 1e-300)

    def ratio(f1, f2):
        diff = np.abs(f1 - f2).reshape(budget, -1)
        return float(np.max(np.linalg.norm(diff, axis=1) / dist))

    lip = {
        "drift": ratio(model.drift(x1, a1), model.drift(x2, a2)),
        "diffusion": ratio(model.diffusion(x1, a1), model.diffusion(x2, a2)),
    }
    if model.has_jumps:
        u = rng.random((budget, model.intensity.mark_uniforms))
        e = model.intensity.mark_sampler(a1, u)
        lip["jump_size"] = ratio(model.jump_size(x1, a1, e), model.jump_size(x2, a2, e))
    else:
        lip["jump_size"] = 0.0
    g = np.abs(model.terminal_cost(x1))
    growth = float(np.max(g / (1.0 + np.linalg.norm(x1, axis=1))))
    a_all = np.vstack([a1, a2, cs.center[None, :]])
    max_rate = float(np.max(model.intensity.total_rate(a_all))) if model.has_jumps else 0.0
    caps = {"lipschitz": lipschitz_cap, "growth": growth_cap, "rate": model.intensity.rate_bound}
    flags = {f"lipschitz_{k}": v > lipschitz_cap for k, v in lip.items()}
    flags["growth"] = growth > growth_cap
    flags["rate"] = max_rate > model.intensity.rate_bound
    return AssumptionReport(lip, growth, max_rate, model.intensity.rate_bound, caps, flags)


# ---------------------------------------------------------------------------
# benchmark models
# ---------------------------------------------------------------------------

def _zeros_vec(d):
    return lambda x, a: np.zeros((x.shape[0], d))


def _zeros_mat(d):
    return lambda x, a: np.zeros((x.shape[0], d, d))


def _zero_cost(x, a):
    return np.zeros(x.shape[0])


def _no_jump(x, a, e):
    return np.zeros_like(x)


def uvm_model(sigma_lo=0.1, sigma_hi=0.3, strike=100.0, horizon=1.0):
    """Uncertain volatility: ``dX = a X dW`` with ``a`` in [sigma_lo, sigma_hi], call payoff."""
    if not 0 < sigma_lo < sigma_hi:
        raise ValueError("need 0 < sigma_lo < sigma_hi")
    cs = ControlSet([0.5 * (sigma_lo + sigma_hi)], 0.5 * (sigma_hi - sigma_lo))
    return ControlledModel(
        dim_x=1, dim_a=1, horizon=horizon,
        drift=_zeros_vec(1),
        diffusion=lambda x, a: (a[:, 0] * x[:, 0])[:, None, None],
        jump_size=_no_jump,
        intensity=IntensityKernel.null(),
        running_cost=_zero_cost,
        terminal_cost=lambda x: np.maximum(x[:, 0] - strike, 0.0),
        control_set=cs, name="uvm",
        params={"sigma_lo": sigma_lo, "sigma_hi": sigma_hi, "strike": strike},
    )


def nondominated_jump_model(center=1.0, radius=0.5, kappa=0.0, rate=1.0, horizon=1.0):
    """Pure-jump model whose jump *location* is the control: ``lambda(a, .) = rate * delta_a``.

    ``dX = int e (pi - lambda(I, de) ds)``, ``g(x) = |x - kappa|``. The family
    ``{delta_a}`` has no common dominating measure.
    """
    cs = ControlSet([center], radius)
    atom = Atom(mark=lambda a: np.array(a, dtype=float, copy=True),
                weight=lambda a: np.full(np.shape(a)[0], float(rate)))
    kernel = IntensityKernel(
        total_rate=lambda a: np.full(np.shape(a)[0], float(rate)),
        mark_sampler=lambda a, u: np.array(a, dtype=float, copy=True),
        rate_bound=float(rate), mark_dim=1, mark_uniforms=1, atoms=(atom,),
    )
    return ControlledModel(
        dim_x=1, dim_a=1, horizon=horizon,
        drift=_zeros_vec(1), diffusion=_zeros_mat(1),
        jump_size=lambda x, a, e: np.asarray(e, float)[:, :1].copy(),
        intensity=kernel, running_cost=_zero_cost,
        terminal_cost=lambda x: np.abs(x[:, 0] - kappa),
        control_set=cs, name="nondominated-jump",
        params={"center": center, "radius": radius, "kappa": kappa, "rate": rate},
    )


def trivial_drift_model(drift=1.0, horizon=1.0):
    """Deterministic ``dX = drift dt`` with ``g(x) = x``; the control is inert."""
    return ControlledModel(
        dim_x=1, dim_a=1, horizon=horizon,
        drift=lambda x, a: np.full((x.shape[0], 1), float(drift)),
        diffusion=_zeros_mat(1), jump_size=_no_jump,
        intensity=IntensityKernel.null(), running_cost=_zero_cost,
        terminal_cost=lambda x: x[:, 0].copy(),
        control_set=ControlSet([0.0], 1.0), name="trivial-drift",
        params={"drift": drift},
    )


def constant_intensity_model(rate=2.0, jump=1.0, horizon=1.0):
    """Homogeneous compound Poisson with a single mark; no diffusion."""
    atom = Atom(mark=[jump], weight=lambda a: np.full(np.shape(a)[0], float(rate)))
    kernel = IntensityKernel.from_atoms([atom], rate_bound=float(rate))
    return ControlledModel(
        dim_x=1, dim_a=1, horizon=horizon,
        drift=_zeros_vec(1), diffusion=_zeros_mat(1),
        jump_size=lambda x, a, e: np.asarray(e, float)[:, :1].copy(),
        intensity=kernel, running_cost=_zero_cost,
        terminal_cost=lambda x: x[:, 0].copy(),
        control_set=ControlSet([0.0], 1.0), name="constant-intensity",
        params={"rate": rate, "jump": jump},
    )


def controlled_intensity_model(base_rate=1.0, slope=0.5, vol=0.2, horizon=1.0, rate_bound=None):
    """Jump-diffusion whose intensity and mark law both depend on the control.

    ``total_rate(a) = base_rate + slope * |a|`` on the unit ball; marks are
    +0.5 with probability ``0.5 + 0.25 a`` and -0.25 otherwise.
    ``rate_bound`` overrides the thinning majorant ``base_rate + slope``
    (a smaller value makes simulation fail, which is useful for testing).
    """
    def up_weight(a):
        a0 = np.asarray(a, float)[:, 0]
        return (base_rate + slope * np.abs(a0)) * (0.5 + 0.25 * a0)

    def down_weight(a):
        a0 = np.asarray(a, float)[:, 0]
        return (base_rate + slope * np.abs(a0)) * (0.5 - 0.25 * a0)

    atoms = [Atom(mark=[0.5], weight=up_weight), Atom(mark=[-0.25], weight=down_weight)]
    bound = base_rate + slope if rate_bound is None else rate_bound
    kernel = IntensityKernel.from_atoms(atoms, rate_bound=bound)
    return ControlledModel(
        dim_x=1, dim_a=1, horizon=horizon,
        drift=_zeros_vec(1),
        diffusion=lambda x, a: np.full((x.shape[0], 1, 1), float(vol)),
        jump_size=lambda x, a, e: np.asarray(e, float)[:, :1].copy(),
        intensity=kernel, running_cost=_zero_cost,
        terminal_cost=lambda x: x[:, 0].copy(),
        control_set=ControlSet([0.0], 1.0), name="controlled-intensity",
        params={"base_rate": base_rate, "slope": slope, "vol": vol, "rate_bound": bound},
    )


BENCHMARKS = {
    "uvm": uvm_model,
    "nondominated-jump": nondominated_jump_model,
    "trivial-drift": trivial_drift_model,
    "constant-intensity": constant_intensity_model,
    "controlled-intensity": controlled_intensity_model,
}


def make_model(name, **params):
    """Construct a built-in benchmark model by name."""
    try:
        ctor = BENCHMARKS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; known: {sorted(BENCHMARKS)}") from None
    return ctor(**params)
