"""Least-squares conditional expectations on a feature basis.

Two basis families are available:

* ``polynomial``: monomials of total degree <= ``degree`` in standardized
  features, solved by a column-scaled QR factorization.
* ``partition``: tensor-product piecewise-linear "hat" functions on
  quantile knots (``cells_per_dim`` cells per feature). The hats form a
  partition of unity, so constants are reproduced exactly, and each cell's
  fit is local, which keeps estimation noise from leaking across the domain.

Both solve the exact least-squares problem when the design has full rank and
fall back to a ridge-regularized solve (``ridge`` times the mean diagonal of
the Gram matrix) when it does not.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement, product
from typing import Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import SingularDesign

Array = np.ndarray

MAX_DEGREE = 6


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis description.

    Parameters
    ----------
    kind : {"polynomial", "partition"}
    degree : int
        Total degree for the polynomial kind (at most 6).
    cells_per_dim : int or sequence of int
        Cells per feature for the partition kind; a sequence gives one count
        per feature column (state coordinates first, then anchor coordinates).
    include_intercept : bool
        Always true; kept as an explicit field.
    ridge : float
        Relative ridge used only when the design is rank deficient.
    allow_ridge : bool
        When false, a rank-deficient design raises ``SingularDesign``.
    """

    kind: str = "partition"
    degree: int = 3
    cells_per_dim: Union[int, Sequence[int]] = 10
    include_intercept: bool = True
    ridge: float = 1e-10
    allow_ridge: bool = True

    def __post_init__(self):
        if self.kind not in ("polynomial", "partition"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if not self.include_intercept:
            raise ValueError("the basis always includes an intercept")
        if self.kind == "polynomial" and not 0 <= self.degree <= MAX_DEGREE:
            raise ValueError(f"polynomial degree must be in [0, {MAX_DEGREE}]")
        cells = self.cells_per_dim
        if np.isscalar(cells):
            if int(cells) < 1:
                raise ValueError("cells_per_dim must be positive")
        else:
            object.__setattr__(self, "cells_per_dim", tuple(int(c) for c in cells))
            if any(c < 1 for c in self.cells_per_dim):
                raise ValueError("cells_per_dim must be positive")

    def cells_for(self, n_features):
        c = self.cells_per_dim
        if np.isscalar(c):
            return [int(c)] * n_features
        if len(c) != n_features:
            raise ValueError(f"cells_per_dim has {len(c)} entries for {n_features} features")
        return list(c)


def _is_constant(u):
    return np.ptp(u) <= 1e-12 * max(1.0, float(np.max(np.abs(u))))


class PolynomialBasis:
    """Monomials of total degree <= degree in standardized non-constant features."""

    def __init__(self, features: Array, degree: int):
        U = np.asarray(features, float)
        self.active = [j for j in range(U.shape[1]) if not _is_constant(U[:, j])]
        sub = U[:, self.active]
        self.mean = sub.mean(axis=0) if self.active else np.zeros(0)
        self.scale = sub.std(axis=0) if self.active else np.ones(0)
        m = len(self.active)
        self.exponents = [()]
        for deg in range(1, degree + 1):
            self.exponents += list(combinations_with_replacement(range(m), deg))
        self.size = len(self.exponents)

    def design(self, U):
        Z = (np.asarray(U, float)[:, self.active] - self.mean) / self.scale
        out = np.empty((Z.shape[0], self.size))
        for i, ex in enumerate(self.exponents):
            col = np.ones(Z.shape[0])
            for j in ex:
                col = col * Z[:, j]
            out[:, i] = col
        return out

    def evaluate(self, U, coef):
        return self.design(U) @ coef

    def evaluate_product(self, lefts, rights, coef):
        n = lefts[0].shape[0]
        out = np.empty((len(lefts), len(rights), n) + coef.shape[1:])
        for a, L in enumerate(lefts):
            for b, R in enumerate(rights):
                out[a, b] = self.evaluate(np.concatenate([L, R], axis=1), coef)
        return out


class PartitionBasis:
    """Tensor-product hat functions on per-feature quantile knots.

    Beyond the outermost knots the hats extrapolate linearly, so fitted
    functions stay defined (and affine) slightly outside the sample range.
    Constant features are dropped.
    """

    def __init__(self, features: Array, cells: Sequence[int]):
        U = np.asarray(features, float)
        self.knots = []
        for j in range(U.shape[1]):
            u = U[:, j]
            if _is_constant(u):
                self.knots.append(None)
                continue
            kn = np.unique(np.quantile(u, np.linspace(0.0, 1.0, cells[j] + 1)))
            self.knots.append(kn if kn.size >= 2 else None)
        self.active = [j for j, k in enumerate(self.knots) if k is not None]
        self._strides = {}
        stride = 1
        for j in self.active:
            self._strides[j] = stride
            stride *= self.knots[j].size
        self.size = stride

    def _dim_factor(self, j, u):
        """Left knot column offset, stride and interpolation weight for feature j."""
        kn = self.knots[j]
        i = np.searchsorted(kn, u, side="right") - 1
        np.clip(i, 0, kn.size - 2, out=i)
        lo = kn[i]
        t = (u - lo) / (kn[i + 1] - lo)
        return i * self._strides[j], self._strides[j], t

    def _factors(self, U):
        U = np.asarray(U, float)
        return [self._dim_factor(j, U[:, j]) for j in self.active]

    @staticmethod
    def _corners_of(facs, n):
        """Yield (column index, weight) for each of the 2**D cell corners."""
        for bits in product((0, 1), repeat=len(facs)):
            idx = np.zeros(n, dtype=np.int64)
            wt = np.ones(n)
            for (base, stride, t), b in zip(facs, bits):
                idx += base + b * stride
                wt = wt * (t if b else 1.0 - t)
            yield idx, wt

    def _corners(self, U):
        return self._corners_of(self._factors(U), np.shape(U)[0])

    @staticmethod
    def _combine(corners, coef):
        out = None
        for idx, wt in corners:
            term = np.take(coef, idx, axis=0) * (wt if coef.ndim == 1 else wt[:, None])
            out = term if out is None else out + term
        return out

    def evaluate_product(self, lefts, rights, coef):
        """Evaluate at every pairing of a left block with a right block.

        ``lefts`` and ``rights`` are lists of (N, m1) and (N, m2) arrays whose
        row-wise concatenation forms the features. Each block is located once.
        Returns shape (len(lefts), len(rights), N) plus coefficient columns.
        """
        split = lefts[0].shape[1]
        n = lefts[0].shape[0]
        lf = [[self._dim_factor(j, L[:, j]) for j in self.active if j < split] for L in lefts]
        rf = [[self._dim_factor(j, R[:, j - split]) for j in self.active if j >= split] for R in rights]
        out = np.empty((len(lefts), len(rights), n) + coef.shape[1:])
        for a, fa in enumerate(lf):
            for b, fb in enumerate(rf):
                out[a, b] = self._combine(self._corners_of(fa + fb, n), coef)
        return out

    def locate(self, U):
        """Column indices and weights of the nonzero hats at each point, (N, 2**D)."""
        pairs = list(self._corners(U))
        return np.stack([p[0] for p in pairs], axis=1), np.stack([p[1] for p in pairs], axis=1)

    def design(self, U):
        idx, wts = self.locate(U)
        n, m = idx.shape
        return sp.csr_matrix((wts.ravel(), idx.ravel(), np.arange(0, n * m + 1, m)), shape=(n, self.size))

    def evaluate(self, U, coef):
        return self._combine(self._corners(U), coef)


def fit_basis(spec: BasisSpec, features: Array):
    """Instantiate the data-dependent basis described by ``spec``."""
    features = np.asarray(features, float)
    if features.ndim == 1:
        features = features[:, None]
    if spec.kind == "polynomial":
        return PolynomialBasis(features, spec.degree)
    return PartitionBasis(features, spec.cells_for(features.shape[1]))


class Projector:
    """Orthogonal projection onto a basis span in the empirical inner product.

    The factorization is computed once and reused for any number of target
    columns.
    """

    def __init__(self, spec: BasisSpec, features: Array, check_size: bool = True):
        features = np.asarray(features, float)
        if features.ndim == 1:
            features = features[:, None]
        self.spec = spec
        self.basis = fit_basis(spec, features)
        n, p = features.shape[0], self.basis.size
        if n <= p:
            raise ValueError(f"need more paths ({n}) than basis functions ({p})")
        if check_size and p > 1 and 10 * p > n:
            raise ValueError(f"basis has {p} functions; need n_paths >= 10 x that ({n} given)")
        self.used_ridge = False
        if isinstance(self.basis, PartitionBasis):
            self.P = self.basis.design(features)
            self._factor_gram((self.P.T @ self.P).toarray())
        else:
            self.P = self.basis.design(features)
            self._factor_qr(self.P)

    @property
    def n_features(self):
        return self.basis.size

    # -- factorizations ------------------------------------------------------
    def _ridge_or_raise(self, detail):
        if not self.spec.allow_ridge:
            raise SingularDesign(detail)
        self.used_ridge = True

    def _factor_gram(self, G):
        p = G.shape[0]
        self._mode = "chol"
        diag = np.diag(G)
        ok = np.all(diag > 0)
        if ok:
            try:
                c, low = sla.cho_factor(G, lower=False)
                rd = np.abs(np.diag(c))
                ok = rd.min() > 1e-7 * rd.max()
            except np.linalg.LinAlgError:
                ok = False
        if not ok:
            self._ridge_or_raise("partition Gram matrix is not positive definite")
            eps = self.spec.ridge * max(np.trace(G) / p, 1e-300)
            c, low = sla.cho_factor(G + eps * np.eye(p), lower=False)
        self._cho = (c, low)

    def _factor_qr(self, P):
        n, p = P.shape
        self._colscale = np.sqrt((P * P).sum(axis=0))
        self._colscale[self._colscale == 0] = 1.0
        Ps = P / self._colscale
        Q, R = np.linalg.qr(Ps, mode="reduced")
        rd = np.abs(np.diag(R))
        if rd.min() > 1e-10 * rd.max():
            self._mode = "qr"
            self._Q, self._R = Q, R
            return
        self._ridge_or_raise("polynomial design is rank deficient")
        self._mode = "ridge"
        G = Ps.T @ Ps
        eps = self.spec.ridge * max(np.trace(G) / p, 1e-300)
        self._cho = sla.cho_factor(G + eps * np.eye(p))
        self._Ps = Ps

    # -- solves --------------------------------------------------------------
    def coef(self, targets):
        """Coefficients for one target vector (N,) or several (N, k)."""
        y = np.asarray(targets, float)
        if not np.all(np.isfinite(y)):
            raise ValueError("regression targets must be finite")
        if self._mode == "chol":
            return sla.cho_solve(self._cho, self.P.T @ y)
        if self._mode == "qr":
            c = sla.solve_triangular(self._R, self._Q.T @ y)
        else:
            c = sla.cho_solve(self._cho, self._Ps.T @ y)
        return c / (self._colscale if c.ndim == 1 else self._colscale[:, None])

    def fitted(self, targets):
        return self.P @ self.coef(targets)

    def predict(self, features, coef):
        features = np.asarray(features, float)
        if features.ndim == 1:
            features = features[:, None]
        return self.basis.evaluate(features, coef)

    def predict_product(self, lefts, rights, coef):
        return self.basis.evaluate_product(lefts, rights, coef)

    def prediction_stderr(self, features, residual_var):
        """Standard error of the fitted mean at ``features`` (OLS formula)."""
        features = np.asarray(features, float)
        if features.ndim == 1:
            features = features[:, None]
        D = self.basis.design(features)
        D = D.toarray() if sp.issparse(D) else D
        if self._mode == "chol":
            sol = sla.cho_solve(self._cho, D.T)
        elif self._mode == "qr":
            z = sla.solve_triangular(self._R, (D / self._colscale).T, trans="T")
            return np.sqrt(residual_var * np.sum(z * z, axis=0))
        else:
            Ds = D / self._colscale
            sol = sla.cho_solve(self._cho, Ds.T)
            D = Ds
        return np.sqrt(residual_var * np.maximum(np.sum(D.T * sol, axis=0), 0.0))


def fit_predict(features, targets, basis: BasisSpec = BasisSpec(), check_size: bool = False):
    """Project ``targets`` on the basis of ``features``.

    Returns
    -------
    fitted : ndarray, same leading shape as targets
    coef : ndarray
    """
    proj = Projector(basis, features, check_size=check_size)
    c = proj.coef(targets)
    return proj.P @ c, c
