"""Desk-scale checks of the spectral-dominance argument on two-block Gaussian data.

Samples carry a clean block ``x_c`` and a poison block ``x_p`` in disjoint
coordinates. Inflating the poison block's covariance relative to the clean
one (ratio ``kappa``) should starve the clean-block weights of a ridge
logistic fit, and a noise-smoothed linear classifier restricted to the clean
subspace should fall toward chance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import NumericalError


# ---------------------------------------------------------------------------
# primitives


def lambert_w(x):
    """Principal branch of Lambert W for ``x >= 0`` (scalar or array)."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("lambert_w is defined here only for x >= 0")
    w = kernels.lambertw_array(arr.ravel()).reshape(arr.shape)
    return float(w) if w.ndim == 0 else w


_erfc = np.frompyfunc(math.erfc, 1, 1)


def gaussian_cdf(z):
    """Standard normal CDF, ``0.5 * erfc(-z / sqrt 2)``.

    The complementary form keeps full relative precision in the lower tail.
    """
    arr = np.asarray(z, dtype=np.float64)
    out = 0.5 * np.asarray(_erfc(-arr / math.sqrt(2.0)), dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def spectral_norm(m, sym_tol: float = 1e-9) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol:
        raise ValueError("matrix is not symmetric within tolerance")
    return kernels.power_iteration(m)[0]


# ---------------------------------------------------------------------------
# synthetic two-block data


@dataclass(frozen=True, eq=False)
class SpectralSpec:
    """Means are ``2 x d`` arrays: row 0 for label +1, row 1 for label -1."""
    mu_c: np.ndarray
    mu_p: np.ndarray
    sigma_c: np.ndarray
    sigma_p: np.ndarray

    def __post_init__(self):
        for name in ("mu_c", "mu_p", "sigma_c", "sigma_p"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        for s, mu in ((self.sigma_c, self.mu_c), (self.sigma_p, self.mu_p)):
            if s.shape != (mu.shape[1], mu.shape[1]) or mu.shape[0] != 2:
                raise ValueError("mean/covariance shapes disagree")
            if np.max(np.abs(s - s.T), initial=0.0) > 1e-12:
                raise ValueError("covariance not symmetric")
            if np.linalg.eigvalsh(s).min(initial=0.0) < -1e-12:
                raise ValueError("covariance not positive semi-definite")

    @classmethod
    def symmetric(cls, mu_c, mu_p, sigma_c, sigma_p) -> "SpectralSpec":
        mu_c, mu_p = np.asarray(mu_c, float), np.asarray(mu_p, float)
        return cls(np.stack([mu_c, -mu_c]), np.stack([mu_p, -mu_p]), sigma_c, sigma_p)

    @property
    def d_c(self) -> int:
        return self.mu_c.shape[1]

    @property
    def d_p(self) -> int:
        return self.mu_p.shape[1]

    @property
    def lambda_c(self) -> float:
        return spectral_norm(self.sigma_c)

    @property
    def lambda_p(self) -> float:
        return spectral_norm(self.sigma_p)

    @property
    def kappa(self) -> float:
        return self.lambda_p / self.lambda_c

    def scale_poison(self, a: float) -> "SpectralSpec":
        """Multiply the poison block (means and spread) by ``a``."""
        return replace(self, mu_p=self.mu_p * a, sigma_p=self.sigma_p * (a * a))

    def at_kappa(self, kappa: float) -> "SpectralSpec":
        return self.scale_poison(math.sqrt(kappa * self.lambda_c / self.lambda_p))


def default_template() -> SpectralSpec:
    """Weak clean signal, tight but informative poison block."""
    return SpectralSpec.symmetric([0.5, 0.25], [1.0, 0.5],
                                  np.diag([1.0, 0.5]), np.diag([0.04, 0.02]))


def _sqrt_psd(s):
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def synth_dataset(spec: SpectralSpec, n: int, seed: int = 0):
    """Labels alternate +1, -1; returns ``(X, y)`` with ``X = [x_c | x_p]``.

    Both noise blocks are drawn from the generator in a fixed order, so
    rescaling the poison block under the same seed reuses the same draws.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    zc = rng.standard_normal((n, spec.d_c))
    zp = rng.standard_normal((n, spec.d_p))
    row = np.where(y > 0, 0, 1)
    xc = spec.mu_c[row] + zc @ _sqrt_psd(spec.sigma_c)
    xp = spec.mu_p[row] + zp @ _sqrt_psd(spec.sigma_p)
    return np.hstack([xc, xp]), y


# ---------------------------------------------------------------------------
# ridge logistic regression


def ridge_objective(w, X, y, gamma):
    return float(np.logaddexp(0.0, -y * (X @ w)).sum() + 0.5 * gamma * (w @ w))


def ridge_gradient(w, X, y, gamma):
    s = 0.5 * (1.0 - np.tanh(0.5 * y * (X @ w)))    # sigmoid(-margin), overflow-free
    return -(X.T @ (y * s)) + gamma * w


def ridge_logistic(X, y, gamma: float, tol: float = 1e-8, max_iter: int = 500) -> np.ndarray:
    """Damped Newton on ``sum log(1 + exp(-y w.x)) + gamma/2 |w|^2``."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.zeros(X.shape[1])
    eye = np.eye(X.shape[1])
    f = ridge_objective(w, X, y, gamma)
    gnorm = math.inf
    for _ in range(max_iter):
        g = ridge_gradient(w, X, y, gamma)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return w
        m = y * (X @ w)
        s = 0.5 * (1.0 - np.tanh(0.5 * m))
        H = (X * (s * (1.0 - s))[:, None]).T @ X + gamma * eye
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = ridge_objective(w_new, X, y, gamma)
            if f_new <= f - 1e-4 * t * (g @ step) or t < 1e-12:
                break
            t *= 0.5
        if f_new > f:
            # line search stalled: rounding floor of the objective
            g_new = ridge_gradient(w_new, X, y, gamma)
            if np.linalg.norm(g_new) < gnorm:
                w, f = w_new, f_new
            continue
        w, f = w_new, f_new
    raise NumericalError(f"ridge_logistic did not converge: final gradient norm {gnorm:.3e}")


# ---------------------------------------------------------------------------
# experiments


def identity(lam: float) -> float:
    return lam


def suppression_experiment(kappa_grid: Sequence[float], template: SpectralSpec | None = None,
                           gamma: float = 1e-2, n: int = 5000, seed: int = 0):
    """Clean- and poison-block weight norms of the ridge fit for each kappa.

    Returns a list of ``(kappa, |w_c|, |w_p|)``.
    """
    grid = [float(k) for k in kappa_grid]
    if not grid or any(k <= 0 for k in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("kappa_grid must be positive and strictly increasing")
    template = template or default_template()
    rows = []
    for k in grid:
        spec = template.at_kappa(k)
        X, y = synth_dataset(spec, n, seed)
        w = ridge_logistic(X, y, gamma)
        rows.append((k, float(np.linalg.norm(w[:spec.d_c])), float(np.linalg.norm(w[spec.d_c:]))))
    return rows


@dataclass(frozen=True)
class CertInput:
    kappa: float
    lambda_c: float
    sigma: float
    c_const: float
    psi: Callable[[float], float] = identity

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not self.c_const > 0:
            raise ValueError("c_const must be > 0")
        if not self.kappa > 0:
            raise ValueError("kappa must be > 0")


def certified_bound(inp: CertInput) -> float:
    """``Phi((C / sigma) * W(psi(lambda_c)) / kappa)``."""
    return gaussian_cdf((inp.c_const / inp.sigma) * lambert_w(inp.psi(inp.lambda_c)) / inp.kappa)


def calibrate_constant(rows, lambda_c: float, psi=identity) -> float:
    """Smallest constant making ``kappa |w_c| <= C W(psi(lambda_c))`` on every row."""
    g = lambert_w(psi(lambda_c))
    return max(k * wc for k, wc, *_ in rows) / g


def smoothed_accuracy(w, X, y, sigma: float, trials: int, seed: int = 0):
    """Accuracy of ``sign((w + noise) . x)``; returns ``(mean, standard error)``
    over the per-trial accuracies."""
    rng = np.random.default_rng(seed)
    accs = np.empty(trials)
    for t in range(trials):
        wt = w + sigma * rng.standard_normal(w.shape)
        accs[t] = np.mean(np.sign(X @ wt) == y)
    return float(accs.mean()), float(accs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0


def empirical_vs_certified(kappa_grid: Sequence[float], template: SpectralSpec | None = None,
                           gamma: float = 1e-2, sigma: float = 1.0, n: int = 5000,
                           trials: int = 200, seed: int = 0, n_test: int = 2000, psi=identity):
    """Smoothed accuracy on clean-subspace test points (poison block zeroed)
    against the calibrated bound.

    Returns ``(rows, c_const)`` with rows
    ``(kappa, |w_c|, bound, empirical, standard error)``.
    """
    if trials < 100:
        raise ValueError("trials must be >= 100")
    template = template or default_template()
    sup = suppression_experiment(kappa_grid, template, gamma, n, seed)
    lam_c = template.lambda_c
    c_const = calibrate_constant(sup, lam_c, psi)
    rows = []
    for k, wc_norm, _ in sup:
        spec = template.at_kappa(k)
        X, y = synth_dataset(spec, n, seed)
        w = ridge_logistic(X, y, gamma)
        Xt, yt = synth_dataset(spec, n_test, seed + 1)
        Xt[:, spec.d_c:] = 0.0
        emp, se = smoothed_accuracy(w, Xt, yt, sigma, trials, seed + 2)
        bound = certified_bound(CertInput(k, lam_c, sigma, c_const, psi))
        rows.append((k, wc_norm, bound, emp, se))
    return rows, c_const


def loglog_slope(kappas, norms) -> float:
    """Least-squares slope of log(norm) against log(kappa)."""
    return float(np.polyfit(np.log(kappas), np.log(norms), 1)[0])
