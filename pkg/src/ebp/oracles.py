"""Closed-form Gaussian and Student-t process marginals in weight-space form.

Both processes are written as latent-variable models with an explicit finite
feature map ``phi``, so the Gram matrix is ``K = Phi Phi^T`` and the noisy
kernel is ``K~ = K + sigma^2 I``.  The Monte Carlo checks draw the latent
variables and compare the empirical covariance of ``x`` with ``K~``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import gammaln

JITTER = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Explicit feature map plus observation noise.

    ``kind`` is ``"linear"`` (``phi(t) = scale * t``), ``"rff"`` (random
    Fourier features of an RBF kernel with ``n_features`` frequencies drawn
    from ``seed``) or ``"zero"`` (no features, pure noise).
    """

    kind: str = "linear"
    noise: float = 1.0
    scale: float = 1.0
    lengthscale: float = 1.0
    n_features: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "rff", "zero"):
            raise ValueError(f"unknown feature map {self.kind!r}")
        if not self.noise > 0:
            raise ValueError("noise must be positive")
        if self.lengthscale <= 0 or self.n_features < 1:
            raise ValueError("lengthscale and n_features must be positive")

    def features(self, t):
        """Feature matrix of shape ``(n, d_features)``."""
        t = _as_index(t)
        if self.kind == "linear":
            return self.scale * t
        if self.kind == "zero":
            return np.zeros((t.shape[0], 1))
        rng = np.random.default_rng(self.seed)
        w = rng.standard_normal((t.shape[1], self.n_features)) / self.lengthscale
        b = rng.uniform(0.0, 2.0 * np.pi, self.n_features)
        return self.scale * np.sqrt(2.0 / self.n_features) * np.cos(t @ w + b)

    def gram(self, t):
        f = self.features(t)
        return f @ f.T

    def noisy_gram(self, t):
        k = self.gram(t)
        return k + self.noise ** 2 * np.eye(k.shape[0])


@dataclass(frozen=True)
class TPSpec:
    """Student-t process: ``nu`` degrees of freedom, Gamma rate ``gamma``."""

    nu: float
    gamma: float = 1.0
    kernel: KernelSpec = KernelSpec()

    def __post_init__(self):
        if not self.nu > 2:
            raise ValueError("nu must exceed 2 for a finite covariance")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass
class MCCheck:
    """Empirical versus analytic covariance, plus optional kurtosis."""

    empirical: np.ndarray
    analytic: np.ndarray
    gap: float
    excess_kurtosis: float = float("nan")
    analytic_kurtosis: float = float("nan")

    @property
    def kurtosis_rel_err(self):
        return abs(self.excess_kurtosis - self.analytic_kurtosis) / abs(self.analytic_kurtosis)


def _as_index(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1, 1)
    elif t.ndim == 1:
        t = t[:, None]
    if t.shape[0] < 1:
        raise ValueError("need at least one index")
    return t


def _canonical(x, t):
    """Sort (t, x) pairs jointly so permuted inputs give identical arithmetic."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    t = _as_index(t)
    if t.shape[0] != x.shape[0]:
        raise ValueError(f"{t.shape[0]} indices but {x.shape[0]} values")
    keys = [x] + [t[:, j] for j in range(t.shape[1] - 1, -1, -1)]
    order = np.lexsort(keys)
    return x[order], t[order]


def _chol(k):
    k = k + JITTER * np.eye(k.shape[0])
    try:
        return linalg.cholesky(k, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("covariance is singular after jitter") from exc


def _quad_and_logdet(x, k):
    c = _chol(k)
    z = linalg.solve_triangular(c, x, lower=True)
    return float(z @ z), 2.0 * float(np.sum(np.log(np.diag(c))))


def gp_logpdf(x, t, spec):
    """Log-density of ``x ~ N(0, Phi Phi^T + sigma^2 I)``."""
    x, t = _canonical(x, t)
    n = x.shape[0]
    quad, logdet = _quad_and_logdet(x, spec.noisy_gram(t))
    return -0.5 * (quad + logdet + n * np.log(2.0 * np.pi))


def tp_logpdf(x, t, spec):
    """Log-density of the Student-t process with covariance ``K~``.

    The scale matrix is ``(nu - 2) / nu * K~`` so that ``K~`` is the
    covariance for every ``nu > 2``.
    """
    x, t = _canonical(x, t)
    n = x.shape[0]
    nu = float(spec.nu)
    quad, logdet = _quad_and_logdet(x, spec.kernel.noisy_gram(t))
    return float(gammaln(0.5 * (nu + n)) - gammaln(0.5 * nu)
                 - 0.5 * n * np.log((nu - 2.0) * np.pi) - 0.5 * logdet
                 - 0.5 * (nu + n) * np.log1p(quad / (nu - 2.0)))


def psd_check(k, tol=1e-10):
    """True when ``k`` is symmetric and its smallest eigenvalue is ``>= -tol``."""
    k = np.asarray(k)
    return bool(np.allclose(k, k.T, atol=tol, rtol=0)
                and np.linalg.eigvalsh(0.5 * (k + k.T)).min() >= -tol)


def _frob_gap(emp, ref):
    return float(np.linalg.norm(emp - ref) / np.linalg.norm(ref))


def _excess_kurtosis(x):
    c = x - x.mean()
    m2 = np.mean(c * c)
    return float(np.mean(c ** 4) / m2 ** 2 - 3.0)


def _latent_gaussian(t, kernel, samples, rng):
    f = kernel.features(t)
    alpha = rng.standard_normal((samples, f.shape[1]))
    eps = rng.standard_normal((samples, f.shape[0]))
    return alpha @ f.T + kernel.noise * eps


def gp_latent_mc_check(t, spec, samples=100_000, seed=0):
    """Sample ``alpha ~ N(0, I)``, ``x | alpha ~ N(Phi alpha, sigma^2 I)``; compare covariances."""
    rng = np.random.default_rng(seed)
    x = _latent_gaussian(t, spec, samples, rng)
    emp = x.T @ x / samples   # mean is known to be zero
    ref = spec.noisy_gram(t)
    return MCCheck(emp, ref, _frob_gap(emp, ref))


def tp_latent_mc_check(t, spec, samples=1_000_000, seed=0, fixed_beta=False):
    """Sample the scale-mixture construction and compare with the Student-t process.

    The precision ``1/beta`` is ``Gamma(nu/2, rate gamma/2)``; given ``beta``
    the values are Gaussian with covariance ``beta (nu - 2) / gamma * K~``.
    With ``fixed_beta`` the mixture collapses to ``beta = E[beta]``.
    Kurtosis is reported for the first coordinate.
    """
    rng = np.random.default_rng(seed)
    nu, gamma = float(spec.nu), float(spec.gamma)
    g = _latent_gaussian(t, spec.kernel, samples, rng)
    if fixed_beta:
        beta = np.full(samples, gamma / (nu - 2.0))
    else:
        beta = 1.0 / rng.gamma(0.5 * nu, 2.0 / gamma, samples)
    x = np.sqrt(beta * (nu - 2.0) / gamma)[:, None] * g
    emp = x.T @ x / samples
    ref = spec.kernel.noisy_gram(t)
    kurt = 6.0 / (nu - 4.0) if nu > 4 else float("nan")
    return MCCheck(emp, ref, _frob_gap(emp, ref), _excess_kurtosis(x[:, 0]), kurt)
