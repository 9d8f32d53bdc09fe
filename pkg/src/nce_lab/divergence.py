"""Convex generators that define the contrastive objectives.

Each generator is a strictly convex function f on (0, inf). The estimator
contrasts data against auxiliary draws through the density ratio r = p / n,
and everything downstream is driven by three faces of f:

* the objective terms ``-mean f'(r_data) + mean (r f'(r) - f(r))_noise``,
  expressed here directly in terms of t = log r so that ratios spanning
  hundreds of orders of magnitude never overflow;
* the scalar weight ``psi(r) = f''(r) * r`` that multiplies the model score
  in the estimating equation and in the variance formulas;
* a robustness flag: the fit is resistant to gross outliers only when f''
  stays bounded as r -> 0+.

Log ratios are clamped at +-700 before exponentiation; objective terms that
still overflow (the chi-square generator squares the ratio) are left to the
caller to detect and report.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

LOG_RATIO_CLAMP = 700.0


def _checked_positive(x):
    arr = np.asarray(x, dtype=float)
    if arr.size and (np.any(~np.isfinite(arr)) or np.any(arr <= 0.0)):
        raise DomainError("generator argument must be positive and finite")
    return arr


def _clamped_exp(z):
    return np.exp(np.clip(z, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def _softplus(z):
    # log(1 + exp(z)) without overflow in either tail
    return np.logaddexp(0.0, z)


class Divergence:
    """Base class; concrete generators fill in f, f'', and log psi."""

    name: str = ""

    def f(self, x):
        raise NotImplementedError

    def fpp(self, x):
        raise NotImplementedError

    def log_psi(self, t):
        """log of psi(r) = f''(r) r evaluated at t = log r."""
        raise NotImplementedError

    def loss_terms(self, t):
        """Data-term and noise-term integrands of the objective at t = log r.

        Returns the pair (a, b) such that the objective is
        ``-mean(a(t_data)) + mean(b(t_noise))``. The terms follow the usual
        closed forms for each generator, fixed up to affine shifts of f that
        do not move the minimizer.
        """
        raise NotImplementedError

    def psi(self, r):
        """Estimating-equation weight f''(r) * r; strictly positive."""
        r = _checked_positive(r)
        out = np.exp(np.clip(self.log_psi(np.log(r)), -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
        return float(out) if out.ndim == 0 else out

    def weights(self, t):
        """(psi, psi * r) at t = log r, saturating instead of overflowing."""
        lp = self.log_psi(t)
        return _clamped_exp(lp), _clamped_exp(lp + t)

    def is_robust(self, bound: float) -> bool:
        """True when sup of f'' on (0, bound] is finite."""
        if not bound > 0.0:
            raise DomainError("bound must be positive")
        return self._fpp_bounded_near_zero()

    def _fpp_bounded_near_zero(self) -> bool:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class KL(Divergence):
    """f(x) = x log x; psi is identically one."""

    name = "kl"

    def f(self, x):
        x = _checked_positive(x)
        return x * np.log(x)

    def fpp(self, x):
        x = _checked_positive(x)
        return 1.0 / x

    def log_psi(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def loss_terms(self, t):
        # -mean(log r) + mean(r), the importance-sampling form
        return np.asarray(t, dtype=float), _clamped_exp(t)

    def _fpp_bounded_near_zero(self) -> bool:
        return False


class ChiSquare(Divergence):
    """f(x) = 0.5 x^2; constant f'' makes the fit outlier-resistant."""

    name = "chi2"

    def f(self, x):
        x = _checked_positive(x)
        return 0.5 * x * x

    def fpp(self, x):
        x = _checked_positive(x)
        return np.ones_like(x)

    def log_psi(self, t):
        return np.asarray(t, dtype=float)

    def loss_terms(self, t):
        r = _clamped_exp(t)
        # squaring may overflow to inf for log-ratios beyond ~354; callers
        # convert that into a NonFiniteObjective instead of crashing
        with np.errstate(over="ignore"):
            return r, 0.5 * r * r

    def _fpp_bounded_near_zero(self) -> bool:
        return True


class JensenShannon(Divergence):
    """f(x) = x log x - (1 + x) log(1 + x), the symmetric logistic generator."""

    name = "js"

    def f(self, x):
        x = _checked_positive(x)
        return x * np.log(x) - (1.0 + x) * np.log1p(x)

    def fpp(self, x):
        x = _checked_positive(x)
        return 1.0 / (x * (1.0 + x))

    def log_psi(self, t):
        return -_softplus(np.asarray(t, dtype=float))

    def loss_terms(self, t):
        t = np.asarray(t, dtype=float)
        return -_softplus(-t), _softplus(t)

    def _fpp_bounded_near_zero(self) -> bool:
        return False


class OptimalJS(Divergence):
    """Ratio-matched logistic generator, f(x) = x log x - (1/nu + x) log(1 + nu x).

    With nu equal to the data-to-noise sample ratio m1/m2 this generator
    minimizes the asymptotic variance of the fixed-auxiliary estimator; at
    nu = 1 it coincides with :class:`JensenShannon`, and as nu -> 0 it
    degenerates to the KL generator.
    """

    name = "ojs"

    def __init__(self, nu: float):
        if not (np.isfinite(nu) and nu > 0.0):
            raise DomainError("nu must be a positive finite ratio")
        self.nu = float(nu)

    def f(self, x):
        x = _checked_positive(x)
        nu = self.nu
        return x * np.log(x) - (1.0 / nu + x) * np.log1p(nu * x)

    def fpp(self, x):
        x = _checked_positive(x)
        return 1.0 / (x * (1.0 + self.nu * x))

    def log_psi(self, t):
        return -_softplus(np.asarray(t, dtype=float) + math.log(self.nu))

    def loss_terms(self, t):
        t = np.asarray(t, dtype=float)
        shifted = _softplus(t + math.log(self.nu))
        return t - shifted, shifted / self.nu

    def _fpp_bounded_near_zero(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"OptimalJS(nu={self.nu!r})"


class DensityPower(Divergence):
    """f(x) = x^(beta+1) / (beta+1); robust for beta >= 1, equals chi-square at beta = 1."""

    name = "dpow"

    def __init__(self, beta: float):
        if not (np.isfinite(beta) and beta > 0.0):
            raise DomainError("beta must be a positive finite exponent")
        self.beta = float(beta)

    def f(self, x):
        x = _checked_positive(x)
        b = self.beta
        return x ** (b + 1.0) / (b + 1.0)

    def fpp(self, x):
        x = _checked_positive(x)
        b = self.beta
        return b * x ** (b - 1.0)

    def log_psi(self, t):
        return math.log(self.beta) + self.beta * np.asarray(t, dtype=float)

    def loss_terms(self, t):
        b = self.beta
        r = _clamped_exp(t)
        with np.errstate(over="ignore"):
            return r**b, (b / (b + 1.0)) * r ** (b + 1.0)

    def _fpp_bounded_near_zero(self) -> bool:
        return self.beta >= 1.0

    def __repr__(self) -> str:
        return f"DensityPower(beta={self.beta!r})"


def parse_divergence(name: str, nu: float | None = None) -> Divergence:
    """Build a generator from its CLI/config name.

    Recognized names: ``kl``, ``chi2``, ``js``, ``ojs`` (requires the sample
    ratio ``nu`` = m1/m2), and ``dpow:<beta>``.
    """
    token = name.strip().lower()
    if token == "kl":
        return KL()
    if token in ("chi2", "chi"):
        return ChiSquare()
    if token == "js":
        return JensenShannon()
    if token == "ojs":
        if nu is None:
            raise ValueError("divergence 'ojs' needs the sample ratio nu = m1/m2")
        return OptimalJS(nu)
    if token.startswith("dpow:"):
        return DensityPower(float(token.split(":", 1)[1]))
    raise ValueError(f"unknown divergence name {name!r}")
