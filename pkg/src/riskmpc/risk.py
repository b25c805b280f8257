"""Law-invariant risk measures: Gaussian closed forms and sample estimators.

Four measures are supported, all at tail mass ``alpha`` (confidence
``1 - alpha``): expectation, value-at-risk, conditional value-at-risk and
entropic value-at-risk. For a Gaussian ``Y ~ N(mu, sigma^2)`` each one
reduces to ``mu + sigma * R(alpha)`` with a measure-specific coefficient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp, ndtri

from .errors import EmptySamples, EVaRSearchFailure

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

EVAR_Z_MIN = 1e-6
EVAR_Z_CAP = 1e6


class RiskKind(str, enum.Enum):
    EXPECTATION = "expectation"
    VAR = "var"
    CVAR = "cvar"
    EVAR = "evar"

    @classmethod
    def parse(cls, text: str | "RiskKind") -> "RiskKind":
        if isinstance(text, RiskKind):
            return text
        key = text.strip().lower()
        aliases = {"e": "expectation", "mean": "expectation", "exp": "expectation"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class RiskSpec:
    kind: RiskKind
    alpha: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "kind", RiskKind.parse(self.kind))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def label(self) -> str:
        if self.kind is RiskKind.EXPECTATION:
            return "E"
        return f"{self.kind.name}_{1 - self.alpha:.3g}"


@dataclass(frozen=True)
class GaussianScalar:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise ValueError("sigma must be nonnegative")


def normal_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def risk_coefficient(spec: RiskSpec) -> float:
    """Coefficient ``R(alpha)`` such that ``rho(Y) = mu + sigma * R(alpha)``."""
    a = spec.alpha
    if spec.kind is RiskKind.EXPECTATION:
        return 0.0
    if spec.kind is RiskKind.VAR:
        return float(ndtri(1.0 - a))
    if spec.kind is RiskKind.CVAR:
        return normal_pdf(float(ndtri(1.0 - a))) / a
    return math.sqrt(-2.0 * math.log(a))


def gaussian_risk(spec: RiskSpec, y: GaussianScalar) -> float:
    return y.mu + y.sigma * risk_coefficient(spec)


def _as_samples(samples: ArrayLike) -> NDArray:
    s = np.asarray(samples, dtype=float)
    if s.ndim == 0:
        s = s.reshape(1)
    if s.shape[-1] == 0:
        raise EmptySamples("risk estimate needs at least one sample")
    return s


def _var_index(n: int, alpha: float) -> int:
    # 0-based order statistic: smallest i with (i+1)/n >= 1 - alpha.
    i = math.ceil(n * (1.0 - alpha) - 1e-9) - 1
    return min(max(i, 0), n - 1)


def empirical_var(samples: NDArray, alpha: float) -> NDArray:
    n = samples.shape[-1]
    i = _var_index(n, alpha)
    return np.partition(samples, i, axis=-1)[..., i]


def empirical_cvar(samples: NDArray, alpha: float) -> NDArray:
    t = empirical_var(samples, alpha)
    excess = np.maximum(samples - t[..., None], 0.0)
    return t + excess.mean(axis=-1) / alpha


def _evar_objective(samples: NDArray, z: NDArray, alpha: float) -> NDArray:
    # z^{-1} ln(M(z)/alpha) evaluated with log-sum-exp; z has the batch shape.
    n = samples.shape[-1]
    lme = logsumexp(z[..., None] * samples, axis=-1) - math.log(n)
    return (lme - math.log(alpha)) / z


def empirical_evar(samples: NDArray, alpha: float, z_hint: NDArray | None = None,
                   tol: float = 1e-7) -> NDArray:
    """Entropic VaR of the empirical law, minimized over ``z`` by golden section.

    The search runs in ``log z`` on ``[1e-6, z_max]`` where ``z_max`` doubles
    until the objective increases (cap ``1e6``). When ``z_hint`` is given
    (e.g. the optimum of a parent sample) the initial bracket is centred on
    it. If the objective keeps decreasing up to the cap the infimum is the
    sample maximum, which is returned.
    """
    if not np.all(np.isfinite(samples)):
        raise EVaRSearchFailure("samples contain non-finite values")
    batch = samples.shape[:-1]
    smax = samples.max(axis=-1)
    if z_hint is None:
        spread = samples.std(axis=-1)
        z0 = np.where(spread > 0, 1.0 / np.where(spread > 0, spread, 1.0), 1.0)
        lo = np.full(batch, math.log(EVAR_Z_MIN))
    else:
        z0 = np.broadcast_to(np.asarray(z_hint, dtype=float), batch)
        lo = np.maximum(np.log(z0) - math.log(8.0), math.log(EVAR_Z_MIN))
    hi = np.minimum(np.log(np.maximum(z0, EVAR_Z_MIN)) + math.log(2.0), math.log(EVAR_Z_CAP))
    f_hi = _evar_objective(samples, np.exp(hi), alpha)
    f_prev = _evar_objective(samples, np.exp(hi - math.log(2.0)), alpha)
    growing = f_hi <= f_prev
    capped = np.zeros(batch, dtype=bool)
    while np.any(growing):
        at_cap = growing & (hi >= math.log(EVAR_Z_CAP) - 1e-12)
        capped |= at_cap
        growing &= ~at_cap
        if not np.any(growing):
            break
        hi = np.where(growing, np.minimum(hi + math.log(2.0), math.log(EVAR_Z_CAP)), hi)
        f_prev = np.where(growing, f_hi, f_prev)
        f_new = _evar_objective(samples, np.exp(hi), alpha)
        f_hi = np.where(growing, f_new, f_hi)
        growing &= f_hi <= f_prev
    if not np.all(np.isfinite(f_hi)):
        raise EVaRSearchFailure("moment generating function is not finite on the bracket")

    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = _evar_objective(samples, np.exp(c), alpha)
    fd = _evar_objective(samples, np.exp(d), alpha)
    while np.max(b - a) > tol:
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _GOLDEN * (b - a)
        new_d = a + _GOLDEN * (b - a)
        # Reuse the surviving interior point; only one fresh evaluation per side.
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fresh = np.where(left, c_next, d_next)
        f_fresh = _evar_objective(samples, np.exp(fresh), alpha)
        fc, fd = np.where(left, f_fresh, fd), np.where(left, fc, f_fresh)
        c, d = c_next, d_next
    u = 0.5 * (a + b)
    value = np.minimum(np.minimum(fc, fd), _evar_objective(samples, np.exp(u), alpha))
    if not np.all(np.isfinite(value)):
        raise EVaRSearchFailure("EVaR objective is not finite at the minimizer")
    return np.where(capped, np.minimum(value, smax), value)


def evar_minimizer(samples: NDArray, alpha: float) -> NDArray:
    """Approximate optimal ``z`` for each row, used to seed bootstrap searches."""
    grid = np.exp(np.linspace(math.log(EVAR_Z_MIN), math.log(EVAR_Z_CAP), 121))
    vals = np.stack([_evar_objective(samples, np.full(samples.shape[:-1], g), alpha) for g in grid])
    return grid[np.argmin(vals, axis=0)]


def empirical_risk(spec: RiskSpec, samples: ArrayLike) -> float | NDArray:
    """Plug-in estimate of ``rho(Y)`` from samples along the last axis.

    Expectation is the sample mean; VaR the smallest order statistic whose
    empirical CDF reaches ``1 - alpha``; CVaR uses ``t + E[(Y - t)_+]/alpha``
    with ``t`` the empirical VaR; EVaR minimizes the empirical
    moment-generating-function bound over ``z > 0``.
    """
    s = _as_samples(samples)
    if spec.kind is RiskKind.EXPECTATION:
        out = s.mean(axis=-1)
    elif spec.kind is RiskKind.VAR:
        out = empirical_var(s, spec.alpha)
    elif spec.kind is RiskKind.CVAR:
        out = empirical_cvar(s, spec.alpha)
    else:
        out = empirical_evar(s, spec.alpha)
    return float(out) if np.ndim(out) == 0 else out


def bootstrap_se(spec: RiskSpec, samples: ArrayLike, rng: np.random.Generator,
                 resamples: int = 200, chunk: int = 50) -> float:
    """Bootstrap standard error of :func:`empirical_risk`."""
    s = _as_samples(samples).ravel()
    n = s.size
    if n == 1 or np.ptp(s) == 0.0:
        return 0.0
    hint = None
    if spec.kind is RiskKind.EVAR:
        hint = evar_minimizer(s, spec.alpha)
    stats = []
    for start in range(0, resamples, chunk):
        m = min(chunk, resamples - start)
        idx = rng.integers(0, n, size=(m, n))
        rows = s[idx]
        if spec.kind is RiskKind.EVAR:
            stats.append(empirical_evar(rows, spec.alpha, z_hint=hint, tol=1e-5))
        else:
            stats.append(np.atleast_1d(empirical_risk(spec, rows)))
    return float(np.std(np.concatenate(stats), ddof=1))


def translativity_check(spec: RiskSpec, samples: ArrayLike, c: float) -> bool:
    s = _as_samples(samples)
    shifted = empirical_risk(spec, s + c)
    base = empirical_risk(spec, s)
    return bool(abs(shifted - base - c) <= 1e-9 * (1.0 + abs(c)))
