"""Survival-function discount models.

A discount function doubles as the survival function ``S(t) = P(T > t)`` of a
random termination time.  Two families are supported:

* exponential, ``S(t) = exp(-lam * t)`` with constant hazard ``lam``;
* hyperbolic, ``S(t) = (t / beta0 + 1) ** -alpha0``, the expected survival
  when a constant hazard has a ``Gamma(alpha0, beta0)`` (shape, rate) prior.
  Its hazard is the posterior mean ``alpha0 / (beta0 + t)``.

A hyperbolic model may carry an ``anneal_offset`` that is added to ``alpha0``
wherever the shape enters (hazard and survival).  Training uses it to move
from short- to far-sighted discounting; simulation always uses offset 0.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, roots_genlaguerre

EXPONENTIAL = "exponential"
HYPERBOLIC = "hyperbolic"


class QuadratureError(RuntimeError):
    """Raised when a quadrature error estimate exceeds its tolerance."""


class Verdict(str, enum.Enum):
    WELL_DEFINED = "well_defined"
    DIVERGENT = "divergent"
    UNKNOWN = "unknown"


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("time must be nonnegative")
    return t


def _maybe_scalar(a):
    return float(a) if np.ndim(a) == 0 else a


@dataclass(frozen=True)
class DiscountModel:
    """Immutable discount model; build with :meth:`exponential` or :meth:`hyperbolic`."""

    kind: str
    rate: float = float("nan")
    alpha0: float = float("nan")
    beta0: float = float("nan")
    anneal_offset: float = 0.0

    def __post_init__(self):
        if self.kind == EXPONENTIAL:
            if not self.rate > 0:
                raise ValueError(f"exponential rate must be > 0, got {self.rate}")
        elif self.kind == HYPERBOLIC:
            if not (self.alpha0 > 0 and self.beta0 > 0):
                raise ValueError(
                    f"hyperbolic alpha0 and beta0 must be > 0, got {self.alpha0}, {self.beta0}"
                )
        else:
            raise ValueError(f"unknown discount kind {self.kind!r}")
        if not self.anneal_offset >= 0:
            raise ValueError("anneal_offset must be nonnegative")

    @classmethod
    def exponential(cls, rate: float) -> "DiscountModel":
        return cls(EXPONENTIAL, rate=float(rate))

    @classmethod
    def hyperbolic(cls, alpha0: float, beta0: float, anneal_offset: float = 0.0) -> "DiscountModel":
        return cls(HYPERBOLIC, alpha0=float(alpha0), beta0=float(beta0),
                   anneal_offset=float(anneal_offset))

    @property
    def is_hyperbolic(self) -> bool:
        return self.kind == HYPERBOLIC

    @property
    def shape(self) -> float:
        """Effective hyperbolic shape, ``alpha0 + anneal_offset``."""
        return self.alpha0 + self.anneal_offset

    @property
    def theta(self) -> np.ndarray:
        """Parameter vector: ``[alpha0, beta0]`` or ``[rate]``."""
        if self.is_hyperbolic:
            return np.array([self.alpha0, self.beta0])
        return np.array([self.rate])

    def with_theta(self, theta) -> "DiscountModel":
        theta = np.asarray(theta, dtype=float)
        if self.is_hyperbolic:
            return replace(self, alpha0=float(theta[0]), beta0=float(theta[1]))
        return replace(self, rate=float(theta[0]))

    def with_offset(self, offset: float) -> "DiscountModel":
        if not self.is_hyperbolic:
            return self
        return replace(self, anneal_offset=float(offset))

    def survival(self, t):
        t = _check_time(t)
        if self.is_hyperbolic:
            s = (t / self.beta0 + 1.0) ** (-self.shape)
        else:
            s = np.exp(-self.rate * t)
        return _maybe_scalar(s)

    def log_survival(self, t):
        t = _check_time(t)
        if self.is_hyperbolic:
            out = -self.shape * np.log1p(t / self.beta0)
        else:
            out = -self.rate * t
        return _maybe_scalar(out)

    def hazard(self, t):
        t = _check_time(t)
        if self.is_hyperbolic:
            h = self.shape / (self.beta0 + t)
        else:
            h = np.full_like(t, self.rate)
        return _maybe_scalar(h)

    def hazard_theta_grad(self, t) -> np.ndarray:
        """Partial derivatives of the hazard w.r.t. ``theta``; shape ``t.shape + (dim_theta,)``."""
        t = _check_time(t)
        if self.is_hyperbolic:
            b = self.beta0 + t
            return np.stack([1.0 / b, -self.shape / b**2], axis=-1)
        return np.ones(t.shape + (1,))

    def conditional_survival(self, t0, t1):
        """``P(T > t1 | T > t0) = S(t1) / S(t0)``."""
        t0 = _check_time(t0)
        t1 = _check_time(t1)
        if np.any(t1 < t0):
            raise ValueError("conditional_survival needs t0 <= t1")
        return _maybe_scalar(np.exp(self.log_survival(t1) - self.log_survival(t0)))

    def inverse_survival(self, p):
        """Time ``t`` with ``S(t) = p`` for ``p`` in ``(0, 1]``."""
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0) or np.any(p > 1):
            raise ValueError("survival probability must lie in (0, 1]")
        if self.is_hyperbolic:
            t = self.beta0 * (p ** (-1.0 / self.shape) - 1.0)
        else:
            t = -np.log(p) / self.rate
        return _maybe_scalar(t)

    def sample_termination(self, rng: np.random.Generator, size=None):
        """Draw termination times by exact inversion of the CCDF."""
        u = rng.uniform(size=size)
        return self.termination_from_uniform(u)

    def termination_from_uniform(self, u):
        return self.inverse_survival(1.0 - np.asarray(u, dtype=float))

    def tail_integral(self, t):
        """``int_t^inf S(tau) / S(t) dtau``; infinite when the hyperbolic shape is <= 1."""
        t = _check_time(t)
        if self.is_hyperbolic:
            if self.shape <= 1:
                return _maybe_scalar(np.full_like(t, np.inf))
            out = (self.beta0 + t) / (self.shape - 1.0)
        else:
            out = np.full_like(t, 1.0 / self.rate)
        return _maybe_scalar(out)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        if self.is_hyperbolic:
            d = {"kind": HYPERBOLIC, "alpha0": self.alpha0, "beta0": self.beta0}
            if self.anneal_offset:
                d["anneal_offset"] = self.anneal_offset
            return d
        return {"kind": EXPONENTIAL, "lambda": self.rate}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscountModel":
        kind = d.get("kind")
        if kind == HYPERBOLIC:
            return cls.hyperbolic(d["alpha0"], d["beta0"], d.get("anneal_offset", 0.0))
        if kind == EXPONENTIAL:
            return cls.exponential(d["lambda"])
        raise ValueError(f"unknown discount kind {kind!r}")

    @classmethod
    def parse(cls, text: str) -> "DiscountModel":
        """Parse ``"hyperbolic:3,1"`` or ``"exponential:0.2"``."""
        kind, _, args = text.partition(":")
        try:
            values = [float(v) for v in args.split(",") if v.strip()]
        except ValueError as exc:
            raise ValueError(f"bad discount spec {text!r}") from exc
        kind = kind.strip().lower()
        if kind in ("hyperbolic", "hyp") and len(values) == 2:
            return cls.hyperbolic(*values)
        if kind in ("exponential", "exp") and len(values) == 1:
            return cls.exponential(values[0])
        raise ValueError(f"bad discount spec {text!r}")

    def __str__(self):
        if self.is_hyperbolic:
            return f"hyperbolic:{self.alpha0:g},{self.beta0:g}"
        return f"exponential:{self.rate:g}"


def check_well_defined(model: DiscountModel, reward_upper_bound: float) -> Verdict:
    """Whether the infinite-horizon value is finite for rewards bounded above.

    Hyperbolic discounting needs ``alpha0 > 1``; for ``alpha0 <= 1`` the
    integral of ``S`` diverges.  The offset is ignored since it is a training
    device, not part of the objective.
    """
    if model.kind == EXPONENTIAL:
        return Verdict.WELL_DEFINED if math.isfinite(reward_upper_bound) else Verdict.UNKNOWN
    if model.alpha0 <= 1:
        return Verdict.DIVERGENT
    if math.isfinite(reward_upper_bound):
        return Verdict.WELL_DEFINED
    return Verdict.UNKNOWN


def truncated_survival_integral(model: DiscountModel, horizon: float) -> float:
    """``int_0^horizon S(t) dt`` in closed form (offset included)."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if model.kind == EXPONENTIAL:
        return -math.expm1(-model.rate * horizon) / model.rate
    a, b = model.shape, model.beta0
    if a == 1.0:
        return b * math.log1p(horizon / b)
    return b / (a - 1.0) * (1.0 - (1.0 + horizon / b) ** (1.0 - a))


def gamma_mixture_survival(alpha0: float, beta0: float, t, n_quad: int = 128,
                           tol: float | None = 1e-6):
    """Expected exponential survival under a ``Gamma(alpha0, beta0)`` hazard prior.

    Integrates ``exp(-lam t)`` against the Gamma density numerically with a
    generalized Gauss-Laguerre rule after the substitution ``u = beta0 * lam``.
    The error is estimated against a rule with twice the nodes; if that
    estimate exceeds ``tol`` a :class:`QuadratureError` is raised.
    """
    if not (alpha0 > 0 and beta0 > 0):
        raise ValueError("alpha0 and beta0 must be > 0")
    if n_quad < 32:
        raise QuadratureError(f"n_quad={n_quad} is below the minimum of 32 nodes")
    t = _check_time(t)

    def rule(n):
        u, w = roots_genlaguerre(n, alpha0 - 1.0)
        vals = np.exp(-np.multiply.outer(t, u) / beta0) @ w
        return vals / np.exp(gammaln(alpha0))

    s = rule(n_quad)
    if tol is not None:
        err = np.max(np.abs(s - rule(2 * n_quad)))
        if err > tol:
            raise QuadratureError(
                f"estimated quadrature error {err:.3g} exceeds tol {tol:g} with {n_quad} nodes"
            )
    return _maybe_scalar(s)
