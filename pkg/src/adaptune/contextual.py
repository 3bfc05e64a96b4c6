"""Contextual linear Thompson sampling over standardized features.

Each arm keeps single-pass co-moments of the joint vector ``z = [x, r]``
(features followed by the reward). Means, variances and correlations for
standardization come straight out of those co-moments, so the model is
refit from scratch each round in ``O(F^3)`` without storing observations.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .policies import EXPLORE

log = logging.getLogger(__name__)

__all__ = [
    "ModelError",
    "ContextualThompson",
    "CoMomentState",
    "LinearModel",
    "ctx_update",
    "ctx_merge",
    "standardize",
    "fit_model",
    "ctx_sample_expected_reward",
    "ctx_choose",
    "min_observations",
]

DEFAULT_LAMBDA = 1.0
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class ModelError(ArithmeticError):
    """Raised when a model cannot be fit or sampled even with jitter."""


@dataclass(frozen=True)
class ContextualThompson:
    features: int
    lam: float = DEFAULT_LAMBDA
    name = "contextual"

    def __post_init__(self):
        if self.features < 1:
            raise ValueError("contextual policy needs at least one feature")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


def min_observations(features: int) -> int:
    """Observations an arm needs before its model is trusted."""
    return features + 2


_CTX_HEADER = struct.Struct("<II")


@dataclass(frozen=True, eq=False)
class CoMomentState:
    """Co-moment statistics of ``[x, r]``; arrays carry an optional arm axis.

    ``n`` has shape ``batch``, ``mean`` ``batch + (F+1,)`` and ``com``
    ``batch + (F+1, F+1)``. The last coordinate is the reward.
    """

    n: np.ndarray
    mean: np.ndarray
    com: np.ndarray

    @classmethod
    def empty(cls, features: int, arms: int | None = None) -> "CoMomentState":
        if features < 1:
            raise ValueError("need at least one feature")
        batch = () if arms is None else (arms,)
        d = features + 1
        return cls(np.zeros(batch, dtype=np.int64), np.zeros(batch + (d,)), np.zeros(batch + (d, d)))

    @property
    def features(self) -> int:
        return self.mean.shape[-1] - 1

    @property
    def arms(self) -> int:
        return self.n.shape[0]

    @property
    def mu_x(self):
        return self.mean[..., :-1]

    @property
    def mu_r(self):
        return self.mean[..., -1]

    @property
    def C_xx(self):
        return self.com[..., :-1, :-1]

    @property
    def C_xr(self):
        return self.com[..., :-1, -1]

    @property
    def m2_r(self):
        return self.com[..., -1, -1]

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def __getitem__(self, arm: int) -> "CoMomentState":
        return CoMomentState(self.n[arm], self.mean[arm], self.com[arm])

    def observe(self, arm: int, x, r: float) -> "CoMomentState":
        s = ctx_update(self[arm], x, r)
        n, mean, com = self.n.copy(), self.mean.copy(), self.com.copy()
        n[arm], mean[arm], com[arm] = s.n, s.mean, s.com
        return CoMomentState(n, mean, com)

    def merge(self, other: "CoMomentState") -> "CoMomentState":
        return ctx_merge(self, other)

    def masked(self, keep) -> "CoMomentState":
        keep = np.asarray(keep, dtype=bool)
        return CoMomentState(
            np.where(keep, self.n, 0),
            np.where(keep[..., None], self.mean, 0.0),
            np.where(keep[..., None, None], self.com, 0.0),
        )

    def empty_like(self) -> "CoMomentState":
        return CoMomentState(np.zeros_like(self.n), np.zeros_like(self.mean), np.zeros_like(self.com))

    def equals(self, other: "CoMomentState") -> bool:
        return (
            np.array_equal(self.n, other.n)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.com, other.com)
        )

    def correlation(self) -> np.ndarray:
        """Correlation matrix of ``[x, r]``; zero-variance coordinates get zero rows."""
        d = np.sqrt(np.clip(np.diagonal(self.com, axis1=-2, axis2=-1), 0.0, None))
        denom = d[..., :, None] * d[..., None, :]
        return np.divide(self.com, denom, out=np.zeros_like(self.com), where=denom > 0)

    def to_bytes(self) -> bytes:
        """Flat layout: arms, F, then per arm n, mu_x, C_xx (row-major), mu_r, m2_r, C_xr."""
        if self.n.ndim != 1:
            raise ValueError("serialize the per-arm stack, not a single arm")
        f = self.features
        parts = [_CTX_HEADER.pack(self.arms, f)]
        for a in range(self.arms):
            parts.append(struct.pack("<Q", int(self.n[a])))
            body = np.concatenate(
                [
                    self.mu_x[a],
                    self.C_xx[a].ravel(),
                    [self.mu_r[a], self.m2_r[a]],
                    self.C_xr[a],
                ]
            )
            parts.append(body.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "CoMomentState":
        arms, f = _CTX_HEADER.unpack_from(payload, 0)
        width = f + f * f + 2 + f
        rec = 8 + 8 * width
        if len(payload) != _CTX_HEADER.size + arms * rec:
            raise ValueError("payload length does not match header")
        state = cls.empty(f, arms)
        n, mean, com = state.n, state.mean, state.com
        off = _CTX_HEADER.size
        for a in range(arms):
            (n[a],) = struct.unpack_from("<Q", payload, off)
            body = np.frombuffer(payload, dtype="<f8", count=width, offset=off + 8)
            mean[a, :f] = body[:f]
            com[a, :f, :f] = body[f : f + f * f].reshape(f, f)
            mean[a, f] = body[f + f * f]
            com[a, f, f] = body[f + f * f + 1]
            com[a, :f, f] = com[a, f, :f] = body[f + f * f + 2 :]
            off += rec
        return state

    def __repr__(self) -> str:
        return f"CoMomentState(F={self.features}, n={np.asarray(self.n).tolist()})"


def ctx_update(s: CoMomentState, x, r: float) -> CoMomentState:
    x = np.asarray(x, dtype=float)
    if x.shape != (s.features,):
        raise ValueError(f"context has shape {x.shape}, tuner expects ({s.features},)")
    z = np.append(x, float(r))
    if not np.isfinite(z).all():
        raise ValueError("context and reward must be finite")
    n = s.n + 1
    d = z - s.mean
    mean = s.mean + d / n
    com = s.com + np.multiply.outer(d, d) * ((n - 1) / n)
    return CoMomentState(np.asarray(n), mean, com)


def ctx_merge(a: CoMomentState, b: CoMomentState) -> CoMomentState:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"shape mismatch {a.mean.shape} vs {b.mean.shape}")
    n = a.n + b.n
    frac = b.n / np.maximum(n, 1)
    delta = b.mean - a.mean
    mean = delta * frac[..., None]
    mean += a.mean
    # sqrt(na*nb/n) scaling lets one outer product carry the cross term
    d = delta * np.sqrt(a.n * frac)[..., None]
    com = d[..., :, None] * d[..., None, :]
    com += a.com
    com += b.com
    return CoMomentState(n, mean, com)


def _feature_sd(s: CoMomentState):
    dof = np.maximum(s.n - 1, 1)[..., None]
    return np.sqrt(np.clip(np.diagonal(s.C_xx, axis1=-2, axis2=-1), 0.0, None) / dof)


def standardize(x, s: CoMomentState) -> np.ndarray:
    if np.any(s.n < 2):
        raise ValueError("standardization needs n >= 2")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != s.features:
        raise ValueError("context dimension mismatch")
    sd = _feature_sd(s)
    return np.divide(x - s.mu_x, sd, out=np.zeros(np.broadcast(x, sd).shape), where=sd > 0)


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Ridge fit in standardized space; ``P`` is the parameter covariance before dividing by n."""

    w: np.ndarray
    P: np.ndarray
    lam: float


def _fit(s: CoMomentState, lam: float):
    corr = s.correlation()
    f = s.features
    r_xx = corr[..., :f, :f]
    r_xr = corr[..., :f, f]
    nn = np.maximum(np.asarray(s.n, dtype=float), 1.0)
    system = r_xx + (lam / nn)[..., None, None] * np.eye(f)
    try:
        P = np.linalg.inv(system)
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"singular system at lambda={lam}") from exc
    w = np.einsum("...ij,...j->...i", P, r_xr)
    if not (np.isfinite(w).all() and np.isfinite(P).all()):
        raise ModelError(f"non-finite fit at lambda={lam}")
    return w, P


def fit_model(s: CoMomentState, lam: float = DEFAULT_LAMBDA) -> LinearModel:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if np.any(s.n < 2):
        raise ValueError("fitting needs n >= 2")
    w, P = _fit(s, lam)
    return LinearModel(w, P, lam)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    eye = np.eye(cov.shape[-1])
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise ModelError("parameter covariance is not positive definite even with jitter")


def _reward_sd(s: CoMomentState):
    return np.sqrt(np.clip(s.m2_r, 0.0, None) / np.maximum(s.n - 1, 1))


def ctx_sample_expected_reward(s: CoMomentState, model: LinearModel, x, rng: np.random.Generator) -> float:
    """Sample a model from the posterior and return its un-standardized prediction for ``x``."""
    if s.n < min_observations(s.features):
        return EXPLORE
    cov = model.P / float(s.n)
    w = model.w + _cholesky(cov) @ rng.standard_normal(s.features)
    y = float(w @ standardize(x, s))
    return y * float(_reward_sd(s)) + float(s.mu_r)


def _sample_arms(states: CoMomentState, x, lam: float, rng: np.random.Generator) -> np.ndarray:
    w, P = _fit(states, lam)
    cov = P / states.n[:, None, None].astype(float)
    z = rng.standard_normal(w.shape)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.empty_like(cov)
        for a in range(len(cov)):
            try:
                chol[a] = _cholesky(cov[a])
            except ModelError:
                log.warning("arm %d: covariance not PD, using point estimate", a)
                chol[a] = 0.0
    w = w + np.einsum("aij,aj->ai", chol, z)
    xs = standardize(x, states)
    y = np.einsum("ai,ai->a", w, xs)
    return y * _reward_sd(states) + states.mu_r


def ctx_choose(states: CoMomentState, x, lam: float, rng: np.random.Generator) -> int:
    """Pick an arm for context ``x`` given the per-arm stack ``states``."""
    if states.n.ndim != 1 or states.arms < 1:
        raise ValueError("need a per-arm state stack with at least one arm")
    x = np.asarray(x, dtype=float)
    if x.shape != (states.features,):
        raise ValueError(f"context has shape {x.shape}, tuner expects ({states.features},)")
    cold = states.n < min_observations(states.features)
    if cold.any():
        candidates = np.flatnonzero(cold)
        return int(candidates[rng.integers(len(candidates))])
    try:
        samples = _sample_arms(states, x, lam, rng)
    except ModelError:
        log.warning("model fit failed; falling back to mean rewards")
        samples = np.asarray(states.mu_r, dtype=float)
    return int(np.argmax(samples))
