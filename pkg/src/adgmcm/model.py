"""
Mixture parameterization and Gaussian mixture densities.

Two parameter containers are used throughout:

* :class:`GmcmParams` holds the constrained mixture (weights on the simplex,
  means, symmetric positive definite covariances).
* :class:`UnconstrainedParams` holds the free optimization variables: weight
  scores ``alpha`` (``weights = softmax(alpha)``), means, and square factors
  ``V`` with ``covariance = V @ V.T``.

All densities are evaluated in the log domain.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidData, InvalidParams, NonPositiveDefinite, SingularFactor

LOG_2PI = np.log(2.0 * np.pi)

ROLES = ("raw", "rank", "latent")

# smallest Cholesky pivot (squared diagonal) relative to the largest
PIVOT_RATIO = 1e-12


def logsumexp(a, axis=None, keepdims=False):
    """``log(sum(exp(a)))`` along ``axis``, shifted by the maximum for stability."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return out


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def check_positive_definite(cov):
    """Return the Cholesky factor of ``cov`` or raise NonPositiveDefinite.

    A matrix passes when it is symmetric to 1e-12 (relative) and every
    squared Cholesky pivot exceeds ``PIVOT_RATIO`` times the largest one.
    """
    cov = np.asarray(cov, dtype=float)
    scale = max(1.0, float(np.max(np.abs(cov))))
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * scale):
        raise NonPositiveDefinite("covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite("covariance is not positive definite") from exc
    pivots = np.diag(chol) ** 2
    if not np.all(pivots > PIVOT_RATIO * pivots.max()):
        raise NonPositiveDefinite("covariance is numerically singular")
    return chol


@dataclass(frozen=True)
class GmcmParams:
    """Weights (K,), means (K, p) and covariances (K, p, p) of a mixture."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = _frozen(self.weights).reshape(-1)
        mu = _frozen(np.atleast_2d(self.means))
        cov = np.array(self.covariances, dtype=float)
        if cov.ndim == 2 and mu.shape[1] == 1 and cov.shape[1] == 1:
            cov = cov.reshape(-1, 1, 1)
        K = w.shape[0]
        if K < 1 or mu.shape[0] != K or cov.shape != (K, mu.shape[1], mu.shape[1]):
            raise InvalidParams(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu))
                and np.all(np.isfinite(cov))):
            raise InvalidParams("parameters must be finite")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParams("weights must be positive and sum to 1")
        chol = np.stack([check_positive_definite(c) for c in cov])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", _frozen(cov))
        object.__setattr__(self, "_chol", _frozen(chol))

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def variances(self):
        """Per-component marginal variances, shape (K, p)."""
        return np.diagonal(self.covariances, axis1=1, axis2=2)

    def correlations(self):
        sd = np.sqrt(self.variances)
        return self.covariances / (sd[:, :, None] * sd[:, None, :])

    def permuted(self, order):
        order = list(order)
        return GmcmParams(self.weights[order], self.means[order],
                          self.covariances[order])

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["covariances"])


@dataclass(frozen=True)
class UnconstrainedParams:
    """Free optimization variables: alpha (K,), means (K, p), factors (K, p, p)."""

    alpha: np.ndarray
    means: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        a = _frozen(self.alpha).reshape(-1)
        mu = _frozen(np.atleast_2d(self.means))
        v = _frozen(self.factors)
        K, p = mu.shape
        if a.shape != (K,) or v.shape != (K, p, p):
            raise InvalidParams(
                f"inconsistent shapes: alpha {a.shape}, means {mu.shape}, "
                f"factors {v.shape}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "factors", v)

    @property
    def n_components(self):
        return self.alpha.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def arrays(self):
        return self.alpha, self.means, self.factors

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        out, start = [], 0
        for a in self.arrays():
            out.append(vec[start:start + a.size].reshape(a.shape))
            start += a.size
        return UnconstrainedParams(*out)

    @classmethod
    def identity(cls, means, alpha=None):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        K, p = means.shape
        alpha = np.zeros(K) if alpha is None else alpha
        return cls(alpha, means, np.tile(np.eye(p), (K, 1, 1)))


@dataclass(frozen=True)
class DataMatrix:
    """An n x p matrix tagged with its role: ``raw``, ``rank`` or ``latent``."""

    values: np.ndarray
    role: str = "raw"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidData(f"expected a non-empty n x p matrix, got shape {v.shape}")
        if self.role not in ROLES:
            raise InvalidData(f"unknown role {self.role!r}")
        if not np.all(np.isfinite(v)):
            raise InvalidData("data contains NaN or infinite entries")
        if self.role == "rank" and (np.any(v <= 0.0) or np.any(v >= 1.0)):
            raise InvalidData("rank data must lie strictly inside (0, 1)")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def as_matrix(data, role):
    """Coerce ``data`` to a DataMatrix, checking the role if already tagged."""
    if isinstance(data, DataMatrix):
        if data.role != role:
            raise InvalidData(f"expected {role} data, got {data.role}")
        return data
    return DataMatrix(data, role)


def to_constrained(u):
    """Map free variables to a valid :class:`GmcmParams`.

    Weights are ``exp(alpha - logsumexp(alpha))`` and covariances ``V V^T``.
    """
    for k, v in enumerate(u.factors):
        sign, logdet = np.linalg.slogdet(v)
        if sign == 0 or logdet < np.log(1e-300):
            raise SingularFactor(f"factor {k} is numerically singular")
    log_w = u.alpha - logsumexp(u.alpha)
    # floor keeps weights strictly positive when scores differ by > ~745
    w = np.maximum(np.exp(log_w), np.finfo(float).tiny)
    w = w / w.sum()
    cov = u.factors @ np.swapaxes(u.factors, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return GmcmParams(w, u.means.copy(), cov)


def anchor_first_component(u):
    """Copy of ``u`` with component 0 pinned to zero mean and identity factor."""
    means = np.array(u.means)
    factors = np.array(u.factors)
    means[0] = 0.0
    factors[0] = np.eye(u.dim)
    return UnconstrainedParams(np.array(u.alpha), means, factors)


def component_logpdf(Y, params):
    """Per-component log normal densities, shape (n, K)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    diff = Y[:, None, :] - params.means[None, :, :]          # (n, K, p)
    z = np.einsum("kab,nkb->nka", np.linalg.inv(params._chol), diff)
    maha = np.sum(z * z, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(params._chol, axis1=1, axis2=2)), axis=1)
    return -0.5 * (maha + logdet[None, :] + params.dim * LOG_2PI)


def gmm_logpdf_rows(Y, params):
    """Mixture log density of each row of ``Y``."""
    return logsumexp(component_logpdf(Y, params) + np.log(params.weights), axis=1)


def gmm_logpdf(x, params):
    """Log density of the Gaussian mixture at a single point ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != params.dim:
        raise InvalidData(f"point has dimension {x.shape[1]}, expected {params.dim}")
    return float(gmm_logpdf_rows(x, params)[0])


def marginal_logpdf_matrix(Y, params):
    """Log marginal mixture density of every entry of ``Y``, shape (n, p)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    var = params.variances                                    # (K, p)
    diff = Y[:, None, :] - params.means[None, :, :]
    comp = -0.5 * (diff ** 2 / var[None] + np.log(var)[None] + LOG_2PI)
    return logsumexp(comp + np.log(params.weights)[None, :, None], axis=1)


def marginal_gmm_logpdf(y, j, params):
    """Log density of the j-th univariate marginal of the mixture at ``y``."""
    if not 0 <= j < params.dim:
        raise IndexError(f"dimension {j} out of range for p={params.dim}")
    var = params.variances[:, j]
    mu = params.means[:, j]
    comp = -0.5 * ((y - mu) ** 2 / var + np.log(var) + LOG_2PI)
    return float(logsumexp(comp + np.log(params.weights)))


def project(params, j):
    """The one-dimensional mixture obtained by keeping coordinate ``j``."""
    return GmcmParams(params.weights, params.means[:, [j]],
                      params.covariances[:, j, j].reshape(-1, 1, 1))
