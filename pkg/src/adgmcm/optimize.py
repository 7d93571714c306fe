"""
Gradient-based maximization of the exact copula likelihood.

Each iteration of :func:`fit_ad_gmcm` alternates two phases:

1. reset the latent observations from the current parameters by inverting
   the marginal mixture CDFs on a grid;
2. take Adam ascent steps on the exact log-likelihood with the latent
   observations held fixed, differentiating through the unconstrained
   parameterization (softmax weights, ``Sigma = V V^T``).

The gradient is obtained by reverse-mode differentiation
(:mod:`adgmcm.autodiff`); it does not flow through the reset, which has no
closed form.
"""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.cluster.vq import ClusterError, kmeans2
from scipy.special import ndtri

from . import autodiff as ad
from .errors import (EmptyCluster, FitError, GmcmError, InvalidParams,
                     NonFiniteGradient)
from .likelihood import exact_loglik_graph
from .marginals import ERF_MODES, reset_latent_counted
from .model import (DataMatrix, GmcmParams, UnconstrainedParams,
                    anchor_first_component, as_matrix, to_constrained)

log = logging.getLogger(__name__)

INIT_STRATEGIES = ("random", "kmeans")
KMEANS_ITERATIONS = 25
KMEANS_RETRIES = 5


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings shared by the AD and pseudo-EM fits.

    ``covariance="diagonal"`` masks the off-diagonal factor entries so every
    component covariance stays diagonal. ``latent_gradient="implicit"`` lets
    the gradient see the first-order dependence of the reset latent values on
    the parameters; the default ``"fixed"`` treats them as constants.
    """

    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iterations: int = 750
    convergence_gamma: float = 1e-6
    grad_steps_per_reset: int = 1
    anchor: bool = False
    seed: int = 0
    points_per_component: int = 1000
    erf: str = "exact"
    covariance: str = "full"
    latent_gradient: str = "fixed"
    monotonicity_tol: float = 1e-6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParams("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidParams("Adam betas must lie in (0, 1)")
        if self.max_iterations < 1 or self.grad_steps_per_reset < 1:
            raise InvalidParams("max_iterations and grad_steps_per_reset must be >= 1")
        if not self.convergence_gamma > 0:
            raise InvalidParams("convergence_gamma must be positive")
        if self.erf not in ERF_MODES:
            raise InvalidParams(f"erf must be one of {ERF_MODES}")
        if self.covariance not in ("full", "diagonal"):
            raise InvalidParams("covariance must be 'full' or 'diagonal'")
        if self.latent_gradient not in ("fixed", "implicit"):
            raise InvalidParams("latent_gradient must be 'fixed' or 'implicit'")
        if self.seed < 0:
            raise InvalidParams("seed must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class FitReport:
    """Per-iteration trace and final state of a fit.

    ``exact_ll[t]`` and ``pseudo_ll[t]`` are evaluated at the parameters of
    iteration t with latent observations reset from those same parameters.
    """

    method: str
    exact_ll: np.ndarray
    pseudo_ll: np.ndarray
    final_params: GmcmParams
    final_latent: DataMatrix
    converged: bool
    iterations_used: int
    monotonicity_violations: int
    worst_drop: float
    clamp_warnings: int
    condition_violations: dict = field(default_factory=dict)
    param_trace: list = field(default_factory=list)
    # pseudo-EM only: pseudo LL after the M-step with the latent still fixed
    em_pseudo_ll: np.ndarray = None

    @property
    def final_exact_ll(self):
        return float(self.exact_ll[-1])

    @property
    def final_pseudo_ll(self):
        return float(self.pseudo_ll[-1])

    def to_dict(self, include_params_trace=False):
        out = {
            "method": self.method,
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "final_exact_ll": self.final_exact_ll,
            "final_pseudo_ll": self.final_pseudo_ll,
            "trace": {
                "exact_ll": [float(v) for v in self.exact_ll],
                "pseudo_ll": [float(v) for v in self.pseudo_ll],
            },
            "final_params": self.final_params.to_dict(),
            "monotonicity": {
                "violations": int(self.monotonicity_violations),
                "worst_drop": float(self.worst_drop),
                "condition_violations": {k: int(v) for k, v in self.condition_violations.items()},
            },
            "clamp_warnings": int(self.clamp_warnings),
        }
        if self.em_pseudo_ll is not None:
            out["trace"]["em_pseudo_ll"] = [float(v) for v in self.em_pseudo_ll]
        if include_params_trace:
            out["param_trace"] = [p.to_dict() for p in self.param_trace]
        return out


def log_drop(trace, tol, it):
    """Log the latest step of ``trace`` if it fell by more than ``tol``."""
    if len(trace) > 1 and trace[-2] - trace[-1] > tol:
        log.warning("iteration %d: exact log-likelihood fell by %.3g", it,
                    trace[-2] - trace[-1])


def monotonicity_summary(trace, tol):
    """Number of drops larger than ``tol`` in ``trace`` and the worst drop."""
    steps = np.diff(np.asarray(trace, dtype=float))
    drops = -steps[steps < -tol]
    return int(drops.size), float(drops.max()) if drops.size else 0.0


# -- gradients ---------------------------------------------------------------

def _gradient_mask(u, anchor, covariance):
    masks = [np.ones_like(a) for a in u.arrays()]
    if anchor:
        masks[1][0] = 0.0
        masks[2][0] = 0.0
    if covariance == "diagonal":
        masks[2] = masks[2] * np.eye(u.dim)
    return masks


def implicit_latent_graph(Y, log_w, means, cov):
    """``Y`` re-expressed as a function of the parameters to first order.

    With ``Psi_j(y_ij) = u_ij`` held fixed, ``dy = -dPsi / psi``. The value is
    ``Y`` itself; only the derivative differs from a constant.
    """
    n, p = Y.shape
    K = means.shape[0]
    sd = ad.reshape(ad.sqrt(ad.diagonal(cov)), (K, 1, p))
    z = (Y[None, :, :] - ad.reshape(means, (K, 1, p))) / sd
    w = ad.reshape(ad.exp(log_w), (K, 1, 1))
    cdf = ad.sum(w * ad.ndtr(z), axis=0)
    zv, sdv, wv = z.value, sd.value, w.value
    dens = np.sum(wv * np.exp(-0.5 * zv * zv) / (np.sqrt(2.0 * np.pi) * sdv), axis=0)
    return Y - (cdf - cdf.value) / np.maximum(dens, np.finfo(float).tiny)


def _objective(Y, parts=False, implicit=False):
    def fn(alpha, means, factors):
        log_w = alpha - ad.logsumexp(alpha)
        cov = ad.matmul(factors, ad.swapaxes(factors, 1, 2))
        latent = implicit_latent_graph(Y, log_w, means, cov) if implicit else Y
        return exact_loglik_graph(latent, log_w, means, cov, parts=parts)
    return fn


def value_and_grad_exact(u, latent, anchor=False, covariance="full", implicit=False):
    """Exact log-likelihood breakdown and its gradient with respect to ``u``.

    Returns ``(exact, pseudo, marginal, gradient)`` where the gradient is an
    :class:`UnconstrainedParams` of the same shapes as ``u``. With
    ``implicit=True`` the gradient includes the response of the latent values
    to the parameters (see :class:`FitConfig`).
    """
    latent = as_matrix(latent, "latent")
    leaves = [ad.Var(np.array(a)) for a in u.arrays()]
    exact, pseudo, marginal = _objective(latent.values, True, implicit)(*leaves)
    grads = ad.grad(exact, leaves)
    grads = [g * m for g, m in zip(grads, _gradient_mask(u, anchor, covariance))]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradient("gradient has NaN or infinite entries")
    return (float(exact.value), float(pseudo.value), float(marginal.value),
            UnconstrainedParams(*grads))


def grad_exact_loglik(u, latent, anchor=False, covariance="full", implicit=False):
    """Gradient of the exact log-likelihood with respect to the free variables.

    The latent observations are treated as constants. Entries frozen by
    ``anchor`` (component 0 mean and factor) are returned as exact zeros.
    """
    return value_and_grad_exact(u, latent, anchor, covariance, implicit)[3]


# -- Adam --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls(tuple(np.zeros_like(a) for a in arrays),
                   tuple(np.zeros_like(a) for a in arrays), 0)


def adam_update(arrays, grads, state, config):
    """One bias-corrected Adam ascent step on a sequence of arrays."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    new_arrays, ms, vs = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_arrays.append(a + config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon))
        ms.append(m)
        vs.append(v)
    return new_arrays, AdamState(tuple(ms), tuple(vs), t)


def adam_step(u, gradient, state, config):
    """Adam ascent step on :class:`UnconstrainedParams` (maximization)."""
    if state is None:
        state = AdamState.zeros_like(u.arrays())
    new, state = adam_update(u.arrays(), gradient.arrays(), state, config)
    return UnconstrainedParams(*new), state


# -- initialization ------------------------------------------------------------

def init_params(ranks, K, strategy="kmeans", seed=0):
    """Starting values for a K-component fit.

    ``random`` draws means from a standard normal; ``kmeans`` runs seeded
    Lloyd iterations on the normal scores of the ranks and uses the cluster
    means and log cluster proportions. Factors start at the identity.
    """
    ranks = as_matrix(ranks, "rank")
    if not 1 <= K <= ranks.n:
        raise InvalidParams(f"need 1 <= K <= n, got K={K}, n={ranks.n}")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        return UnconstrainedParams.identity(rng.standard_normal((K, ranks.p)))
    if strategy != "kmeans":
        raise InvalidParams(f"unknown init strategy {strategy!r}")
    z = ndtri(ranks.values)
    for attempt in range(KMEANS_RETRIES + 1):
        try:
            centers, labels = kmeans2(z, K, iter=KMEANS_ITERATIONS, minit="points",
                                      missing="raise", seed=seed + attempt)
        except ClusterError:
            log.debug("k-means attempt %d produced an empty cluster", attempt)
            continue
        counts = np.bincount(labels, minlength=K)
        if np.all(counts > 0):
            return UnconstrainedParams.identity(centers, np.log(counts / ranks.n))
    raise EmptyCluster(f"k-means left a cluster empty after {KMEANS_RETRIES} retries")


def resolve_init(ranks, K, init, seed):
    if isinstance(init, UnconstrainedParams):
        if init.n_components != K or init.dim != ranks.p:
            raise InvalidParams("initial parameters do not match K and p")
        return init
    if isinstance(init, GmcmParams):
        factors = np.linalg.cholesky(init.covariances)
        return UnconstrainedParams(np.log(init.weights), init.means, factors)
    return init_params(ranks, K, init, seed)


# -- monotonicity diagnostics ------------------------------------------------

def monotonicity_check(y_old, y_new, params_new, tol=1e-12):
    """Count violations of the sufficient conditions for a likelihood increase.

    Condition 1: every latent entry moves away from every component mean.
    Conditions 2 and 3: with ``c_j = 2 * mean_k(mu_kj)``, an entry that
    increases must satisfy ``y_new <= c_j - y_old`` and one that decreases
    ``y_new >= c_j - y_old``. Purely diagnostic.
    """
    y_old = np.asarray(getattr(y_old, "values", y_old), dtype=float)
    y_new = np.asarray(getattr(y_new, "values", y_new), dtype=float)
    if y_old.shape != y_new.shape:
        raise ValueError("latent matrices must have matching shapes")
    mu = params_new.means                                    # (K, p)
    far_new = np.abs(y_new[:, None, :] - mu[None])
    far_old = np.abs(y_old[:, None, :] - mu[None])
    cond1 = int(np.count_nonzero(far_new < far_old - tol))
    c = 2.0 * mu.mean(axis=0)
    step = y_new - y_old
    mirror = c[None, :] - y_old
    cond2 = int(np.count_nonzero((step > 0) & (y_new > mirror + tol)))
    cond3 = int(np.count_nonzero((step < 0) & (y_new < mirror - tol)))
    return {"condition_1": cond1, "condition_2": cond2, "condition_3": cond3}


# -- the fit loop ----------------------------------------------------------------

def _project_diagonal(u):
    return UnconstrainedParams(u.alpha, u.means, u.factors * np.eye(u.dim))


def fit_ad_gmcm(ranks, K, init="kmeans", config=FitConfig()):
    """Fit a K-component Gaussian mixture copula by exact-likelihood ascent.

    Parameters
    ----------
    ranks : DataMatrix
        Scaled ranks (role ``rank``).
    K : int
        Number of mixture components.
    init : {"random", "kmeans"} or UnconstrainedParams or GmcmParams
        Initialization strategy or explicit starting point.
    config : FitConfig

    Returns
    -------
    FitReport
    """
    ranks = as_matrix(ranks, "rank")
    u = resolve_init(ranks, K, init, config.seed)
    if config.anchor:
        u = anchor_first_component(u)
    if config.covariance == "diagonal":
        u = _project_diagonal(u)

    implicit = config.latent_gradient == "implicit"
    exact_trace, pseudo_trace, param_trace = [], [], []
    conditions = {"condition_1": 0, "condition_2": 0, "condition_3": 0}
    clamps = 0
    state = AdamState.zeros_like(u.arrays())
    latent_prev = final_latent = None
    converged = False

    def _report():
        violations, worst = monotonicity_summary(exact_trace, config.monotonicity_tol)
        return FitReport(
            method="ad",
            exact_ll=np.array(exact_trace),
            pseudo_ll=np.array(pseudo_trace),
            final_params=param_trace[-1],
            final_latent=final_latent,
            converged=converged,
            iterations_used=len(exact_trace),
            monotonicity_violations=violations,
            worst_drop=worst,
            clamp_warnings=clamps,
            condition_violations=conditions,
            param_trace=param_trace,
        )

    def _fail(exc, it):
        return FitError(str(exc), it, _report() if exact_trace else None)

    for it in range(config.max_iterations):
        try:
            params = to_constrained(u)
            latent, c = reset_latent_counted(ranks, params, config.points_per_component,
                                             config.erf)
            ll, pseudo, _, g = value_and_grad_exact(u, latent, config.anchor,
                                                    config.covariance, implicit)
        except GmcmError as exc:
            raise _fail(exc, it) from exc
        clamps += c
        if latent_prev is not None:
            for key, count in monotonicity_check(latent_prev, latent, params).items():
                conditions[key] += count
        exact_trace.append(ll)
        log_drop(exact_trace, config.monotonicity_tol, it)
        pseudo_trace.append(pseudo)
        param_trace.append(params)
        final_latent = latent
        if it > 0 and abs(exact_trace[-1] - exact_trace[-2]) < config.convergence_gamma:
            converged = True
            break
        if it == config.max_iterations - 1:
            break
        for step in range(config.grad_steps_per_reset):
            if step > 0:
                try:
                    g = grad_exact_loglik(u, latent, config.anchor, config.covariance,
                                          implicit)
                except GmcmError as exc:
                    raise _fail(exc, it) from exc
            u, state = adam_step(u, g, state, config)
        latent_prev = latent

    report = _report()
    if report.monotonicity_violations:
        log.info("exact log-likelihood decreased in %d of %d iterations (worst %.3g)",
                 report.monotonicity_violations, report.iterations_used, report.worst_drop)
    if clamps:
        log.warning("%d rank values were clamped to the inverse-CDF grid ends", clamps)
    return report


def with_config(config, **changes):
    """Convenience wrapper around ``dataclasses.replace`` for FitConfig."""
    return replace(config, **changes)
