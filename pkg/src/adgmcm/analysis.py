"""
Clustering and reproducibility analysis on top of fitted mixture copulas.

The reproducibility model is a two-component mixture with a null component
``N(0, I)`` and a signal component with common mean ``mu * 1`` and
compound-symmetry covariance ``sigma^2 ((1 - rho) I + rho 1 1^T)``.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import comb, expit, logit

from . import autodiff as ad
from .errors import (CollapsedComponent, FitError, GmcmError, InvalidParams, LengthMismatch,
                     NonFiniteGradient, RhoOutOfRange)
from .likelihood import exact_loglik_graph
from .marginals import reset_latent_counted
from .model import LOG_2PI, GmcmParams, as_matrix, logsumexp
from .optimize import (AdamState, FitConfig, FitReport, implicit_latent_graph, adam_update, log_drop,
                       monotonicity_check, monotonicity_summary)
from .pem import e_step, run_pem

log = logging.getLogger(__name__)

PENALTY_B = 50


# -- clustering ---------------------------------------------------------------

def map_labels(latent, params):
    """Most probable component (1-based) of every latent row; ties go low."""
    return np.argmax(e_step(latent, params), axis=1) + 1


def adjusted_rand_index(a, b):
    """Hubert-Arabie adjusted Rand index of two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise LengthMismatch("need at least two labels")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    sum_cells = comb(table, 2).sum()
    sum_rows = comb(table.sum(axis=1), 2).sum()
    sum_cols = comb(table.sum(axis=0), 2).sum()
    expected = sum_rows * sum_cols / comb(a.size, 2)
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


# -- reproducibility model ----------------------------------------------------

@dataclass(frozen=True)
class ReproParams:
    """Null weight ``alpha1``, signal mean ``mu``, signal sd ``sigma``, correlation ``rho``."""

    alpha1: float
    mu: float
    sigma: float
    rho: float

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise InvalidParams("alpha1 must lie in [0, 1]")
        if not self.mu > 0:
            raise InvalidParams("mu must be positive")
        if not self.sigma > 0:
            raise InvalidParams("sigma must be positive")
        if not self.rho < 1.0:
            raise RhoOutOfRange(f"rho={self.rho} must be below 1")

    def to_dict(self):
        return asdict(self)

    def as_tuple(self):
        return (self.alpha1, self.mu, self.sigma, self.rho)


def _check_rho(rho, p):
    if p < 2:
        raise InvalidParams("the reproducibility model needs p >= 2")
    lower = -1.0 / (p - 1)
    if not lower < rho < 1.0:
        raise RhoOutOfRange(f"rho={rho} outside ({lower:.6g}, 1) for p={p}")


def repro_arrays(rp, p):
    """Weights, means and covariances of the model without weight checks."""
    _check_rho(rp.rho, p)
    weights = np.array([rp.alpha1, 1.0 - rp.alpha1])
    means = np.vstack([np.zeros(p), np.full(p, rp.mu)])
    s2 = rp.sigma ** 2
    cov2 = s2 * ((1.0 - rp.rho) * np.eye(p) + rp.rho * np.ones((p, p)))
    return weights, means, np.stack([np.eye(p), cov2])


def expand_repro(rp, p):
    """The constrained two-component :class:`GmcmParams`."""
    weights, means, cov = repro_arrays(rp, p)
    if not 0.0 < rp.alpha1 < 1.0:
        raise InvalidParams("alpha1 must lie strictly inside (0, 1) to build a mixture")
    return GmcmParams(weights, means, cov)


def idr(latent, params):
    """Posterior probability that each subject belongs to the null component 1.

    ``params`` is the expanded :class:`GmcmParams` or a :class:`ReproParams`
    (which also admits ``alpha1`` of exactly 0 or 1).
    """
    latent = as_matrix(latent, "latent")
    Y = latent.values
    if isinstance(params, ReproParams):
        weights, means, cov = repro_arrays(params, Y.shape[1])
    else:
        if params.n_components != 2:
            raise InvalidParams("idr needs a two-component mixture")
        weights, means, cov = params.weights, params.means, params.covariances
    logp = np.empty((Y.shape[0], 2))
    for k in range(2):
        chol = np.linalg.cholesky(cov[k])
        z = np.linalg.solve(chol, (Y - means[k]).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        logp[:, k] = -0.5 * (np.sum(z * z, axis=0) + logdet + Y.shape[1] * LOG_2PI)
    with np.errstate(divide="ignore"):
        logp += np.log(weights)
    return np.exp(logp[:, 0] - logsumexp(logp, axis=1))


def adjusted_idr(idr_values):
    """Running mean of the sorted idr values, mapped back to input order."""
    v = np.asarray(idr_values, dtype=float)
    order = np.argsort(v, kind="stable")
    running = np.cumsum(v[order]) / np.arange(1, v.size + 1)
    out = np.empty_like(v)
    out[order] = running
    return out


@dataclass
class ReproResult:
    params: ReproParams
    idr: np.ndarray
    adjusted_idr: np.ndarray
    reproducible_mask: np.ndarray
    fit_report: FitReport
    threshold: float = 0.05

    @property
    def map_mask(self):
        """Subjects assigned to the signal component by the MAP rule."""
        return self.idr < 0.5


def result_from_report(report, threshold=0.05):
    """Rebuild a :class:`ReproResult` from a reproducibility fit report,
    e.g. the partial report carried by a :class:`FitError`."""
    rp = _params_to_repro(report.final_params)
    v = idr(report.final_latent, rp)
    adj = adjusted_idr(v)
    return ReproResult(rp, v, adj, adj < threshold, report, threshold)


def _free_to_repro(theta, p):
    a, lm, ls, r = (float(x) for x in theta)
    return ReproParams(float(expit(a)), float(np.exp(lm)), float(np.exp(ls)), r)


def _repro_objective(Y, b, implicit=False):
    p = Y.shape[1]
    eye, ones = np.eye(p), np.ones((p, p))
    lower = -1.0 / (p - 1)

    def fn(a, lm, ls, r):
        log_w = ad.stack([ad.log_sigmoid(a), ad.log_sigmoid(-a)])
        means = ad.stack([np.zeros(p), ad.exp(lm) * np.ones(p)])
        cov2 = ad.exp(2.0 * ls) * ((1.0 - r) * eye + r * ones)
        cov = ad.stack([eye, cov2])
        latent = implicit_latent_graph(Y, log_w, means, cov) if implicit else Y
        exact, pseudo, _ = exact_loglik_graph(latent, log_w, means, cov, parts=True)
        penalty = ((2.0 * r - (1.0 + lower)) / (1.0 - lower)) ** (2 * b)
        return exact - penalty, exact, pseudo
    return fn


def fit_repro(ranks, init, config=FitConfig(), threshold=0.05, penalty_b=PENALTY_B):
    """Fit the reproducibility model by Adam ascent on the exact likelihood.

    The free variables are ``logit(alpha1)``, ``log(mu)``, ``log(sigma)`` and
    ``rho``; the correlation is kept in range by subtracting
    :func:`adgmcm.likelihood.rho_penalty`. Component 1 stays fixed at
    ``N(0, I)``.
    """
    ranks = as_matrix(ranks, "rank")
    p = ranks.p
    _check_rho(init.rho, p)
    if not 0.0 < init.alpha1 < 1.0:
        raise InvalidParams("initial alpha1 must lie strictly inside (0, 1)")
    lower = -1.0 / (p - 1)
    theta = [np.array(logit(init.alpha1)), np.array(np.log(init.mu)),
             np.array(np.log(init.sigma)), np.array(float(init.rho))]
    state = AdamState.zeros_like(theta)
    exact_trace, pseudo_trace, param_trace = [], [], []
    conditions = {"condition_1": 0, "condition_2": 0, "condition_3": 0}
    clamps = 0
    latent_prev = final_latent = None
    converged = False

    def _report():
        violations, worst = monotonicity_summary(exact_trace, config.monotonicity_tol)
        return FitReport(
            method="ad-repro",
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

    for it in range(config.max_iterations):
        try:
            rp = _free_to_repro(theta, p)
            params = expand_repro(rp, p)
            latent, c = reset_latent_counted(ranks, params, config.points_per_component,
                                             config.erf)
            leaves = [ad.Var(t) for t in theta]
            objective, exact, pseudo = _repro_objective(
                latent.values, penalty_b, config.latent_gradient == "implicit")(*leaves)
            grads = ad.grad(objective, leaves)
            if not all(np.isfinite(g) for g in grads):
                raise NonFiniteGradient("gradient has NaN or infinite entries")
        except GmcmError as exc:
            raise FitError(str(exc), it, _report() if exact_trace else None) from exc
        clamps += c
        if latent_prev is not None:
            for key, count in monotonicity_check(latent_prev, latent, params).items():
                conditions[key] += count
        exact_trace.append(float(exact.value))
        log_drop(exact_trace, config.monotonicity_tol, it)
        pseudo_trace.append(float(pseudo.value))
        param_trace.append(params)
        final_latent = latent
        if it > 0 and abs(exact_trace[-1] - exact_trace[-2]) < config.convergence_gamma:
            converged = True
            break
        if it == config.max_iterations - 1:
            break
        theta, state = adam_update(theta, grads, state, config)
        # the penalty is soft; keep rho strictly admissible so the reset can run
        theta[3] = np.clip(theta[3], lower + 1e-6, 1.0 - 1e-6)
        latent_prev = latent

    report = _report()
    return result_from_report(report, threshold)


def _params_to_repro(params):
    cov2 = params.covariances[1]
    s2 = float(np.mean(np.diag(cov2)))
    p = cov2.shape[0]
    off = (cov2.sum() - np.trace(cov2)) / (p * (p - 1))
    return ReproParams(float(params.weights[0]), float(params.means[1].mean()),
                       float(np.sqrt(s2)), float(off / s2))


def m_step_repro(latent, resp):
    """Constrained M-step: exact maximizer of the expected complete-data
    log-likelihood under the reproducibility constraints.

    Because ``1`` is an eigenvector of a compound-symmetry matrix, the common
    mean is the responsibility-weighted grand mean, and the two eigenvalues
    (along ``1`` and orthogonal to it) have closed-form weighted estimates.
    """
    latent = as_matrix(latent, "latent")
    Y = latent.values
    n, p = Y.shape
    r1 = resp[:, 0]
    r2 = resp[:, 1]
    n2 = r2.sum()
    if n2 <= 1e-8 or r1.sum() <= 1e-8:
        raise CollapsedComponent("a reproducibility component lost all weight")
    alpha1 = float(r1.sum() / n)
    mu = float(np.sum(r2[:, None] * Y) / (p * n2))
    mu = max(mu, 1e-6)
    d = Y - mu
    s = d.sum(axis=1)
    lam_par = float(np.sum(r2 * s * s) / (p * n2))
    lam_perp = float(np.sum(r2 * (np.sum(d * d, axis=1) - s * s / p)) / ((p - 1) * n2))
    s2 = (lam_par + (p - 1) * lam_perp) / p
    rho = (lam_par - lam_perp) / (p * s2)
    lower = -1.0 / (p - 1)
    rho = float(np.clip(rho, lower + 1e-6, 1.0 - 1e-6))
    return expand_repro(ReproParams(alpha1, mu, float(np.sqrt(s2)), rho), p)


def fit_pem_repro(ranks, init, config=FitConfig(), threshold=0.05):
    """Pseudo-EM baseline for the reproducibility model."""
    ranks = as_matrix(ranks, "rank")
    params = expand_repro(init, ranks.p)
    report = run_pem(ranks, params, config, m_step_repro, method="pem-repro")
    return result_from_report(report, threshold)
