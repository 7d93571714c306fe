"""
Pseudo-EM baseline.

Alternates the latent reset (shared with the AD fit) with one E-step and one
closed-form M-step on the pseudo log-likelihood, i.e. the Gaussian mixture
likelihood of the current latent observations.
"""

import numpy as np

from .errors import CollapsedComponent, FitError, GmcmError
from .likelihood import exact_loglik, pseudo_loglik
from .marginals import reset_latent_counted
from .model import GmcmParams, as_matrix, component_logpdf, logsumexp, to_constrained
from .optimize import (FitConfig, FitReport, monotonicity_check, monotonicity_summary,
                       resolve_init)

RIDGE = 1e-8


def e_step(latent, params):
    """Posterior component memberships, an (n, K) row-stochastic array."""
    latent = as_matrix(latent, "latent")
    logp = component_logpdf(latent.values, params) + np.log(params.weights)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def m_step(latent, resp):
    """Weighted mixture updates: proportions, means and ridged scatter."""
    latent = as_matrix(latent, "latent")
    Y = latent.values
    resp = np.asarray(resp, dtype=float)
    nk = resp.sum(axis=0)
    if np.any(nk <= 1e-8):
        raise CollapsedComponent(
            f"component(s) {np.flatnonzero(nk <= 1e-8).tolist()} lost all weight")
    weights = nk / nk.sum()
    means = resp.T @ Y / nk[:, None]
    p = Y.shape[1]
    cov = np.empty((resp.shape[1], p, p))
    for k in range(resp.shape[1]):
        d = Y - means[k]
        cov[k] = (resp[:, k, None] * d).T @ d / nk[k] + RIDGE * np.eye(p)
        cov[k] = 0.5 * (cov[k] + cov[k].T)
    return GmcmParams(weights, means, cov)


def run_pem(ranks, params, config, m_step_fn, reset=True, method="pem"):
    """Shared pseudo-EM loop; ``m_step_fn(latent, resp)`` returns new params.

    Convergence is declared when the pseudo log-likelihood changes by less
    than ``config.convergence_gamma``. With ``reset=False`` the latent
    observations are computed once and then frozen (plain EM).
    """
    ranks = as_matrix(ranks, "rank")
    exact_trace, pseudo_trace, em_trace, param_trace = [], [], [], []
    conditions = {"condition_1": 0, "condition_2": 0, "condition_3": 0}
    clamps = 0
    latent = latent_prev = None
    converged = False

    def report():
        violations, worst = monotonicity_summary(exact_trace, config.monotonicity_tol)
        return FitReport(
            method=method,
            exact_ll=np.array(exact_trace),
            pseudo_ll=np.array(pseudo_trace),
            final_params=param_trace[-1],
            final_latent=latent,
            converged=converged,
            iterations_used=len(exact_trace),
            monotonicity_violations=violations,
            worst_drop=worst,
            clamp_warnings=clamps,
            condition_violations=conditions,
            param_trace=param_trace,
            em_pseudo_ll=np.array(em_trace),
        )

    for it in range(config.max_iterations):
        try:
            if reset or latent is None:
                latent, c = reset_latent_counted(ranks, params,
                                                 config.points_per_component, config.erf)
                clamps += c
            if latent_prev is not None and reset:
                for key, count in monotonicity_check(latent_prev, latent, params).items():
                    conditions[key] += count
            bd = exact_loglik(latent, params)
            exact_trace.append(bd.exact_ll)
            pseudo_trace.append(bd.pseudo_ll)
            param_trace.append(params)
            if it > 0 and abs(pseudo_trace[-1] - pseudo_trace[-2]) < config.convergence_gamma:
                converged = True
                break
            if it == config.max_iterations - 1:
                break
            resp = e_step(latent, params)
            params = m_step_fn(latent, resp)
            em_trace.append(pseudo_loglik(latent, params))
        except GmcmError as exc:
            raise FitError(str(exc), it, report() if exact_trace else None) from exc
        latent_prev = latent

    return report()


def fit_pem(ranks, K, init="kmeans", config=FitConfig(), reset=True):
    """Pseudo-EM fit of a K-component Gaussian mixture copula.

    ``init`` accepts the same values as :func:`adgmcm.optimize.fit_ad_gmcm`,
    so both methods can start from an identical point.
    """
    ranks = as_matrix(ranks, "rank")
    u = resolve_init(ranks, K, init, config.seed)
    step = m_step if config.covariance == "full" else _m_step_diagonal
    return run_pem(ranks, to_constrained(u), config, step, reset=reset)


def _m_step_diagonal(latent, resp):
    full = m_step(latent, resp)
    return GmcmParams(full.weights, full.means, np.eye(full.dim) * full.covariances)
