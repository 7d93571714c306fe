"""
Copula log-likelihoods of the Gaussian mixture copula model.

For latent observations ``y`` the exact copula log-likelihood is

    sum_i log f(y_i) - sum_i sum_j log f_j(y_ij)

where ``f`` is the mixture density and ``f_j`` its j-th marginal. The first
sum alone is the pseudo log-likelihood.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import (LOG_2PI, GmcmParams, as_matrix, gmm_logpdf_rows,
                    marginal_logpdf_matrix)


@dataclass(frozen=True)
class LikelihoodBreakdown:
    exact_ll: float
    pseudo_ll: float
    marginal_ll: float


def _check_dims(latent, params):
    if latent.p != params.dim:
        raise ValueError(f"latent data has {latent.p} columns, params have {params.dim}")


def exact_loglik(latent, params):
    """Exact copula log-likelihood together with its two parts."""
    latent = as_matrix(latent, "latent")
    _check_dims(latent, params)
    # fixed-order sums keep results bit-reproducible
    pseudo = float(np.sum(gmm_logpdf_rows(latent.values, params)))
    marginal = float(np.sum(marginal_logpdf_matrix(latent.values, params)))
    return LikelihoodBreakdown(pseudo - marginal, pseudo, marginal)


def pseudo_loglik(latent, params):
    """Mixture log-likelihood of the latent observations."""
    latent = as_matrix(latent, "latent")
    _check_dims(latent, params)
    return float(np.sum(gmm_logpdf_rows(latent.values, params)))


def rho_penalty(rho, p, b=50):
    """``((2 rho - (1 + a)) / (1 - a)) ** (2 b)`` with ``a = -1 / (p - 1)``.

    Close to zero on the admissible correlation range ``(a, 1)``, and growing
    without bound outside it.
    """
    if p < 2:
        raise ValueError("the correlation penalty needs p >= 2")
    a = -1.0 / (p - 1)
    return ((2.0 * rho - (1.0 + a)) / (1.0 - a)) ** (2 * b)


def exact_loglik_graph(Y, log_w, means, cov, parts=False):
    """Differentiable exact log-likelihood.

    ``Y`` is a constant (n, p) array; ``log_w`` (K,), ``means`` (K, p) and
    ``cov`` (K, p, p) are :class:`autodiff.Var` nodes (or arrays). Returns a
    scalar Var, or the triple (exact, pseudo, marginal) when ``parts`` is set.
    """
    n, p = Y.shape
    Y3 = ad.reshape(Y, (1, n, p)) if isinstance(Y, ad.Var) else Y[None, :, :]
    diff = ad.swapaxes(Y3 - ad.reshape(means, (means.shape[0], 1, p)),
                       1, 2)                                  # (K, p, n)
    z = ad.solve(cov, diff)
    maha = ad.sum(diff * z, axis=1)                           # (K, n)
    logdet = ad.reshape(ad.logabsdet(cov), (-1, 1))
    comp = ad.reshape(log_w, (-1, 1)) - 0.5 * (maha + logdet + p * LOG_2PI)
    pseudo = ad.sum(ad.logsumexp(comp, axis=0))

    var = ad.diagonal(cov)                                    # (K, p)
    K = var.shape[0]
    d = Y3 - ad.reshape(means, (K, 1, p))                     # (K, n, p)
    var3 = ad.reshape(var, (K, 1, p))
    mcomp = (ad.reshape(log_w, (K, 1, 1))
             - 0.5 * (d * d / var3 + ad.log(var3) + LOG_2PI))
    marginal = ad.sum(ad.logsumexp(mcomp, axis=0))
    if parts:
        return pseudo - marginal, pseudo, marginal
    return pseudo - marginal


# -- degeneracy probes -------------------------------------------------------
# Two latent points sitting on the two component means of a 2-component,
# 2-dimensional mixture. 2*pi constants cancel in the copula form and are
# dropped in the GMM form, as in the closed-form expressions.

_PROBE_MEANS = ((0.0, 0.0), (1.0, 1.0))
_PROBE_WEIGHTS = (0.5, 0.5)


def _log_bivariate_term(log_pi, s1, s2, rho, d1, d2):
    """``log(pi / (sqrt(1-rho^2) s1 s2) * exp(-Q))`` of a bivariate normal."""
    one_m = (1.0 - rho) * (1.0 + rho)
    q = (d1 ** 2 / (2 * s1 ** 2) + d2 ** 2 / (2 * s2 ** 2)
         - rho * d1 * d2 / (s1 * s2)) / one_m
    return log_pi - 0.5 * np.log(one_m) - np.log(s1) - np.log(s2) - q


def _log_univariate_term(log_pi, s, d):
    return log_pi - np.log(s) - d ** 2 / (2 * s ** 2)


def _probe_loglik(sig, rho, means, weights):
    """Closed-form GMCM and GMM log-likelihoods of the two-point construction.

    ``sig[k][j]`` is the standard deviation of component k in dimension j and
    ``rho[k]`` its correlation.
    """
    (m11, m12), (m21, m22) = means
    lp1, lp2 = np.log(weights[0]), np.log(weights[1])
    (s11, s12), (s21, s22) = sig
    r1, r2 = rho
    d1, d2 = m11 - m21, m12 - m22
    # point 1 = mu_1, point 2 = mu_2
    joint1 = np.logaddexp(_log_bivariate_term(lp1, s11, s12, r1, 0.0, 0.0),
                          _log_bivariate_term(lp2, s21, s22, r2, d1, d2))
    joint2 = np.logaddexp(_log_bivariate_term(lp2, s21, s22, r2, 0.0, 0.0),
                          _log_bivariate_term(lp1, s11, s12, r1, d1, d2))
    marg1 = (np.logaddexp(_log_univariate_term(lp1, s11, 0.0),
                          _log_univariate_term(lp2, s21, d1))
             + np.logaddexp(_log_univariate_term(lp1, s12, 0.0),
                            _log_univariate_term(lp2, s22, d2)))
    marg2 = (np.logaddexp(_log_univariate_term(lp2, s21, 0.0),
                          _log_univariate_term(lp1, s11, d1))
             + np.logaddexp(_log_univariate_term(lp2, s22, 0.0),
                            _log_univariate_term(lp1, s12, d2)))
    gmm = joint1 + joint2
    return float(gmm - marg1 - marg2), float(gmm)


def degeneracy_probe_sigma(sigma_sequence, means=_PROBE_MEANS, weights=_PROBE_WEIGHTS):
    """(gmcm_ll, gmm_ll) as the first component's sd in dimension 1 shrinks.

    All other standard deviations are 1 and both correlations are 0.
    """
    sigma_sequence = np.asarray(sigma_sequence, dtype=float)
    if np.any(sigma_sequence <= 0) or np.any(np.diff(sigma_sequence) >= 0):
        raise ValueError("sigma_sequence must be positive and strictly decreasing")
    return [_probe_loglik(((s, 1.0), (1.0, 1.0)), (0.0, 0.0), means, weights)
            for s in sigma_sequence]


def degeneracy_probe_rho(rho_sequence, means=_PROBE_MEANS, weights=_PROBE_WEIGHTS,
                         rho2=0.0):
    """GMCM log-likelihood as the first component's correlation approaches 1."""
    rho_sequence = np.asarray(rho_sequence, dtype=float)
    if np.any(rho_sequence < 0) or np.any(rho_sequence >= 1):
        raise ValueError("rho values must lie in [0, 1)")
    return [_probe_loglik(((1.0, 1.0), (1.0, 1.0)), (r, rho2), means, weights)[0]
            for r in rho_sequence]


def probe_params(sig=((1.0, 1.0), (1.0, 1.0)), rho=(0.0, 0.0),
                 means=_PROBE_MEANS, weights=_PROBE_WEIGHTS):
    """The mixture behind the probes, for cross-checking against exact_loglik."""
    cov = []
    for (s1, s2), r in zip(sig, rho):
        cov.append([[s1 * s1, r * s1 * s2], [r * s1 * s2, s2 * s2]])
    return GmcmParams(weights, means, cov)
