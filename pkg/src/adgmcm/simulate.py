"""
Seeded data generators for the three simulation families.

* ``gmcm``: draws from a Gaussian mixture copula with chosen marginals.
* ``non_gaussian_product``: three 2-d clusters, each an MVN draw scaled by an
  independent positive scalar (uniform, Weibull or gamma).
* ``repro``: the two-component reproducibility model on the uniform scale.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InvalidParams, InvalidSetting
from .marginals import marginal_cdf_values
from .model import DataMatrix, GmcmParams

# (rho1, rho3, weibull scale, weibull shape, gamma scale, gamma shape)
NON_GAUSSIAN_SETTINGS = {
    1: (0.0, 0.0, 1.0, 2.0, 1.0, 2.0),
    2: (0.45, 0.45, 1.0, 2.0, 1.0, 2.0),
    3: (0.0, 0.0, 1.0, 2.0, 2.0, 2.0),
    4: (0.45, 0.45, 1.0, 2.0, 2.0, 2.0),
    5: (0.0, 0.0, 2.0, 2.0, 1.0, 2.0),
    6: (0.45, 0.45, 2.0, 2.0, 1.0, 2.0),
    7: (0.0, 0.0, 2.0, 2.0, 2.0, 2.0),
    8: (0.45, 0.45, 2.0, 2.0, 2.0, 2.0),
}

# well-separated / not well-separated two-component settings
PARAM_RECOVERY_SETTINGS = {
    "well_separated": ((0.0, 0.0), (3.0, 3.0)),
    "not_well_separated": ((0.0, 0.0), (1.0, 1.0)),
}


@dataclass(frozen=True)
class Marginal:
    """Marginal law applied to the copula scale: identity, gamma or weibull."""

    family: str = "identity"
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.family not in ("identity", "gamma", "weibull"):
            raise InvalidParams(f"unknown marginal family {self.family!r}")
        if self.family != "identity" and not (self.shape > 0 and self.scale > 0):
            raise InvalidParams("marginal shape and scale must be positive")

    def ppf(self, u):
        if self.family == "identity":
            return u
        if self.family == "gamma":
            return stats.gamma.ppf(u, self.shape, scale=self.scale)
        return stats.weibull_min.ppf(u, self.shape, scale=self.scale)

    def to_dict(self):
        return {"family": self.family, "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class LabeledDataset:
    data: DataMatrix
    true_labels: np.ndarray
    true_params: dict = field(default_factory=dict)


def _simulate(weights, means, covariances, n, marginals, seed):
    weights = np.asarray(weights, dtype=float)
    means = np.asarray(means, dtype=float)
    covariances = np.asarray(covariances, dtype=float)
    p = means.shape[1]
    if n < 1:
        raise InvalidParams("n must be positive")
    if marginals is None:
        marginals = [Marginal()] * p
    if len(marginals) != p:
        raise InvalidParams(f"need {p} marginal specs, got {len(marginals)}")
    rng = np.random.default_rng(seed)
    z = rng.choice(len(weights), size=n, p=weights)
    chol = np.linalg.cholesky(covariances)
    eps = rng.standard_normal((n, p))
    y = means[z] + np.einsum("nab,nb->na", chol[z], eps)
    sd = np.sqrt(np.diagonal(covariances, axis1=1, axis2=2))
    u = np.column_stack([
        marginal_cdf_values(y[:, j], means[:, j], sd[:, j], weights) for j in range(p)])
    # keep u strictly inside (0, 1) so quantile functions stay finite
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    x = np.column_stack([m.ppf(u[:, j]) for j, m in enumerate(marginals)])
    return DataMatrix(x, "raw"), z + 1, marginals


def simulate_gmcm(params, n, marginals=None, seed=0):
    """Draw ``n`` observations from a Gaussian mixture copula.

    A component is chosen by weight, a latent vector is drawn from it, each
    coordinate is mapped through the latent marginal mixture CDF, and then
    through the inverse of the requested marginal law (``None`` keeps the
    uniform scale).
    """
    data, labels, marginals = _simulate(params.weights, params.means,
                                        params.covariances, n, marginals, seed)
    truth = {"family": "gmcm", "params": params.to_dict(),
             "marginals": [m.to_dict() for m in marginals]}
    return LabeledDataset(data, labels, truth)


def random_gmcm_params(K, p, seed=0):
    """Random mixture: uniform means in [-5, 5]^p, Dirichlet(1) weights and
    correlation matrices from normalized random factors."""
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.ones(K))
    # floor tiny weights so every component is represented at modest n
    weights = np.maximum(weights, 0.05)
    weights /= weights.sum()
    means = rng.uniform(-5.0, 5.0, size=(K, p))
    cov = np.empty((K, p, p))
    for k in range(K):
        a = rng.standard_normal((p, p))
        s = a @ a.T + 1e-3 * np.eye(p)
        d = np.sqrt(np.diag(s))
        cov[k] = s / np.outer(d, d)
    return GmcmParams(weights, means, cov)


def _cluster_sizes(n, k):
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def simulate_non_gaussian(setting, n, seed=0, per_coordinate=False):
    """Three-cluster product mixture for settings 1..8.

    Each point is an MVN draw multiplied by one positive scalar draw
    (``per_coordinate=True`` uses an independent scalar per coordinate).
    Clusters 1 and 3 share the MVN mean (-5, -5).
    """
    if setting not in NON_GAUSSIAN_SETTINGS:
        raise InvalidSetting(f"setting must be one of 1..8, got {setting!r}")
    if n < 3:
        raise InvalidParams("need n >= 3 for three clusters")
    rho1, rho3, sc1, sh1, sc2, sh2 = NON_GAUSSIAN_SETTINGS[setting]
    rng = np.random.default_rng(seed)
    clusters = [
        ((-5.0, -5.0), [[0.5, rho1], [rho1, 0.5]],
         lambda size: rng.uniform(0.0, 1.0, size)),
        ((2.0, 2.0), [[1.0, 0.0], [0.0, 5.0]],
         lambda size: sc1 * rng.weibull(sh1, size)),
        ((-5.0, -5.0), [[0.5, rho3], [rho3, 0.5]],
         lambda size: rng.gamma(sh2, sc2, size)),
    ]
    xs, labels = [], []
    for k, (size, (mean, cov, scalar)) in enumerate(zip(_cluster_sizes(n, 3), clusters)):
        mvn = rng.multivariate_normal(mean, cov, size=size)
        factor = scalar((size, 2)) if per_coordinate else scalar((size, 1))
        xs.append(mvn * factor)
        labels.append(np.full(size, k + 1))
    truth = {"family": "non_gaussian_product", "setting": setting,
             "rho1": rho1, "rho3": rho3, "weibull_scale": sc1, "weibull_shape": sh1,
             "gamma_scale": sc2, "gamma_shape": sh2, "per_coordinate": per_coordinate}
    return LabeledDataset(DataMatrix(np.vstack(xs), "raw"), np.concatenate(labels), truth)


def simulate_repro(rp, p, n, seed=0):
    """Reproducibility-model data on the uniform (copula) scale.

    ``rp.alpha1`` may be 1 here (every subject null); the mixture is sampled
    directly from the constrained means and covariances.
    """
    from .analysis import repro_arrays

    weights, means, cov = repro_arrays(rp, p)
    data, labels, _ = _simulate(weights, means, cov, n, None, seed)
    truth = {"family": "repro", "repro_params": rp.to_dict(), "p": p}
    return LabeledDataset(data, labels, truth)
