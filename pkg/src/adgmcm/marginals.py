"""
Rank transform, univariate mixture CDF and its grid-based inverse.

The latent ("pseudo") observations of a copula fit are
``y[:, j] = Psi_j^{-1}(u[:, j])`` where ``Psi_j`` is the j-th marginal CDF of
the current Gaussian mixture. ``Psi_j`` has no closed-form inverse, so it is
tabulated on a grid and inverted by piecewise-linear interpolation.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import DegenerateColumn, EmptyGrid, InvalidData
from .model import DataMatrix, as_matrix

log = logging.getLogger(__name__)

ERF_MODES = ("exact", "as3")

# three-term rational approximation, Abramowitz & Stegun 7.1.25
_AS_P = 0.47047
_AS_A = (0.3480242, -0.0958798, 0.7478556)

GRID_HALF_WIDTH = 5.0
_MAX_EXTENSIONS = 40


def scaled_ranks(data):
    """Column-wise average ranks divided by ``n + 1``.

    Parameters
    ----------
    data : DataMatrix or array_like
        Raw n x p observations, n >= 2.

    Returns
    -------
    DataMatrix
        Role ``rank``; every entry lies strictly inside (0, 1).
    """
    data = as_matrix(data, "raw")
    if data.n < 2:
        raise InvalidData("need at least two observations to rank")
    x = data.values
    for j in range(data.p):
        if np.all(x[:, j] == x[0, j]):
            raise DegenerateColumn(f"column {j} is constant")
    ranks = rankdata(x, method="average", axis=0)
    return DataMatrix(ranks / (data.n + 1.0), "rank")


def normal_cdf(z, erf="exact"):
    """Standard normal CDF, either to full precision or via the A&S 3-term erf."""
    z = np.asarray(z, dtype=float)
    if erf == "exact":
        return ndtr(z)
    if erf != "as3":
        raise ValueError(f"unknown erf mode {erf!r}")
    x = np.abs(z) / np.sqrt(2.0)
    t = 1.0 / (1.0 + _AS_P * x)
    a1, a2, a3 = _AS_A
    erf_x = 1.0 - (a1 * t + a2 * t ** 2 + a3 * t ** 3) * np.exp(-x * x)
    return 0.5 * (1.0 + np.sign(z) * erf_x)


def marginal_cdf_values(y, mu, sd, weights, erf="exact"):
    """Mixture CDF ``sum_k w_k Phi((y - mu_k) / sd_k)`` at each entry of ``y``."""
    y = np.asarray(y, dtype=float)
    z = (y[..., None] - mu) / sd
    return normal_cdf(z, erf) @ weights


def marginal_cdf(y, j, params, erf="exact"):
    """CDF of the j-th marginal of the latent mixture, evaluated at ``y``."""
    mu = params.means[:, j]
    sd = np.sqrt(params.variances[:, j])
    out = marginal_cdf_values(y, mu, sd, params.weights, erf)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class InverseCdfGrid:
    """Tabulated marginal CDF: strictly increasing ``abscissae`` and ``ordinates``."""

    abscissae: np.ndarray
    ordinates: np.ndarray
    points_per_component: int

    @property
    def size(self):
        return self.abscissae.shape[0]


def build_inverse_grid(j, params, points_per_component=1000, erf="exact",
                       u_range=None):
    """Tabulate the j-th marginal CDF for inversion.

    Each component contributes ``points_per_component`` equidistant points on
    ``mu_k^j +/- 5 sd_k^j``; the union is sorted and deduplicated. The ends are
    then pushed outward (one largest-sd step at a time) until the table covers
    ``[1/m, 1 - 1/m]`` with m the grid size, widened to ``u_range`` if given.
    """
    if points_per_component < 2:
        raise ValueError("points_per_component must be at least 2")
    mu = params.means[:, j]
    sd = np.sqrt(params.variances[:, j])
    w = params.weights
    pts = np.concatenate([
        np.linspace(m - GRID_HALF_WIDTH * s, m + GRID_HALF_WIDTH * s,
                    points_per_component)
        for m, s in zip(mu, sd)])
    x = np.unique(pts)
    u = marginal_cdf_values(x, mu, sd, w, erf)

    lo_target = 1.0 / x.size
    hi_target = 1.0 - 1.0 / x.size
    if u_range is not None:
        lo_target = min(lo_target, u_range[0])
        hi_target = max(hi_target, u_range[1])
    step = GRID_HALF_WIDTH * sd.max() / 10.0
    lo_x, hi_x = [], []
    left, right = x[0], x[-1]
    u_left, u_right = u[0], u[-1]
    for _ in range(_MAX_EXTENSIONS):
        if u_left <= lo_target:
            break
        left -= step
        u_left = float(marginal_cdf_values(left, mu, sd, w, erf))
        lo_x.append(left)
    for _ in range(_MAX_EXTENSIONS):
        if u_right >= hi_target:
            break
        right += step
        u_right = float(marginal_cdf_values(right, mu, sd, w, erf))
        hi_x.append(right)
    if lo_x or hi_x:
        x = np.concatenate([np.array(lo_x[::-1]), x, np.array(hi_x)])
        u = marginal_cdf_values(x, mu, sd, w, erf)

    # drop saturated tail points so both axes are strictly increasing
    keep = np.concatenate([[True], np.diff(u) > 0.0])
    keep &= (u > 0.0) & (u < 1.0)
    x, u = x[keep], u[keep]
    x.setflags(write=False)
    u.setflags(write=False)
    return InverseCdfGrid(x, u, points_per_component)


def invert(u, grid):
    """Interpolated inverse CDF and the number of clamped queries."""
    if grid.size == 0:
        raise EmptyGrid("inverse CDF grid has no points")
    u = np.asarray(u, dtype=float)
    clamped = int(np.count_nonzero((u < grid.ordinates[0]) | (u > grid.ordinates[-1])))
    return np.interp(u, grid.ordinates, grid.abscissae), clamped


def inverse_cdf(u, grid):
    """Inverse marginal CDF by linear interpolation on ``grid``.

    Queries outside the tabulated range are clamped to the end abscissae and
    reported through the module logger.
    """
    y, clamped = invert(u, grid)
    if clamped:
        log.warning("%d quantile queries fell outside the grid and were clamped", clamped)
    return float(y) if np.ndim(y) == 0 else y


def reset_latent_counted(ranks, params, points_per_component=1000, erf="exact"):
    """Latent observations for ``ranks`` plus the total clamp count."""
    ranks = as_matrix(ranks, "rank")
    u = ranks.values
    if u.shape[1] != params.dim:
        raise InvalidData(f"ranks have {u.shape[1]} columns, params have {params.dim}")
    y = np.empty_like(u)
    clamps = 0
    for j in range(u.shape[1]):
        col = u[:, j]
        grid = build_inverse_grid(j, params, points_per_component, erf,
                                  u_range=(col.min(), col.max()))
        y[:, j], c = invert(col, grid)
        clamps += c
    return DataMatrix(y, "latent"), clamps


def reset_latent(ranks, params, points_per_component=1000, erf="exact"):
    """Map scaled ranks to latent observations under ``params`` (the reset step)."""
    latent, clamps = reset_latent_counted(ranks, params, points_per_component, erf)
    if clamps:
        log.warning("%d rank values fell outside the inverse-CDF grid", clamps)
    return latent


def exact_latent(ranks, params, tol=1e-13):
    """Latent observations by root-finding on the exact CDF (no grid).

    Bisection on each entry; used as a grid-free reference.
    """
    ranks = as_matrix(ranks, "rank")
    u = ranks.values
    y = np.empty_like(u)
    for j in range(u.shape[1]):
        mu = params.means[:, j]
        sd = np.sqrt(params.variances[:, j])
        w = params.weights
        lo = np.full(u.shape[0], (mu - 40 * sd).min())
        hi = np.full(u.shape[0], (mu + 40 * sd).max())
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = marginal_cdf_values(mid, mu, sd, w) < u[:, j]
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        y[:, j] = 0.5 * (lo + hi)
    return DataMatrix(y, "latent")
