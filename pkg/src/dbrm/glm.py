"""Generalized linear models: IRLS fitting and marginal likelihoods.

Two families are supported, both with canonical links:

``gaussian``
    identity link; ``beta`` and ``sigma^2`` are integrated out under
    ``pi(sigma^2) = sigma^-2`` and the Jeffreys prior
    ``|X'X / sigma^2|^(1/2)`` on ``beta``, which gives

        log p(y) = -(n - k)/2 log(2 pi) + lgamma(n/2) - n/2 log(RSS/2)

    for a design with ``k`` columns (intercept included).

``bernoulli``
    logit link; Laplace approximation around the MLE with the Jeffreys prior
    ``|J(beta)|^(1/2)``.  The determinants cancel and

        log p(y) ~= loglik(beta_hat) + k/2 log(2 pi).

Design matrices always carry the intercept in column 0.  Non-intercept
columns are centred and scaled internally; coefficients are reported on
the original scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln, log_expit

LOG_2PI = math.log(2.0 * math.pi)

MAX_ITER = 100
DEVIANCE_TOL = 1e-8
GRADIENT_TOL = 1e-6
COEF_CAP = 30.0
COLLINEAR_TOL = 1e-8
PERFECT_FIT_TOL = 1e-12


class ScoreUnavailable(ArithmeticError):
    """Raised when a model cannot be fitted (collinearity, separation, ...)."""


@dataclass(frozen=True)
class Family:
    name: str

    @property
    def is_gaussian(self) -> bool:
        return self.name == "gaussian"

    def inverse_link(self, eta):
        return eta if self.is_gaussian else expit(eta)

    def __str__(self):
        return self.name


GAUSSIAN = Family("gaussian")
BERNOULLI = Family("bernoulli")
FAMILIES = {"gaussian": GAUSSIAN, "bernoulli": BERNOULLI, "binomial": BERNOULLI, "logistic": BERNOULLI}


def get_family(family: Family | str) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[family.lower()]
    except KeyError:
        raise ValueError(f"unknown family {family!r}") from None


@dataclass
class FitResult:
    coefficients: np.ndarray
    log_likelihood: float
    observed_information: np.ndarray
    converged: bool
    iterations: int
    rss: float = float("nan")


# ---------------------------------------------------------------------------
# helpers


def _standardize(design: np.ndarray):
    design = np.asarray(design, dtype=float)
    if design.ndim != 2 or design.shape[1] < 1:
        raise ValueError("design must be a 2-D matrix with an intercept column")
    if not np.all(design[:, 0] == 1.0):
        raise ValueError("column 0 of the design must be the intercept")
    body = design[:, 1:]
    mean = body.mean(axis=0)
    centred = body - mean
    scale = np.sqrt(np.mean(centred**2, axis=0))
    if np.any(scale == 0):
        raise ScoreUnavailable("constant column in design")
    Z = np.empty_like(design)
    Z[:, 0] = 1.0
    Z[:, 1:] = centred / scale
    return Z, mean, scale


def _unstandardize(b: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    beta = np.empty_like(b)
    beta[1:] = b[1:] / scale
    beta[0] = b[0] - np.dot(beta[1:], mean)
    return beta


def _check_rank(Z: np.ndarray) -> None:
    # columns of Z after the first are centred with unit rms, so R_jj^2 / n is
    # the fraction of column j left after regressing on the earlier columns
    k = Z.shape[1]
    if k > Z.shape[0]:
        raise ScoreUnavailable("more columns than observations")
    if k == 1:
        return
    r = np.linalg.qr(Z[:, 1:], mode="r")
    d = np.abs(np.diag(r)) / math.sqrt(Z.shape[0])
    if d.size and d.min() < COLLINEAR_TOL:
        raise ScoreUnavailable("collinear design columns")


def _bernoulli_ll(y: np.ndarray, eta: np.ndarray) -> float:
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def log_likelihood(family: Family | str, design: np.ndarray, y: np.ndarray, beta: np.ndarray,
                   sigma2: float | None = None) -> float:
    family = get_family(family)
    eta = np.asarray(design, dtype=float) @ beta
    y = np.asarray(y, dtype=float)
    if family.is_gaussian:
        n = y.size
        rss = float(np.sum((y - eta) ** 2))
        if sigma2 is None:
            sigma2 = rss / n
        return -0.5 * n * math.log(2 * math.pi * sigma2) - rss / (2 * sigma2)
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def score_vector(family: Family | str, design: np.ndarray, y: np.ndarray, beta: np.ndarray,
                 sigma2: float = 1.0) -> np.ndarray:
    """Gradient of the log-likelihood with respect to ``beta``."""
    family = get_family(family)
    design = np.asarray(design, dtype=float)
    eta = design @ beta
    resid = np.asarray(y, dtype=float) - family.inverse_link(eta)
    g = design.T @ resid
    return g / sigma2 if family.is_gaussian else g


# ---------------------------------------------------------------------------
# fitting


def fit_mle(family: Family | str, design: np.ndarray, y: np.ndarray) -> FitResult:
    """Maximum likelihood by iteratively reweighted least squares.

    Raises :class:`ScoreUnavailable` for singular designs.  Non-convergence
    and quasi-separation are reported through ``converged=False``.
    """
    family = get_family(family)
    y = np.asarray(y, dtype=float)
    Z, mean, scale = _standardize(design)
    _check_rank(Z)
    n, k = Z.shape
    if family.is_gaussian:
        b, *_ = np.linalg.lstsq(Z, y, rcond=None)
        resid = y - Z @ b
        rss = float(resid @ resid)
        beta = _unstandardize(b, mean, scale)
        sigma2 = rss / n if rss > 0 else np.finfo(float).tiny
        X = np.asarray(design, dtype=float)
        info = X.T @ X / sigma2
        ll = -0.5 * n * (math.log(2 * math.pi * sigma2) + 1.0)
        return FitResult(beta, ll, info, True, 1, rss)

    b = np.zeros(k)
    p0 = min(max(y.mean(), 1e-10), 1 - 1e-10)
    b[0] = math.log(p0 / (1 - p0))
    eta = Z @ b
    ll = _bernoulli_ll(y, eta)
    ll_prev = -math.inf
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = expit(eta)
        grad = Z.T @ (y - mu)
        if 2.0 * (ll - ll_prev) < DEVIANCE_TOL and np.abs(grad).max() < GRADIENT_TOL:
            converged = True
            break
        w = mu * (1.0 - mu)
        H = (Z.T * w) @ Z
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        # step halving keeps the log-likelihood from decreasing
        t = 1.0
        for _ in range(30):
            b_new = b + t * step
            eta_new = Z @ b_new
            ll_new = _bernoulli_ll(y, eta_new)
            if ll_new >= ll - 1e-12:
                break
            t *= 0.5
        b, eta, ll_prev, ll = b_new, eta_new, ll, ll_new
        if np.abs(b).max() > COEF_CAP:
            break
    beta = _unstandardize(b, mean, scale)
    X = np.asarray(design, dtype=float)
    eta = X @ beta
    mu = expit(eta)
    info = (X.T * (mu * (1 - mu))) @ X
    return FitResult(beta, _bernoulli_ll(y, eta), info, converged, it)


def gaussian_log_marginal(rss: float, n: int, k: int) -> float:
    if n <= k:
        raise ScoreUnavailable("need more observations than columns")
    if not rss > 0:
        raise ScoreUnavailable("perfect fit: residual sum of squares is zero")
    return -0.5 * (n - k) * LOG_2PI + gammaln(0.5 * n) - 0.5 * n * math.log(0.5 * rss)


FAST_PIVOT_TOL = 1e-6


def standardized_column(x: np.ndarray) -> np.ndarray:
    """Centre ``x`` and scale it to unit root mean square."""
    c = np.asarray(x, dtype=float) - np.mean(x)
    scale = math.sqrt(float(c @ c) / c.size)
    if scale == 0.0:
        raise ScoreUnavailable("constant column in design")
    return c / scale


def gaussian_log_marginal_fast(Z: np.ndarray, yc: np.ndarray) -> float | None:
    """Gaussian log marginal from standardized columns ``Z`` and centred ``y``.

    Uses a Cholesky factor of ``Z'Z``.  Returns ``None`` when a pivot is too
    small for the Gram route to be trusted; callers then use :func:`log_marginal`.
    """
    n, k = Z.shape
    return gaussian_log_marginal_gram(Z.T @ Z, Z.T @ yc, float(yc @ yc), n)


def gaussian_log_marginal_gram(G: np.ndarray, zy: np.ndarray, yy: float, n: int) -> float | None:
    """As :func:`gaussian_log_marginal_fast` but from ``Z'Z``, ``Z'y`` and ``y'y``."""
    k = G.shape[0]
    if k + 1 >= n:
        return None
    if k == 0:
        return gaussian_log_marginal(yy, n, 1)
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(L)) / math.sqrt(n) < FAST_PIVOT_TOL:
        return None
    c = solve_triangular(L, zy, lower=True, check_finite=False)
    rss = yy - float(c @ c)
    if not rss > 1e-10 * yy:
        return None
    return gaussian_log_marginal(rss, n, k + 1)


def log_marginal(family: Family | str, design: np.ndarray, y: np.ndarray,
                 laplace_2pi: bool = True) -> float:
    """Log marginal likelihood of ``y`` under the GLM with this design.

    ``laplace_2pi=False`` drops the ``k/2 log(2 pi)`` Laplace constant for
    the logistic family.
    """
    family = get_family(family)
    fit = fit_mle(family, design, y)
    if not fit.converged:
        raise ScoreUnavailable("IRLS did not converge")
    n, k = np.shape(design)
    if family.is_gaussian:
        yc = np.asarray(y, dtype=float) - np.mean(y)
        if fit.rss <= PERFECT_FIT_TOL * float(yc @ yc):
            raise ScoreUnavailable("perfect fit: residual sum of squares is zero")
        return gaussian_log_marginal(fit.rss, n, k)
    return fit.log_likelihood + (0.5 * k * LOG_2PI if laplace_2pi else 0.0)


def fit_projection_weights(children_values: np.ndarray, y: np.ndarray,
                           family: Family | str) -> tuple[float, np.ndarray]:
    """Intercept and weights of the GLM of ``y`` on the children columns.

    Raises :class:`ScoreUnavailable` when the fit is singular or does not
    converge.
    """
    cols = np.asarray(children_values, dtype=float)
    if cols.ndim == 1:
        cols = cols[:, None]
    design = np.column_stack([np.ones(cols.shape[0]), cols])
    fit = fit_mle(family, design, y)
    if not fit.converged or not np.all(np.isfinite(fit.coefficients)):
        raise ScoreUnavailable("projection weight fit failed")
    return float(fit.coefficients[0]), fit.coefficients[1:].copy()


def predict_mean(family: Family | str, coefficients: np.ndarray, design_row: np.ndarray):
    """Inverse link of the linear predictor (vectorised over rows)."""
    family = get_family(family)
    eta = np.asarray(design_row, dtype=float) @ np.asarray(coefficients, dtype=float)
    return family.inverse_link(eta)
