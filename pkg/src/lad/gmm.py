"""Two-component 1-D Gaussian mixture fitted by EM.

The fit is deterministic: means start at the sample min and max, both
standard deviations at half the sample standard deviation, and the weights
at one half each. Because that initialisation is affine-equivariant, so is
the whole fit (up to the variance floor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

SIGMA_FLOOR = 1e-6
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gmm2:
    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    pi1: float
    pi2: float
    degenerate: bool = False

    def params(self) -> dict:
        return {
            "mu1": self.mu1,
            "mu2": self.mu2,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "pi1": self.pi1,
            "pi2": self.pi2,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class FitReport:
    model: Gmm2
    iterations: int
    final_loglik: float
    degenerate: bool
    loglik_history: tuple[float, ...] = field(default=(), repr=False)


def _check_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot fit a mixture to zero samples")
    if np.isnan(x).any():
        raise ValueError("samples contain NaN")
    if not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    return x


def _log_components(x, mu, sigma, log_pi) -> np.ndarray:
    z = (x[:, None] - mu[None, :]) / sigma[None, :]
    return log_pi[None, :] - 0.5 * z * z - np.log(sigma)[None, :] - _LOG_SQRT_2PI


def _logsumexp2(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(a[:, 0], a[:, 1])


def fit_gmm2(samples, tol: float = 1e-6, max_iters: int = 100) -> FitReport:
    """Fit a two-component mixture by EM.

    Iterates until the log-likelihood changes by less than ``tol`` or
    ``max_iters`` EM steps have run. Components are returned sorted so that
    ``mu1 <= mu2``. A single sample, or all-equal samples, produce a
    degenerate report with both means at that value.
    """
    x = _check_samples(samples)
    lo, hi = float(x.min()), float(x.max())
    if x.size == 1 or lo == hi:
        model = Gmm2(lo, lo, SIGMA_FLOOR, SIGMA_FLOOR, 0.5, 0.5, degenerate=True)
        return FitReport(model, 0, float("nan"), True, ())

    n = x.size
    mu = np.array([lo, hi])
    s0 = max(float(x.std()) / 2.0, SIGMA_FLOOR)
    sigma = np.array([s0, s0])
    pi = np.array([0.5, 0.5])

    history = []
    it = 0
    with np.errstate(divide="ignore"):
        log_comp = _log_components(x, mu, sigma, np.log(pi))
        lse = np.logaddexp(log_comp[:, 0], log_comp[:, 1])
        ll = float(lse.sum())
        history.append(ll)
        while it < max_iters:
            it += 1
            resp = np.exp(log_comp - lse[:, None])
            nk = resp.sum(axis=0)
            # an emptied component keeps its parameters; any choice is an M-step optimum
            live = nk > 0.0
            safe_nk = np.where(live, nk, 1.0)
            new_mu = (x @ resp) / safe_nk
            d = x[:, None] - new_mu[None, :]
            new_sigma = np.maximum(np.sqrt((resp * d * d).sum(axis=0) / safe_nk), SIGMA_FLOOR)
            mu = np.where(live, new_mu, mu)
            sigma = np.where(live, new_sigma, sigma)
            pi = nk / n
            log_comp = _log_components(x, mu, sigma, np.log(pi))
            lse = np.logaddexp(log_comp[:, 0], log_comp[:, 1])
            ll_new = float(lse.sum())
            history.append(ll_new)
            done = abs(ll_new - ll) < tol
            ll = ll_new
            if done:
                break

    order = (0, 1) if mu[0] <= mu[1] else (1, 0)
    a, b = order
    p1 = float(pi[a])
    model = Gmm2(
        float(mu[a]), float(mu[b]), float(sigma[a]), float(sigma[b]), p1, 1.0 - p1
    )
    return FitReport(model, it, ll, False, tuple(history))


def loglik(samples, model: Gmm2) -> float:
    """Total log-likelihood of ``samples`` under a non-degenerate mixture."""
    if model.degenerate:
        raise ValueError("log-likelihood is undefined for a degenerate mixture")
    x = _check_samples(samples)
    with np.errstate(divide="ignore"):
        log_pi = np.log(np.array([model.pi1, model.pi2]))
    log_comp = _log_components(
        x, np.array([model.mu1, model.mu2]), np.array([model.sigma1, model.sigma2]), log_pi
    )
    return float(_logsumexp2(log_comp).sum())


def responsibilities(samples, model: Gmm2) -> np.ndarray:
    """Posterior component probabilities, shape ``(n, 2)``."""
    x = _check_samples(samples)
    if model.degenerate:
        return np.tile([1.0, 0.0], (x.size, 1))
    with np.errstate(divide="ignore"):
        log_pi = np.log(np.array([model.pi1, model.pi2]))
    log_comp = _log_components(
        x, np.array([model.mu1, model.mu2]), np.array([model.sigma1, model.sigma2]), log_pi
    )
    return np.exp(log_comp - _logsumexp2(log_comp)[:, None])


def posterior_split(samples, model: Gmm2) -> np.ndarray:
    """Boolean mask of samples more likely under the low-mean component."""
    r = responsibilities(samples, model)
    return r[:, 0] > r[:, 1]


def fisher_score(model: Gmm2) -> float:
    """Separation ``(mu2 - mu1)^2 / (sigma1^2 + sigma2^2)``; 0 for degenerate fits."""
    if model.degenerate:
        return 0.0
    return (model.mu2 - model.mu1) ** 2 / (model.sigma1**2 + model.sigma2**2)


class GaussianMixture2(BaseEstimator):
    """Estimator wrapper around :func:`fit_gmm2`.

    ``predict`` labels each sample 0 (low-mean component) or 1.
    """

    def __init__(self, tol=1e-6, max_iter=100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        self.report_ = fit_gmm2(np.asarray(X, dtype=float).reshape(-1), self.tol, self.max_iter)
        self.model_ = self.report_.model
        self.n_iter_ = self.report_.iterations
        self.degenerate_ = self.report_.degenerate
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return responsibilities(X, self.model_)

    def predict(self, X):
        return np.where(posterior_split(X, self.model_), 0, 1)

    def score(self, X, y=None):
        """Mean per-sample log-likelihood."""
        check_is_fitted(self, "model_")
        x = np.asarray(X, dtype=float).reshape(-1)
        return loglik(x, self.model_) / x.size

    def fisher_score(self):
        check_is_fitted(self, "model_")
        return fisher_score(self.model_)
