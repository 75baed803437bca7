"""Evidential classification (Dirichlet) and regression (NIG) math.

Pure functions over parameter arrays: expected probabilities, uncertainty
measures, and the training losses with analytic gradients. Nothing here
touches a network; the same functions parameterize the synthetic perception
simulator and the information matrices of the localizer.

All Dirichlet functions accept a single parameter vector ``(N,)`` or a raster
batch ``(..., N)``; NIG functions broadcast over numpy scalars/arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

DEFAULT_DET_WEIGHT = 0.04   # regularizer scale for the detection loss
DEFAULT_TASK_WEIGHT = 15.0  # detection-vs-semantic scale in the combined loss


@dataclass(frozen=True)
class DirichletParams:
    """Per-class concentration alpha = evidence + 1, alpha_i >= 1."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("alpha must be a vector with at least 2 classes")
        if np.any(a < 1.0):
            raise ValueError("alpha entries must be >= 1 (nonnegative evidence)")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @property
    def num_classes(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class NigParams:
    """Normal-Inverse-Gamma parameters (gamma, upsilon, alpha, beta)."""

    gamma: float
    upsilon: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.upsilon > 0 and self.alpha > 1 and self.beta > 0):
            raise ValueError("require upsilon > 0, alpha > 1, beta > 0")


class DirichletRaster:
    """Per-pixel Dirichlet parameters with a shared class count."""

    def __init__(self, alpha: np.ndarray):
        a = np.asarray(alpha, dtype=float)
        if a.ndim != 3:
            raise ValueError("alpha raster must have shape (height, width, classes)")
        if np.any(a < 1.0):
            raise ValueError("alpha entries must be >= 1")
        self.alpha = a

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[2]

    def expected_prob(self) -> np.ndarray:
        return dirichlet_expected_prob(self.alpha)

    def uncertainty(self) -> np.ndarray:
        return dirichlet_uncertainty(self.alpha)

    def argmax_class(self) -> np.ndarray:
        return np.argmax(self.alpha, axis=-1)


def _alpha_array(d) -> np.ndarray:
    if isinstance(d, DirichletParams):
        return d.alpha
    if isinstance(d, DirichletRaster):
        return d.alpha
    return np.asarray(d, dtype=float)


def dirichlet_expected_prob(d) -> np.ndarray:
    """Expected class probabilities p_i = alpha_i / sum(alpha)."""
    a = _alpha_array(d)
    return a / a.sum(axis=-1, keepdims=True)


def dirichlet_uncertainty(d):
    """Vacuity-style uncertainty u = N / sum(alpha), 1 at zero evidence."""
    a = _alpha_array(d)
    return a.shape[-1] / a.sum(axis=-1)


def annealing_coefficient(iteration: int, iters_per_epoch: int) -> float:
    """Schedule min(1, t/4) with t = iteration / iters_per_epoch."""
    if iters_per_epoch <= 0:
        raise ValueError("iters_per_epoch must be positive")
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    return min(1.0, iteration / iters_per_epoch / 4.0)


def _kl_to_uniform(alpha_tilde: np.ndarray):
    """KL( Dir(alpha_tilde) || Dir(1) ), batched over the leading axes."""
    s = alpha_tilde.sum(axis=-1)
    n = alpha_tilde.shape[-1]
    return (gammaln(s) - gammaln(n) - gammaln(alpha_tilde).sum(axis=-1)
            + ((alpha_tilde - 1.0) * (digamma(alpha_tilde) - digamma(s)[..., None])).sum(axis=-1))


def dirichlet_loss(d, y, lam_s: float):
    """Per-pixel semantic loss: sum-of-squares term + lam_s * KL regularizer.

    The sum-of-squares term is sum_j (y_j - p_j)^2 + p_j(1 - p_j)/(S + 1);
    the KL term measures Dir(alpha~) against the uniform Dirichlet, where
    alpha~ = y + (1 - y) * alpha removes the evidence of the true class.
    Broadcasts over leading axes of alpha/y.
    """
    a = _alpha_array(d)
    y = np.asarray(y, dtype=float)
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    sq = ((y - p) ** 2).sum(axis=-1)
    var = (p * (1.0 - p)).sum(axis=-1) / (s[..., 0] + 1.0)
    loss = sq + var
    if lam_s != 0.0:
        alpha_tilde = y + (1.0 - y) * a
        loss = loss + lam_s * _kl_to_uniform(alpha_tilde)
    return loss if loss.ndim else float(loss)


def dirichlet_loss_grad(d, y, lam_s: float) -> np.ndarray:
    """Analytic d(dirichlet_loss)/d(alpha); same shape as alpha."""
    a = _alpha_array(d)
    y = np.asarray(y, dtype=float)
    s = a.sum(axis=-1, keepdims=True)
    p = a / s
    # c_j = dL/dp_j holding S fixed; the variance term also depends on S directly
    c = -2.0 * (y - p) + (1.0 - 2.0 * p) / (s + 1.0)
    grad = (c - (c * p).sum(axis=-1, keepdims=True)) / s
    grad = grad - (p * (1.0 - p)).sum(axis=-1, keepdims=True) / (s + 1.0) ** 2
    if lam_s != 0.0:
        alpha_tilde = y + (1.0 - y) * a
        st = alpha_tilde.sum(axis=-1, keepdims=True)
        n = a.shape[-1]
        kl_grad = ((alpha_tilde - 1.0) * polygamma(1, alpha_tilde)
                   - (st - n) * polygamma(1, st))
        grad = grad + lam_s * (1.0 - y) * kl_grad
    return grad


def semantic_loss(raster: DirichletRaster, labels: np.ndarray, lam_s: float) -> float:
    """Total semantic loss over a raster: sum of independent per-pixel terms."""
    onehot = np.eye(raster.num_classes)[np.asarray(labels, dtype=int)]
    return float(dirichlet_loss(raster.alpha, onehot, lam_s).sum())


# ---------------------------------------------------------------------------
# NIG regression

def _nig_arrays(n):
    if isinstance(n, NigParams):
        return n.gamma, n.upsilon, n.alpha, n.beta
    return n


def nig_uncertainties(n):
    """(aleatoric, epistemic) = (beta/(alpha-1), aleatoric/upsilon)."""
    gamma, upsilon, alpha, beta = _nig_arrays(n)
    ua = beta / (np.asarray(alpha, dtype=float) - 1.0)
    return ua, ua / upsilon


def nig_nll(n, y):
    """Negative log-likelihood of y under the NIG's Student-t marginal."""
    gamma, upsilon, alpha, beta = _nig_arrays(n)
    omega = 2.0 * beta * (1.0 + upsilon)
    return (0.5 * np.log(math.pi / np.asarray(upsilon, dtype=float))
            - alpha * np.log(omega)
            + (alpha + 0.5) * np.log((y - gamma) ** 2 * upsilon + omega)
            + gammaln(alpha) - gammaln(alpha + 0.5))


def nig_nll_grad(n, y) -> np.ndarray:
    """Gradient of nig_nll w.r.t. (gamma, upsilon, alpha, beta)."""
    gamma, upsilon, alpha, beta = _nig_arrays(n)
    r = y - gamma
    omega = 2.0 * beta * (1.0 + upsilon)
    a_term = r * r * upsilon + omega
    d_gamma = (alpha + 0.5) * (-2.0 * r * upsilon) / a_term
    d_upsilon = (-0.5 / upsilon - alpha * 2.0 * beta / omega
                 + (alpha + 0.5) * (r * r + 2.0 * beta) / a_term)
    d_alpha = -np.log(omega) + np.log(a_term) + digamma(alpha) - digamma(alpha + 0.5)
    d_beta = (-alpha * 2.0 * (1.0 + upsilon) / omega
              + (alpha + 0.5) * 2.0 * (1.0 + upsilon) / a_term)
    return np.array([d_gamma, d_upsilon, d_alpha, d_beta])


def nig_regularizer(n, y):
    """Evidence-scaled error penalty |y - gamma| * (2*upsilon + alpha)."""
    gamma, upsilon, alpha, _ = _nig_arrays(n)
    return np.abs(y - gamma) * (2.0 * upsilon + alpha)


def nig_regularizer_grad(n, y) -> np.ndarray:
    """Gradient of nig_regularizer w.r.t. (gamma, upsilon, alpha, beta)."""
    gamma, upsilon, alpha, _ = _nig_arrays(n)
    sgn = np.sign(gamma - y)
    return np.array([sgn * (2.0 * upsilon + alpha),
                     2.0 * np.abs(y - gamma),
                     np.abs(y - gamma),
                     np.zeros_like(np.asarray(gamma, dtype=float))])


def detection_loss(boxes, lam_det: float = DEFAULT_DET_WEIGHT) -> float:
    """Total box-regression loss: sum over boxes/edges of NLL + lam_det * reg.

    ``boxes`` is an iterable of (edges, target) where edges is a sequence of
    four NigParams for (x_min, y_min, x_max, y_max) and target the matching
    four true edge values.
    """
    if lam_det <= 0:
        raise ValueError("lam_det must be positive")
    total = 0.0
    for edges, target in boxes:
        for p, t in zip(edges, target):
            total += float(nig_nll(p, t)) + lam_det * float(nig_regularizer(p, t))
    return total


def combined_loss(sem: float, det: float, lam: float = DEFAULT_TASK_WEIGHT) -> float:
    """Overall loss sem + lam * det (the two tasks live on different scales)."""
    return sem + lam * det
