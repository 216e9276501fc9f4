"""Gaussian process regression with a Matern 5/2 kernel and per-dimension length scales.

Targets are standardized inside ``fit`` so that fixed kernel hyperparameters
(signal variance 1, small noise) stay meaningful whatever the reward scale.
Inputs stay in raw epoch units because the length scales are expressed in
epochs.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from ..models.schemas import KernelParams
from .exceptions import InvalidArgumentError, NumericalFailureError

logger = logging.getLogger(__name__)

SQRT5 = np.sqrt(5.0)
JITTER_LADDER = tuple(10.0**e for e in range(-8, -1))  # 1e-8 ... 1e-2
DEGENERATE_STD = 1e-12


@dataclass(frozen=True, eq=False)
class GPModel:
    """Fitted posterior; immutable and safe to share between threads"""

    X: np.ndarray
    y_raw: np.ndarray
    y_mean: float
    y_std: float
    chol: np.ndarray
    alpha: np.ndarray
    kernel: KernelParams
    prior_mean: float
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


class PosteriorGradient(NamedTuple):
    dmean: np.ndarray
    dstd: np.ndarray
    degenerate: bool


def _length_scales(params: KernelParams) -> np.ndarray:
    return np.asarray(params.length_scales, dtype=float)


def _matern_from_r(r: np.ndarray, signal_variance: float) -> np.ndarray:
    return signal_variance * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * np.exp(-SQRT5 * r)


def matern52(a, b, params: KernelParams) -> float:
    """Covariance between two points"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ls = _length_scales(params)
    if a.shape != ls.shape or b.shape != ls.shape:
        raise InvalidArgumentError(
            f"dimension mismatch: a{a.shape}, b{b.shape}, length_scales{ls.shape}"
        )
    r = np.sqrt(np.sum(((a - b) / ls) ** 2))
    return float(_matern_from_r(r, params.signal_variance))


def kernel_matrix(A: np.ndarray, B: np.ndarray, params: KernelParams) -> np.ndarray:
    """Covariance matrix between the rows of A and B"""
    ls = _length_scales(params)
    scaled = (A[:, None, :] - B[None, :, :]) / ls
    r = np.sqrt(np.sum(scaled * scaled, axis=-1))
    return _matern_from_r(r, params.signal_variance)


def _cholesky_with_jitter(K: np.ndarray) -> Tuple[np.ndarray, float]:
    try:
        return cholesky(K, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass

    eye = np.eye(K.shape[0])
    for jitter in JITTER_LADDER:
        try:
            chol = cholesky(K + jitter * eye, lower=True)
            logger.warning(f"Cholesky needed jitter {jitter:.0e} on a {K.shape[0]}x{K.shape[0]} kernel matrix")
            return chol, jitter
        except np.linalg.LinAlgError:
            continue

    eigvals = np.linalg.eigvalsh(K)
    raise NumericalFailureError(
        "Cholesky factorization failed after maximum jitter",
        diagnostics={
            "n": K.shape[0],
            "max_jitter": JITTER_LADDER[-1],
            "min_eigenvalue": float(eigvals[0]),
            "max_eigenvalue": float(eigvals[-1]),
            "condition": float(eigvals[-1] / eigvals[0]) if eigvals[0] > 0 else float("inf"),
        },
    )


def fit(X, y, kernel: KernelParams, prior_mean_raw: Optional[float] = None) -> GPModel:
    """Condition the GP on observations (X, y).

    ``prior_mean_raw`` is the constant prior mean in reward units. ``None``
    puts the prior mean at zero in standardized units, i.e. at mean(y).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, k = X.shape
    if n < 1:
        raise InvalidArgumentError("fit needs at least one observation")
    if y.shape[0] != n:
        raise InvalidArgumentError(f"{n} inputs but {y.shape[0]} targets")
    if k != len(kernel.length_scales):
        raise InvalidArgumentError(f"inputs have {k} dims, kernel has {len(kernel.length_scales)} length scales")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericalFailureError("non-finite training data", diagnostics={"n": n})

    y_mean = float(np.mean(y))
    y_std = float(np.std(y))
    if n < 2 or not y_std > 0:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    prior_mean = 0.0 if prior_mean_raw is None else (prior_mean_raw - y_mean) / y_std

    K = kernel_matrix(X, X, kernel) + kernel.noise_variance * np.eye(n)
    chol, jitter = _cholesky_with_jitter(K)
    alpha = cho_solve((chol, True), ys - prior_mean)

    logger.debug(f"Fitted GP on {n} points (y_mean={y_mean:.3f}, y_std={y_std:.3f}, jitter={jitter})")
    return GPModel(
        X=X,
        y_raw=y,
        y_mean=y_mean,
        y_std=y_std,
        chol=chol,
        alpha=alpha,
        kernel=kernel,
        prior_mean=prior_mean,
        jitter=jitter,
    )


def _as_query(model: GPModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise InvalidArgumentError(f"query has shape {x.shape}, model expects ({model.dim},)")
    return x


def posterior(model: GPModel, x) -> Tuple[float, float]:
    """Posterior mean and standard deviation at x, in reward units"""
    x = _as_query(model, x)
    kstar = kernel_matrix(x[None, :], model.X, model.kernel)[0]
    mean_std_units = model.prior_mean + kstar @ model.alpha
    v = solve_triangular(model.chol, kstar, lower=True)
    var = max(model.kernel.signal_variance - float(v @ v), 0.0)
    return (
        float(model.y_mean + model.y_std * mean_std_units),
        float(model.y_std * np.sqrt(var)),
    )


def posterior_batch(model: GPModel, Xq) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized posterior over the rows of Xq"""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.dim:
        raise InvalidArgumentError(f"queries have {Xq.shape[1]} dims, model expects {model.dim}")
    Ks = kernel_matrix(Xq, model.X, model.kernel)
    mean = model.prior_mean + Ks @ model.alpha
    V = solve_triangular(model.chol, Ks.T, lower=True)
    var = np.maximum(model.kernel.signal_variance - np.sum(V * V, axis=0), 0.0)
    return model.y_mean + model.y_std * mean, model.y_std * np.sqrt(var)


def posterior_gradient(model: GPModel, x) -> PosteriorGradient:
    """Gradients of the posterior mean and std with respect to x.

    The std is not differentiable where it vanishes; there the std gradient
    is returned as zeros with ``degenerate`` set.
    """
    x = _as_query(model, x)
    ls = _length_scales(model.kernel)
    s2 = model.kernel.signal_variance

    diff = x[None, :] - model.X
    scaled = diff / ls
    r = np.sqrt(np.sum(scaled * scaled, axis=1))
    decay = np.exp(-SQRT5 * r)
    kstar = _matern_from_r(r, s2)
    # d k / d x_i = -(5/3) s2 (1 + sqrt5 r) e^{-sqrt5 r} (x_i - X_i) / l_i^2
    J = (-(5.0 / 3.0) * s2 * (1.0 + SQRT5 * r) * decay)[:, None] * diff / (ls * ls)

    dmean = model.y_std * (J.T @ model.alpha)

    v = solve_triangular(model.chol, kstar, lower=True)
    var = s2 - float(v @ v)
    if var <= 0.0 or np.sqrt(var) < DEGENERATE_STD:
        return PosteriorGradient(dmean=dmean, dstd=np.zeros_like(x), degenerate=True)

    w = solve_triangular(model.chol.T, v, lower=False)
    dvar = -2.0 * (J.T @ w)
    dstd = model.y_std * dvar / (2.0 * np.sqrt(var))
    return PosteriorGradient(dmean=dmean, dstd=dstd, degenerate=False)
