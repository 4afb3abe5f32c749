"""Gaussian-process regression with a squared-exponential kernel.

Zero prior mean, exact inference through a Cholesky factor of
``K + noise * I``. Observations can optionally be standardized before
fitting; the standardization constants live on the fitted model and all
posterior outputs are reported in the original units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from .errors import InputError, NumericalError, StateError

JITTER_LADDER = (0.0,) + tuple(10.0 ** e for e in range(-10, -3))


@dataclass(frozen=True)
class KernelHyper:
    """Hyperparameters of the SE kernel and the Gaussian likelihood."""

    signal_variance: float = 1.0
    length_scale: float = 1.0
    noise_variance: float = 0.0

    def __post_init__(self):
        if not self.signal_variance > 0:
            raise InputError(f"signal_variance must be > 0, got {self.signal_variance}")
        if not self.length_scale > 0:
            raise InputError(f"length_scale must be > 0, got {self.length_scale}")
        if not self.noise_variance >= 0:
            raise InputError(f"noise_variance must be >= 0, got {self.noise_variance}")

    def as_array(self):
        return np.array([self.signal_variance, self.length_scale, self.noise_variance])


@dataclass(frozen=True)
class Dataset:
    """Training inputs (n, d) and observations (n,)."""

    inputs: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.observations, dtype=float).ravel()
        if X.size == 0:
            X = X.reshape(0, X.shape[-1] if X.ndim == 2 else 0)
        if X.shape[0] != y.shape[0]:
            raise InputError(
                f"{X.shape[0]} inputs but {y.shape[0]} observations"
            )
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "observations", y)

    def __len__(self):
        return self.observations.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def append(self, x, y):
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if len(self) and x.shape[1] != self.dim:
            raise InputError(f"point of dimension {x.shape[1]}, dataset has {self.dim}")
        return Dataset(np.vstack([self.inputs, x]), np.append(self.observations, y))


@dataclass(frozen=True)
class GPModel:
    """A fitted GP. Immutable; safe to share between readers."""

    data: Dataset
    hyper: KernelHyper
    factor: np.ndarray  # lower Cholesky factor of K + (noise + jitter) I
    weights: np.ndarray  # (K + noise I)^-1 y_std
    jitter: float = 0.0
    y_mean: float = 0.0
    y_scale: float = 1.0
    normalized: bool = False

    @property
    def dim(self):
        return self.data.dim

    def _check_query(self, Q):
        Q = np.asarray(Q, dtype=float)
        single = Q.ndim <= 1
        Q = np.atleast_2d(Q)
        if Q.shape[1] != self.dim:
            raise InputError(f"query dimension {Q.shape[1]} != training dimension {self.dim}")
        return Q, single


def _check_pair(a, b):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def se_kernel(a, b, hyper: KernelHyper) -> float:
    """``signal_variance * exp(-|a - b|^2 / (2 l^2))``."""
    a, b = _check_pair(a, b)
    d2 = float(np.sum((a - b) ** 2))
    return hyper.signal_variance * np.exp(-0.5 * d2 / hyper.length_scale ** 2)


def kernel_matrix(A, B, hyper: KernelHyper):
    """Cross-covariance matrix between the rows of ``A`` and ``B``."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    d2 = cdist(A, B, "sqeuclidean")
    return hyper.signal_variance * np.exp(-0.5 * d2 / hyper.length_scale ** 2)


def _standardize(y, normalize):
    if not normalize or y.size == 0:
        return 0.0, 1.0
    mean = float(np.mean(y))
    scale = float(np.std(y)) if y.size > 1 else 0.0
    if not np.isfinite(scale) or scale <= 1e-12 * max(1.0, abs(mean)):
        scale = 1.0
    return mean, scale


def _cholesky_with_jitter(K):
    """Return (L, jitter) following the jitter ladder."""
    n = K.shape[0]
    last = None
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(n) if jitter else K)
        except np.linalg.LinAlgError:
            last = jitter
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
        last = jitter
    raise NumericalError(f"Cholesky failed up to jitter {last:g}", jitter=last)


def fit(data: Dataset, hyper: KernelHyper, normalize: bool = False) -> GPModel:
    """Factor the training covariance and cache the posterior weights.

    Parameters
    ----------
    data : Dataset
        Non-empty training set.
    hyper : KernelHyper
    normalize : bool
        Standardize observations (mean 0, unit sample std) before fitting.

    Raises
    ------
    InputError
        Empty dataset.
    NumericalError
        Factorization failed even at the largest jitter.
    """
    if len(data) == 0:
        raise InputError("cannot fit a GP to an empty dataset")
    y_mean, y_scale = _standardize(data.observations, normalize)
    y = (data.observations - y_mean) / y_scale
    K = kernel_matrix(data.inputs, data.inputs, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    L, jitter = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), y)
    return GPModel(
        data=data,
        hyper=hyper,
        factor=L,
        weights=alpha,
        jitter=jitter,
        y_mean=y_mean,
        y_scale=y_scale,
        normalized=normalize,
    )


def predict(model: GPModel, Q, return_std: bool = False):
    """Vectorized posterior at the rows of ``Q`` in original units.

    Returns ``(mean, var)`` or ``(mean, std)`` arrays of shape (q,).
    """
    if not isinstance(model, GPModel):
        raise StateError("model is not fitted")
    Q, _ = model._check_query(Q)
    Ks = kernel_matrix(Q, model.data.inputs, model.hyper)
    mean = Ks @ model.weights
    v = solve_triangular(model.factor, Ks.T, lower=True, check_finite=False)
    var = model.hyper.signal_variance - np.einsum("ij,ij->j", v, v)
    var = np.maximum(var, 0.0)
    mean = model.y_mean + model.y_scale * mean
    var = var * model.y_scale ** 2
    if return_std:
        return mean, np.sqrt(var)
    return mean, var


def posterior(model: GPModel, query):
    """Posterior mean and variance (clamped at 0) at a single query."""
    mean, var = predict(model, np.atleast_1d(np.asarray(query, dtype=float)).reshape(1, -1))
    return float(mean[0]), float(var[0])


def posterior_gradients(model: GPModel, query):
    """Mean, std and their gradients with respect to the query point.

    Returns
    -------
    mean, std : float
    dmean, dstd : ndarray (d,)
        ``dstd`` is zero where the std vanishes.
    """
    Q, _ = model._check_query(np.atleast_1d(np.asarray(query, dtype=float)).reshape(1, -1))
    q = Q[0]
    X = model.data.inputs
    k = kernel_matrix(Q, X, model.hyper)[0]  # (n,)
    diff = q[None, :] - X  # (n, d)
    dk = -(k[:, None] * diff) / model.hyper.length_scale ** 2  # (n, d)
    mean_s = k @ model.weights
    dmean_s = dk.T @ model.weights
    v = cho_solve((model.factor, True), k)  # (K + s I)^-1 k
    var_s = max(model.hyper.signal_variance - k @ v, 0.0)
    dvar_s = -2.0 * dk.T @ v
    std_s = np.sqrt(var_s)
    dstd_s = dvar_s / (2.0 * std_s) if std_s > 1e-12 else np.zeros_like(dvar_s)
    s = model.y_scale
    return model.y_mean + s * mean_s, s * std_s, s * dmean_s, s * dstd_s


def log_marginal_likelihood(data: Dataset, hyper: KernelHyper, normalize: bool = False) -> float:
    """Log evidence of the (optionally standardized) observations."""
    model = fit(data, hyper, normalize)
    y = (data.observations - model.y_mean) / model.y_scale
    n = len(data)
    return float(
        -0.5 * y @ model.weights
        - np.sum(np.log(np.diag(model.factor)))
        - 0.5 * n * np.log(2.0 * np.pi)
    )


@dataclass(frozen=True)
class HyperBounds:
    """Box over (signal_variance, length_scale, noise_variance)."""

    signal_variance: tuple = (1e-2, 1e2)
    length_scale: tuple = (1e-2, 1e1)
    noise_variance: tuple = (1e-8, 1.0)

    def __post_init__(self):
        for name in ("signal_variance", "length_scale", "noise_variance"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InputError(f"{name} bounds inverted: ({lo}, {hi})")
        if self.signal_variance[0] <= 0 or self.length_scale[0] <= 0:
            raise InputError("signal_variance and length_scale bounds must be positive")
        if self.noise_variance[0] < 0:
            raise InputError("noise_variance lower bound must be >= 0")

    def as_arrays(self):
        lo = np.array([self.signal_variance[0], self.length_scale[0], self.noise_variance[0]])
        hi = np.array([self.signal_variance[1], self.length_scale[1], self.noise_variance[1]])
        return lo, hi


_LOG_FLOOR = 1e-12


def optimize_hyperparameters(
    data: Dataset,
    bounds: HyperBounds = HyperBounds(),
    seed: int = 0,
    n_starts: int = 5,
    init: KernelHyper | None = None,
    normalize: bool = False,
) -> KernelHyper:
    """Maximize the log marginal likelihood by multi-start L-BFGS-B.

    The search runs in log coordinates. Starts are a seeded Latin-hypercube
    sample of the log-box, plus ``init`` when given (clipped into the box).
    If the winning noise variance is below the jitter that the factorization
    needed, it is raised to that jitter.
    """
    if len(data) < 2:
        raise InputError("hyperparameter optimization needs at least 2 points")
    lo, hi = bounds.as_arrays()
    log_lo = np.log(np.maximum(lo, _LOG_FLOOR))
    log_hi = np.log(np.maximum(hi, _LOG_FLOOR))

    def to_hyper(u):
        x = np.exp(np.clip(u, log_lo, log_hi))
        if lo[2] == 0.0 and x[2] <= _LOG_FLOOR * (1 + 1e-9):
            x[2] = 0.0
        return KernelHyper(float(x[0]), float(x[1]), float(x[2]))

    def neg_lml(u):
        try:
            return -log_marginal_likelihood(data, to_hyper(u), normalize)
        except NumericalError:
            return 1e25

    if np.all(log_hi - log_lo <= 0):
        candidates = [log_lo]
    else:
        sampler = qmc.LatinHypercube(d=3, seed=np.random.default_rng(seed))
        starts = log_lo + sampler.random(n_starts) * (log_hi - log_lo)  # collapsed axes stay put
        if init is not None:
            starts = np.vstack([np.clip(np.log(np.maximum(init.as_array(), _LOG_FLOOR)), log_lo, log_hi), starts])
        candidates = []
        for u0 in starts:
            res = minimize(neg_lml, u0, method="L-BFGS-B", bounds=list(zip(log_lo, log_hi)))
            candidates.append(np.clip(res.x, log_lo, log_hi))

    values = [neg_lml(u) for u in candidates]
    best = int(np.argmin(values))
    if values[best] >= 1e25:
        raise NumericalError("every hyperparameter candidate failed to factorize")
    hyper = to_hyper(candidates[best])
    model = fit(data, hyper, normalize)
    if model.jitter > hyper.noise_variance:
        hyper = KernelHyper(hyper.signal_variance, hyper.length_scale, model.jitter)
    return hyper
