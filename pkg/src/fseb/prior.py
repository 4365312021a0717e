"""Gaussian functional prior over network outputs at context points.

The covariance over the M context points is built from frozen embedding
vectors ``H`` (M x d)::

    K = tau1 * H @ H.T + tau2 * I

and every output dimension ``k`` of the network is scored independently as
``log N(0; f_k, K)`` where ``f_k`` holds the k-th output at the M context
points.  The target at the context points is identically zero, so the
residual is ``-f_k`` and the quadratic form is ``f_k^T K^{-1} f_k``.

Everything goes through one M x M Cholesky factor; M is small (32 by
default), so the direct factorisation is cheaper than any low-rank update
through the embedding dimension.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import autodiff as ad
from .errors import ConfigError, DataError, DimensionError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))

# diagonal jitter schedule used when the first factorisation fails
JITTER_SCALE = 1e-10
JITTER_RETRIES = 3


@dataclass(frozen=True)
class KernelConfig:
    tau1: float = 1.0
    tau2: float = 1.0
    normalize_embeddings: bool = False
    # network quantity scored at the context points, and how the M points combine
    prior_on: str = "logits"  # logits | probs
    context_reduction: str = "sum"  # sum | mean

    def __post_init__(self):
        if not (np.isfinite(self.tau1) and self.tau1 > 0):
            raise ConfigError(f"tau1 must be positive, got {self.tau1}")
        if not (np.isfinite(self.tau2) and self.tau2 > 0):
            raise ConfigError(f"tau2 must be positive, got {self.tau2}")
        if self.prior_on not in ("logits", "probs"):
            raise ConfigError(f"prior_on must be 'logits' or 'probs', got {self.prior_on!r}")
        if self.context_reduction not in ("sum", "mean"):
            raise ConfigError(f"context_reduction must be 'sum' or 'mean', got {self.context_reduction!r}")


@dataclass(frozen=True)
class KernelModel:
    H: np.ndarray
    K_mat: np.ndarray
    chol: np.ndarray
    log_det: float
    cfg: KernelConfig

    @property
    def M(self):
        return self.H.shape[0]

    @property
    def d(self):
        return self.H.shape[1]

    def solve(self, f):
        """K^{-1} f via the cached Cholesky factor."""
        return cho_solve((self.chol, True), f, check_finite=False)


def _prepare_embeddings(H, cfg):
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1 or H.shape[1] < 1:
        raise DimensionError(f"embeddings must be a non-empty M x d matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise DataError("embedding matrix contains non-finite entries")
    if cfg.normalize_embeddings:
        norms = np.linalg.norm(H, axis=1, keepdims=True)
        H = H / np.where(norms > 0, norms, 1.0)
    return H


def kernel_matrix(H, cfg):
    """The M x M covariance for embeddings ``H`` (no factorisation)."""
    H = _prepare_embeddings(H, cfg)
    K = cfg.tau1 * (H @ H.T)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += cfg.tau2
    return K


def build_kernel(H, cfg):
    """Covariance and its Cholesky factor for context embeddings ``H``."""
    H = _prepare_embeddings(H, cfg)
    K = kernel_matrix(H, replace(cfg, normalize_embeddings=False))
    M = K.shape[0]
    jitter = JITTER_SCALE * np.trace(K) / M
    A = K
    for attempt in range(JITTER_RETRIES + 1):
        try:
            L = np.linalg.cholesky(A)
            break
        except np.linalg.LinAlgError:
            if attempt == JITTER_RETRIES:
                raise NumericError(f"Cholesky failed for {M}x{M} kernel after {JITTER_RETRIES} jitter retries")
            A = K + jitter * np.eye(M)
            jitter *= 2.0
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return KernelModel(H=H, K_mat=K, chol=L, log_det=log_det, cfg=cfg)


def _check_len(km, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != km.M:
        raise DimensionError(f"expected {km.M} context outputs, got {f.shape[0]}")
    return f


def logpdf_zero_target(km, f_k):
    """log N(0; f_k, K) for one output dimension."""
    f = _check_len(km, f_k)
    if f.ndim != 1:
        raise DimensionError(f"f_k must be a vector, got shape {f.shape}")
    alpha = solve_triangular(km.chol, f, lower=True, check_finite=False)
    quad = float(alpha @ alpha)
    return -0.5 * (km.M * LOG_2PI + km.log_det + quad)


def logpdf_grad(km, f_k):
    """Gradient of :func:`logpdf_zero_target` w.r.t. ``f_k``: ``-K^{-1} f_k``."""
    f = _check_len(km, f_k)
    return -km.solve(f)


def prior_term(km, logits):
    """Sum over output columns of the zero-target log-density, plus gradient.

    Returns ``(value, grad)`` with ``grad`` the same shape as ``logits``.
    """
    F = np.asarray(logits, dtype=np.float64)
    if F.ndim != 2:
        raise DimensionError(f"logits must be M x K, got shape {F.shape}")
    F = _check_len(km, F)
    alpha = solve_triangular(km.chol, F, lower=True, check_finite=False)
    quad = float(np.sum(alpha * alpha))
    n_out = F.shape[1]
    value = -0.5 * (n_out * (km.M * LOG_2PI + km.log_det) + quad)
    grad = -km.solve(F)
    return value, grad


def prior_node(km, outputs):
    """Differentiable prior term on an M x K network-output tensor.

    The value (a log-density, to be maximised) is scaled by ``1/M`` when the
    kernel config asks for the ``mean`` context reduction.
    """
    value, grad = prior_term(km, outputs.data)
    scale = 1.0 / km.M if km.cfg.context_reduction == "mean" else 1.0
    return ad.custom((outputs,), scale * value, lambda g: (g * scale * grad,), op="prior_term")


def dense_oracle(H, cfg, f):
    """Independent log N(0; f, K) via an explicit eigendecomposition of K.

    Verification path only: no Cholesky, no triangular solves.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] > 128:
        raise DimensionError("dense_oracle is meant for M <= 128")
    if cfg.normalize_embeddings:
        H = H / np.linalg.norm(H, axis=1, keepdims=True)
    K = cfg.tau1 * (H @ H.T) + cfg.tau2 * np.eye(H.shape[0])
    lam, Q = np.linalg.eigh(0.5 * (K + K.T))
    if lam.min() <= 0:
        raise NumericError(f"kernel has non-positive eigenvalue {lam.min()}")
    f = np.asarray(f, dtype=np.float64)
    proj = Q.T @ f
    quad = float(np.sum(proj ** 2 / lam))
    return -0.5 * (H.shape[0] * LOG_2PI + float(np.sum(np.log(lam))) + quad)
