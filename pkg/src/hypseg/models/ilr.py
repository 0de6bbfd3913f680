"""Iterative logistic regression: a compact discriminative spectral basis.

Each round fits a multiclass logistic regression on the current residual
log-ratio spectra, keeps the dominant direction of its class-weight matrix,
and projects that direction out of every spectrum. The final classifier is
a logistic regression on the projections onto the kept directions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from ..metrics import macro_f1
from ..preprocessing import log_ratio


@dataclass
class LogRegFit:
    weight: np.ndarray  # K x D
    bias: np.ndarray  # K
    n_iter: int
    grad_norm: float
    converged: bool


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_logreg(X, y, n_classes, lr=1e-2, n_iter=500, l2=1e-4, tol=1e-6,
               beta1=0.9, beta2=0.999, eps=1e-8) -> LogRegFit:
    """Full-batch Adam on mean softmax cross-entropy plus ``l2/2 * ||W||^2``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    N, D = X.shape
    onehot = np.eye(n_classes)[y]
    W = np.zeros((n_classes, D))
    b = np.zeros(n_classes)
    m = [np.zeros_like(W), np.zeros_like(b)]
    v = [np.zeros_like(W), np.zeros_like(b)]
    gnorm = np.inf
    for t in range(1, n_iter + 1):
        P = _softmax(X @ W.T + b)
        R = (P - onehot) / N
        gW = R.T @ X + l2 * W
        gb = R.sum(axis=0)
        gnorm = float(np.sqrt((gW**2).sum() + (gb**2).sum()))
        if not np.isfinite(gnorm):
            raise FloatingPointError(f"logistic regression diverged at iteration {t}")
        if gnorm < tol:
            return LogRegFit(W, b, t, gnorm, True)
        for k, (p, g) in enumerate(((W, gW), (b, gb))):
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            mhat = m[k] / (1 - beta1**t)
            vhat = v[k] / (1 - beta2**t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
    return LogRegFit(W, b, n_iter, gnorm, False)


def _leading_direction(W: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    # drop the class-common component; softmax is invariant to it
    Wc = W - W.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(Wc, full_matrices=False)
    v = vt[0]
    for _ in range(2):
        for u in basis:
            v = v - (v @ u) * u
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("extracted direction lies in the span of earlier directions")
    v = v / norm
    return v if v[np.argmax(np.abs(v))] > 0 else -v


@dataclass
class IlrResult:
    directions: np.ndarray  # z x C
    class_weight: np.ndarray  # z x K
    class_bias: np.ndarray  # K
    f1_trace: list[float] = field(default_factory=list)
    inner_iterations: list[int] = field(default_factory=list)


def ilr_fit(spectra, labels, n_classes=None, max_components=23, f1_threshold=0.55,
            lr=1e-2, n_iter=500, l2=1e-4) -> IlrResult:
    """Fit on N x C positive raw radiances with integer labels."""
    spectra = np.asarray(spectra, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if spectra.ndim != 2 or labels.shape != (spectra.shape[0],):
        raise ValueError(f"expected N x C spectra and N labels, got {spectra.shape} and {labels.shape}")
    if len(np.unique(labels)) < 2:
        raise ValueError("ILR needs at least two classes in the training labels")
    if max_components < 1:
        raise ValueError("max_components must be >= 1")
    K = int(n_classes if n_classes is not None else labels.max() + 1)
    s0 = log_ratio(spectra)
    s = s0.copy()
    basis: list[np.ndarray] = []
    trace, iters = [], []
    for t in range(1, min(max_components, s.shape[1]) + 1):
        fit = _fit_checked(s, labels, K, lr, n_iter, l2, stage=f"component {t}")
        pred = np.argmax(s @ fit.weight.T + fit.bias, axis=1)
        f1 = macro_f1(pred, labels, K)
        if f1 < f1_threshold and basis:
            break
        v = _leading_direction(fit.weight, basis)
        basis.append(v)
        trace.append(f1)
        iters.append(fit.n_iter)
        s = s - np.outer(s @ v, v)
    V = np.stack(basis)
    beta = s0 @ V.T
    final = _fit_checked(beta, labels, K, lr, n_iter, l2, stage="final classifier")
    return IlrResult(V, final.weight.T.copy(), final.bias.copy(), trace, iters)


def _fit_checked(X, y, K, lr, n_iter, l2, stage):
    fit = fit_logreg(X, y, K, lr=lr, n_iter=n_iter, l2=l2)
    if not fit.converged:
        warnings.warn(
            f"ILR {stage}: logistic regression stopped after {fit.n_iter} iterations "
            f"with gradient norm {fit.grad_norm:.2e}",
            ConvergenceWarning,
            stacklevel=3,
        )
    return fit


def ilr_predict_proba(result: IlrResult, spectra) -> np.ndarray:
    """Class probabilities for raw spectra of shape (..., C)."""
    spectra = np.asarray(spectra, dtype=np.float64)
    beta = log_ratio(spectra) @ result.directions.T
    z = beta @ result.class_weight + result.class_bias
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
