"""Mark-interaction coefficients from a single graph-attention layer.

The coefficient matrix is ``alpha = a * p`` where ``a = exp(rho)`` is a free
positive strength and ``p`` is the head-averaged, row-normalised attention over
the complete mark graph.  Rows index the affected mark, columns the source.
The free-coefficient ablation skips attention: ``alpha = exp(rho)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StructuralError


@dataclass
class AttentionParams:
    """``W`` is ``(R, D', D)``, ``b`` is ``(R, 2 D')``."""

    W: np.ndarray
    b: np.ndarray
    slope: float = 0.2

    @property
    def heads(self):
        return self.W.shape[0]

    @property
    def hidden(self):
        return self.W.shape[1]

    def copy(self):
        return AttentionParams(self.W.copy(), self.b.copy(), self.slope)


def init_attention(heads, dim, hidden=8, rng=None, slope=0.2):
    rng = np.random.default_rng(rng)
    scale = 1.0 / np.sqrt(dim)
    W = rng.uniform(-scale, scale, size=(heads, hidden, dim))
    b = rng.uniform(-scale, scale, size=(heads, 2 * hidden))
    return AttentionParams(W, b, slope)


def init_strength(n_marks, row_total=0.5):
    """Constant log-strength; with row-stochastic ``p`` each row of alpha sums to ``row_total``."""
    return np.full((n_marks, n_marks), np.log(row_total))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(f"non-finite {what} at index {tuple(int(i) for i in bad)}")


def attention_forward(X, params, return_cache=False):
    """Head-averaged attention ``p`` (rows sum to one).

    Scores are ``LeakyReLU(b1 . W x_m + b2 . W x_m')`` with ``b = [b1; b2]``,
    normalised by a max-shifted softmax over the source mark ``m'``.
    """
    X = np.asarray(X, dtype=float)
    W, b = params.W, params.b
    R, Dh, D = W.shape
    if X.shape[1] != D or b.shape != (R, 2 * Dh):
        raise StructuralError(f"attention shapes do not match features {X.shape}")
    h = np.einsum("rkd,md->rmk", W, X)                       # (R, n, D')
    z = np.einsum("rmk,rk->rm", h, b[:, :Dh])[:, :, None] + np.einsum("rmk,rk->rm", h, b[:, Dh:])[:, None, :]
    e = np.where(z > 0, z, params.slope * z)
    e = e - e.max(axis=2, keepdims=True)
    w = np.exp(e)
    pr = w / w.sum(axis=2, keepdims=True)                    # (R, n, n)
    for r in range(R):
        _check_finite(pr[r], f"attention in head {r}")
    p = pr.mean(axis=0)
    if return_cache:
        return p, {"h": h, "z": z, "pr": pr}
    return p


def assemble_alpha(p, a):
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    if p.shape != a.shape or p.ndim != 2:
        raise StructuralError(f"shape mismatch: p {p.shape} vs a {a.shape}")
    return a * p


def attention_backward(X, params, rho, d_alpha, cache=None):
    """Reverse-mode gradients of a scalar loss through ``alpha = exp(rho) * p``.

    Parameters
    ----------
    d_alpha : (n, n) array
        Upstream gradient of the loss with respect to alpha.

    Returns
    -------
    dict with ``W``, ``b`` and ``rho`` gradients.
    """
    X = np.asarray(X, dtype=float)
    if cache is None:
        p, cache = attention_forward(X, params, return_cache=True)
    else:
        p = cache["pr"].mean(axis=0)
    a = np.exp(rho)
    d_alpha = np.asarray(d_alpha, dtype=float)
    d_rho = d_alpha * a * p
    dp = d_alpha * a
    h, z, pr = cache["h"], cache["z"], cache["pr"]
    R, Dh, _ = params.W.shape
    dpr = dp[None] / R
    de = pr * (dpr - (dpr * pr).sum(axis=2, keepdims=True))
    dz = de * np.where(z > 0, 1.0, params.slope)
    s1 = dz.sum(axis=2)                                      # (R, n) target-side
    s2 = dz.sum(axis=1)                                      # (R, n) source-side
    b1, b2 = params.b[:, :Dh], params.b[:, Dh:]
    db = np.concatenate([np.einsum("rmk,rm->rk", h, s1), np.einsum("rmk,rm->rk", h, s2)], axis=1)
    dh = s1[:, :, None] * b1[:, None, :] + s2[:, :, None] * b2[:, None, :]
    dW = np.einsum("rmk,md->rkd", dh, X)
    grads = {"W": dW, "b": db, "rho": d_rho}
    for k, v in grads.items():
        _check_finite(v, f"gradient of {k}")
    return grads


def ablation_alpha(rho):
    """Free positive coefficients ``exp(rho)``; no row normalisation."""
    return np.exp(np.asarray(rho, dtype=float))


def ablation_backward(rho, d_alpha):
    g = np.asarray(d_alpha, dtype=float) * np.exp(rho)
    _check_finite(g, "gradient of rho")
    return {"rho": g}
