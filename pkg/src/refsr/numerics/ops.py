"""Differentiable building-block operations on tensors.

Everything here carries a hand-derived adjoint and is covered by the
finite-difference checker in ``gradcheck``. Shapes follow channel-last
conventions: images are (H, W, C), token maps are (..., C).
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .engine import Parameter, Tensor, _accumulate, _result, matmul

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalization along ``axis`` with max-subtraction for stability.

    Every slice along ``axis`` sums to 1; values lie in (0, 1].
    """
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _result(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-CDF gelu (exact erf form, not the tanh approximation)."""
    d = x.data
    cdf = erf(d * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    y = d * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * d * d)
        pdf *= _INV_SQRT_2PI
        pdf *= d
        pdf += cdf
        _accumulate(x, g * pdf)

    return _result(y, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    d = x.data
    y = np.where(d > 0, d, slope * d)

    def bwd(g):
        _accumulate(x, g * np.where(d > 0, 1.0, slope))

    return _result(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last (channel) axis, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...c,...c->...", xhat, xhat)[..., None] / c
    var += eps
    np.sqrt(var, out=var)
    inv = var  # renamed: now holds 1/std after the in-place divide below
    np.divide(1.0, var, out=inv)
    xhat *= inv
    y = xhat * gamma.data
    y += beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accumulate(gamma, np.einsum("nc,nc->c", g.reshape(-1, c), xhat.reshape(-1, c)))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...c,...c->...", gh, xhat)[..., None] / c
            gh -= m1
            gh -= xhat * m2
            gh *= inv
            _accumulate(x, gh)

    return _result(y, (x, gamma, beta), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Token-wise affine map ``x @ w + b`` for channel-last inputs (fused)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear input channels {x.shape[-1]} do not match weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y += b.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(y.reshape(lead + (w.shape[1],)), parents, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padding stride-1 convolution of an (H, W, Cin) image.

    ``weight`` has shape (kh, kw, Cin, Cout) with odd kernel extents; output is
    (H, W, Cout). Linear in both the image and the weight.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError("conv2d expects image (H, W, Cin) and weight (kh, kw, Cin, Cout)")
    kh, kw, cin, cout = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd for same padding")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d input channels {x.shape[-1]} do not match weight {cin}")
    h, w = x.shape[0], x.shape[1]
    ph, pw = kh // 2, kw // 2

    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    # (H, W, kh, kw, Cin) view -> (H*W, kh*kw*Cin) patch matrix
    cols = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    y = cols @ wmat
    if bias is not None:
        y = y + bias.data
    y = y.reshape(h, w, cout)

    def bwd(g):
        gmat = g.reshape(h * w, cout)
        if weight.requires_grad:
            _accumulate(weight, (cols.T @ gmat).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(h, w, kh, kw, cin)
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[i : i + h, j : j + w, :] += gcols[:, :, i, j, :]
            _accumulate(x, gx[ph : ph + h, pw : pw + w, :])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (H, W, C*r^2) into (H*r, W*r, C); a pure permutation.

    Channel block c*r^2 + dy*r + dx of input pixel (h, w) lands at output
    position (h*r + dy, w*r + dx) in channel c.
    """
    if x.ndim != 3:
        raise ValueError("pixel_shuffle expects an (H, W, C) image")
    h, w, c_full = x.shape
    if c_full % (r * r) != 0:
        raise ValueError(f"pixel_shuffle channels {c_full} not divisible by r^2={r * r}")
    c = c_full // (r * r)
    y = x.data.reshape(h, w, c, r, r).transpose(0, 3, 1, 4, 2).reshape(h * r, w * r, c)

    def bwd(g):
        gi = g.reshape(h, r, w, r, c).transpose(0, 2, 4, 1, 3).reshape(x.shape)
        _accumulate(x, np.ascontiguousarray(gi))

    return _result(np.ascontiguousarray(y), (x,), bwd)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of ``pixel_shuffle``."""
    if x.ndim != 3:
        raise ValueError("pixel_unshuffle expects an (H, W, C) image")
    hr, wr, c = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ValueError(f"pixel_unshuffle extents {hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    y = x.data.reshape(h, r, w, r, c).transpose(0, 2, 4, 1, 3).reshape(h, w, c * r * r)

    def bwd(g):
        gi = g.reshape(h, w, c, r, r).transpose(0, 3, 1, 4, 2).reshape(x.shape)
        _accumulate(x, np.ascontiguousarray(gi))

    return _result(np.ascontiguousarray(y), (x,), bwd)


class DegenerateNormWarning(UserWarning):
    """Raised-as-warning when a spectrally normalized weight is (near) zero."""


def spectral_normalize(p: Parameter, iters: int = 1, update: bool = True) -> Tensor:
    """Divide a weight by a power-iteration estimate of its top singular value.

    The weight is viewed as an (out x rest) matrix with the last axis as the
    output dimension. ``iters`` power iterations refine the stored (u, v)
    vectors; with ``update`` they are written back in place (the one mutation
    in this module). Gradients treat (u, v) as constants, so the estimate
    sigma = u^T W v contributes rank-one structure to the adjoint.
    """
    if p.spectral_state is None:
        raise ValueError(f"parameter {p.name!r} has no spectral_state; call init_spectral_state first")
    out_dim = p.data.shape[-1]
    mat = p.data.reshape(-1, out_dim).T  # (out, rest)
    u, v = p.spectral_state
    for _ in range(max(iters, 0)):
        v_new = mat.T @ u
        nv = np.linalg.norm(v_new)
        if nv == 0.0:
            break
        v = v_new / nv
        u_new = mat @ v
        nu = np.linalg.norm(u_new)
        if nu == 0.0:
            break
        u = u_new / nu
    if update:
        p.spectral_state = (u, v)

    sigma = float(u @ (mat @ v))
    if sigma <= 1e-12:
        warnings.warn(
            f"spectral_normalize: degenerate norm for {p.name!r}; returning zero weight",
            DegenerateNormWarning,
        )
        return p * 0.0

    # sigma as a graph node: sum(p * uv) with uv arranged to p's layout
    uv = np.outer(u, v).T.reshape(p.shape).astype(p.dtype)
    sigma_t = (p * Tensor(uv)).sum()
    return p / sigma_t


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    return float(np.sqrt(total))
