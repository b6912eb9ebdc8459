"""Fused layer ops with hand-written backward rules."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ContractError, Tensor, _make, _sigmoid, as_tensor


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W + b with x of shape (batch, in) and W of shape (in, out)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ContractError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ContractError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ContractError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum=0.99, eps=1e-5,
              update_stats=True, per_sample=False) -> Tensor:
    """Per-channel normalization.

    Training mode normalizes with batch statistics (biased variance) over
    every axis except the channel axis, or, with ``per_sample=True``, over
    each sample's spatial extent only.  Running buffers are updated in place
    as ``r <- momentum*r + (1-momentum)*batch``; eval mode uses them.  The
    tracked variance is unbiased for batch statistics and biased (exactly
    what training normalized with) for per-sample statistics.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 4):
        raise ContractError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    if per_sample and x.ndim != 4:
        raise ContractError("per-sample statistics need a spatial (N, C, H, W) input")
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    param_axes = (0,) if x.ndim == 2 else (0, 2, 3)
    axes = (2, 3) if per_sample else param_axes
    g_ = gamma.data.reshape(bshape)
    if training:
        m = int(np.prod([x.shape[a] for a in axes]))
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if update_stats:
            # per-sample statistics describe the whole map, so eval mode must reuse them uncorrected
            track = var * m / (m - 1) if m > 1 and not per_sample else var
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.mean(axis=0).reshape(-1)
            running_var *= momentum
            running_var += (1.0 - momentum) * track.mean(axis=0).reshape(-1)
    else:
        mu, var = running_mean.reshape(bshape), running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=param_axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=param_axes))
        if x.requires_grad:
            gx = g * g_
            if training:
                gx = (gx - gx.mean(axis=axes, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            x._accumulate(gx * inv)

    return _make(out, (x, gamma, beta), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """(N, 1, H, W) -> (N, 1).  Ties send the gradient to the first maximum in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ContractError(f"global_max_pool expects a single-channel map, got {x.shape}")
    flat = x.data.reshape(x.shape[0], -1)
    arg = flat.argmax(axis=1)
    rows = np.arange(flat.shape[0])

    def backward(g):
        gx = np.zeros_like(flat)
        gx[rows, arg] = g[:, 0]
        x._accumulate(gx.reshape(x.shape))

    return _make(flat[rows, arg][:, None], (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, 1, H, W) -> (N, 1)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ContractError(f"global_avg_pool expects a single-channel map, got {x.shape}")
    n, _, h, w = x.shape
    flat = x.data.reshape(n, -1)

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _make(flat.mean(axis=1)[:, None], (x,), backward)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor) -> Tensor:
    """One LSTM step.  Gate order in the 4H axis: input, forget, candidate, output.

    Returns a (batch, 2, H) tensor stacking the new hidden and cell state.
    """
    return lstm_recurrent(dense(x, w_x, bias), h, c, w_h)


def lstm_recurrent(zx: Tensor, h: Tensor, c: Tensor, w_h: Tensor) -> Tensor:
    """LSTM step given the precomputed input projection ``zx = x W_x + b``.

    Splitting the projection out lets a whole sequence share one dense op.
    """
    zx, h, c = as_tensor(zx), as_tensor(h), as_tensor(c)
    hid = w_h.shape[0]
    if h.shape[-1] != hid or c.shape[-1] != hid or zx.shape[-1] != 4 * hid:
        raise ContractError(f"lstm: state width {h.shape[-1]}/{c.shape[-1]} != hidden {hid}")
    z = zx.data + h.data @ w_h.data
    i = _sigmoid(z[:, :hid])
    f = _sigmoid(z[:, hid:2 * hid])
    gg = np.tanh(z[:, 2 * hid:3 * hid])
    o = _sigmoid(z[:, 3 * hid:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(grad):
        gh, gc = grad[:, 0], grad[:, 1]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c.data * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        if zx.requires_grad:
            zx._accumulate(dz)
        if h.requires_grad:
            h._accumulate(dz @ w_h.data.T)
        if c.requires_grad:
            c._accumulate(dc * f)
        if w_h.requires_grad:
            w_h._accumulate(h.data.T @ dz)

    return _make(np.stack([h_new, c_new], axis=1), (zx, h, c, w_h), backward)
