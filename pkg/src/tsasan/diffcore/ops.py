"""Network primitives with hand-written backward passes.

All ops accept an optional leading batch axis: ``(C, T)`` or ``(N, C, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, _sigmoid, as_tensor


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (N, D_in), ``W`` (D_in, D_out), ``b`` (D_out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")

    def bw(g):
        gx = g @ W.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return gx, x2.T @ g2, g2.sum(axis=0)
    return Tensor._make(x.data @ W.data + b.data, (x, W, b), bw, "affine")


def depthwise_conv1d(x, kernel, bias) -> Tensor:
    """Per-channel cross-correlation along time with zero same-padding.

    ``x``: (..., C, T); ``kernel``: (C, k) with k odd; ``bias``: (C,).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 2:
        raise DimensionError(f"kernel must be (C, k), got {kernel.shape}")
    C, k = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {k}")
    if x.ndim < 2 or x.shape[-2] != C or bias.shape != (C,):
        raise DimensionError(
            f"depthwise_conv1d shape mismatch: x{x.shape} kernel{kernel.shape} bias{bias.shape}")
    T = x.shape[-1]
    if T < 1:
        raise DimensionError("depthwise_conv1d needs T >= 1")
    pad = (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, widths)
    w = kernel.data
    out = np.broadcast_to(bias.data[:, None], x.shape).copy()
    for j in range(k):
        out += w[:, j, None] * xp[..., j:j + T]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(w)
        batch_axes = tuple(range(g.ndim - 2))
        for j in range(k):
            gxp[..., j:j + T] += w[:, j, None] * g
            gk[:, j] = (g * xp[..., j:j + T]).sum(axis=batch_axes + (-1,))
        gx = gxp[..., pad:pad + T]
        gb = g.sum(axis=batch_axes + (-1,))
        return gx, gk, gb
    return Tensor._make(out, (x, kernel, bias), bw, "depthwise_conv1d")


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)
    return Tensor._make(x.data.mean(axis=axis), (x,), bw, "mean")


def std_axis(x, axis: int) -> Tensor:
    """Population standard deviation along ``axis``.

    The derivative at zero spread is taken as 0 (the subgradient that keeps
    constant signals finite).
    """
    x = as_tensor(x)
    n = x.shape[axis]
    centred = x.data - x.data.mean(axis=axis, keepdims=True)
    sd = np.sqrt((centred * centred).mean(axis=axis))

    def bw(g):
        sdk = np.expand_dims(sd, axis)
        scale = np.divide(np.expand_dims(g, axis), n * sdk,
                          out=np.zeros_like(sdk * np.expand_dims(g, axis)), where=sdk > 0)
        return (scale * centred,)
    return Tensor._make(sd, (x,), bw, "std")


def instance_stats(x) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population std over the last (time) axis."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"instance_stats needs T >= 1, got shape {x.shape}")
    return mean_axis(x, -1), std_axis(x, -1)


def softmax(x) -> Tensor:
    """Row softmax over the last axis, max-shifted.

    The output remembers its logits so :func:`cross_entropy` can use the
    fused ``(p - onehot) / N`` gradient.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax needs at least one column")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    out = Tensor._make(p, (x,), bw, "softmax")
    out._logits = x
    return out


def cross_entropy(p, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels`` under rows of ``p``."""
    p = as_tensor(p)
    labels = np.asarray(labels)
    if p.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, K) probabilities, got {p.shape}")
    N, K = p.shape
    if labels.shape != (N,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {N}")
    if labels.size and (labels.min() < 0 or labels.max() >= K or not np.issubdtype(labels.dtype, np.integer)):
        raise IndexError(f"labels must be integers in [0, {K}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    rows = np.arange(N)
    logits = p._logits
    if logits is not None:
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        loss = -logp[rows, labels].mean()

        def bw(g):
            d = p.data.copy()
            d[rows, labels] -= 1.0
            return (g * d / N,)
        return Tensor._make(loss, (logits,), bw, "softmax_cross_entropy")

    loss = -np.log(p.data[rows, labels]).mean()

    def bw_plain(g):
        d = np.zeros_like(p.data)
        d[rows, labels] = -1.0 / (N * p.data[rows, labels])
        return (g * d,)
    return Tensor._make(loss, (p,), bw_plain, "cross_entropy")


@dataclass
class GRUParams:
    """Gate blocks are ordered (reset, update, candidate) along the 3H axis."""

    weight_ih: Tensor   # (C_in, 3H)
    weight_hh: Tensor   # (H, 3H)
    bias_ih: Tensor     # (3H,)
    bias_hh: Tensor     # (3H,)

    @property
    def hidden_size(self) -> int:
        return self.weight_hh.shape[0]


def gru_forward(x, params: GRUParams, h0=None) -> Tensor:
    """Unroll a GRU left to right over the time axis.

    ``x``: (C_in, T) or (N, C_in, T). Returns the hidden sequence with shape
    (H, T) or (N, H, T)::

        r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h = (1 - z) * n + z * h_prev
    """
    x = as_tensor(x)
    Wi, Wh, bi, bh = params.weight_ih, params.weight_hh, params.bias_ih, params.bias_hh
    H = Wh.shape[0]
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    N, Cin, T = xd.shape
    if Wi.shape != (Cin, 3 * H) or Wh.shape != (H, 3 * H) or bi.shape != (3 * H,) or bh.shape != (3 * H,):
        raise DimensionError(
            f"GRU parameter shapes {Wi.shape}, {Wh.shape}, {bi.shape}, {bh.shape} "
            f"inconsistent with input channels {Cin} and hidden size {H}")
    if h0 is None:
        h0 = Tensor(np.zeros(H))
    h0 = as_tensor(h0)
    if h0.shape[-1] != H:
        raise DimensionError(f"h0 length {h0.shape[-1]} != hidden size {H}")

    xs = np.ascontiguousarray(xd.transpose(2, 0, 1))          # (T, N, Cin)
    gx = xs @ Wi.data + bi.data                                # (T, N, 3H)
    hs = np.empty((T + 1, N, H))
    hs[0] = np.broadcast_to(h0.data, (N, H))
    r_all = np.empty((T, N, H))
    z_all = np.empty((T, N, H))
    n_all = np.empty((T, N, H))
    hn_all = np.empty((T, N, H))
    Whd, bhd = Wh.data, bh.data
    for t in range(T):
        gh = hs[t] @ Whd + bhd
        r = _sigmoid(gx[t, :, :H] + gh[:, :H])
        z = _sigmoid(gx[t, :, H:2 * H] + gh[:, H:2 * H])
        hn = gh[:, 2 * H:]
        n = np.tanh(gx[t, :, 2 * H:] + r * hn)
        hs[t + 1] = (1.0 - z) * n + z * hs[t]
        r_all[t], z_all[t], n_all[t], hn_all[t] = r, z, n, hn

    out = hs[1:].transpose(1, 2, 0)                            # (N, H, T)
    if squeeze:
        out = out[0]

    def bw(g):
        gseq = (g[None] if squeeze else g).transpose(2, 0, 1)  # (T, N, H)
        d_gx = np.empty((T, N, 3 * H))
        dWh = np.zeros_like(Whd)
        dbh = np.zeros(3 * H)
        dh = np.zeros((N, H))
        for t in range(T - 1, -1, -1):
            dh = dh + gseq[t]
            r, z, n, hn, hp = r_all[t], z_all[t], n_all[t], hn_all[t], hs[t]
            dn = dh * (1.0 - z)
            dz = dh * (hp - n)
            dan = dn * (1.0 - n * n)
            daz = dz * z * (1.0 - z)
            dar = dan * hn * r * (1.0 - r)
            d_gx[t, :, :H] = dar
            d_gx[t, :, H:2 * H] = daz
            d_gx[t, :, 2 * H:] = dan
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dWh += hp.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh * z + dgh @ Whd.T
        dx = (d_gx @ Wi.data.T).transpose(1, 2, 0)
        if squeeze:
            dx = dx[0]
        dWi = xs.reshape(-1, Cin).T @ d_gx.reshape(-1, 3 * H)
        dbi = d_gx.reshape(-1, 3 * H).sum(axis=0)
        dh0 = dh.sum(axis=0) if h0.ndim == 1 else dh
        return dx, dWi, dWh, dbi, dbh, dh0
    return Tensor._make(out, (x, Wi, Wh, bi, bh, h0), bw, "gru")
