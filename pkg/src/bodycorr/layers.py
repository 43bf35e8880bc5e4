"""Forward/backward primitives for the dense descriptor network.

Tensors are numpy arrays shaped ``(batch, channels, height, width)``.  Every
``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LRN_SIZE = 5
LRN_ALPHA = 1e-4
LRN_BETA = 0.75
LRN_K = 2.0


class ShapeError(ValueError):
    pass


def _same_pad(k):
    return (k - 1) // 2, k // 2


def conv_output_size(size, k, stride):
    lo, hi = _same_pad(k)
    return (size + lo + hi - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, pad_mode="constant"):
    """Cross-correlation with 'same' padding, then subsampled by ``stride``.

    Parameters
    ----------
    x : ndarray, shape (B, C, H, W)
    w : ndarray, shape (O, C, k, k)
    b : ndarray, shape (O,)
    stride : int
    pad_mode : {"constant", "edge"}
        Zero padding or border replication.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    B, C, H, W = x.shape
    O, _, k, k2 = w.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    lo, hi = _same_pad(k)
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)), mode=pad_mode)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    out = cols @ w.reshape(O, -1).T + b
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w, stride, pad_mode)


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dw, db)`` of a :func:`conv2d_forward` call."""
    xshape, cols, w, stride, pad_mode = cache
    B, C, H, W = xshape
    O, _, k, _ = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    g = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0)
    dcols = (g @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))  # (k, k, B, C, Ho, Wo)
    lo, hi = _same_pad(k)
    dxp = np.zeros((B, C, H + lo + hi, W + lo + hi), dtype=dout.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += dcols[ky, kx]
    if pad_mode == "edge":
        # fold replicated border gradient back onto the edge pixels
        dxp[:, :, lo, :] += dxp[:, :, :lo, :].sum(axis=2)
        dxp[:, :, H + lo - 1, :] += dxp[:, :, H + lo:, :].sum(axis=2)
        dxp[:, :, :, lo] += dxp[:, :, :, :lo].sum(axis=3)
        dxp[:, :, :, W + lo - 1] += dxp[:, :, :, W + lo:].sum(axis=3)
    dx = dxp[:, :, lo:lo + H, lo:lo + W]
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def _channel_window_sum(a, n):
    """Sum over a centered window of ``n`` channels, zero beyond the ends."""
    half = n // 2
    C = a.shape[1]
    padded = np.pad(a, ((0, 0), (half, n - 1 - half), (0, 0), (0, 0)))
    c = np.cumsum(padded, axis=1)
    c = np.concatenate([np.zeros_like(c[:, :1]), c], axis=1)
    return c[:, n:n + C] - c[:, :C]


def lrn_forward(x, n=LRN_SIZE, alpha=LRN_ALPHA, beta=LRN_BETA, k=LRN_K):
    """Across-channel local response normalization.

    ``y_c = x_c / (k + alpha / n * sum_{c' near c} x_c'^2) ** beta``
    """
    s = k + (alpha / n) * _channel_window_sum(x * x, n)
    y = x * s ** -beta
    return y, (x, s, n, alpha, beta)


def lrn_backward(dout, cache):
    x, s, n, alpha, beta = cache
    t = dout * x * s ** (-beta - 1)
    # the window is symmetric for odd n, so the transpose sum is the same window
    back = _channel_window_sum(t, n) if n % 2 else _channel_window_sum(t[:, ::-1], n)[:, ::-1]
    return dout * s ** -beta - 2.0 * beta * (alpha / n) * x * back


def maxpool_forward(x):
    """3x3 max pooling with stride 2 evaluated at all four phase offsets.

    Returns a tensor of shape ``(4B, C, H/2, W/2)`` where copy
    ``b * 4 + oy * 2 + ox`` holds the windows centered on pixels
    ``(2i + oy, 2j + ox)`` of input ``b``.  Windows ignore out-of-image
    pixels.  Odd spatial sizes are padded by replicating the last row/column.
    """
    B, C, H, W = x.shape
    ph, pw = H % 2, W % 2
    xe = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if ph or pw else x
    He, We = xe.shape[2], xe.shape[3]
    xp = np.pad(xe, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3)).reshape(B, C, He, We, 9)
    arg = win.argmax(axis=-1)  # first in scan order on ties
    dense = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = split_copies(dense)
    return out, (x.shape, (He, We), arg)


def maxpool_backward(dout, cache):
    xshape, (He, We), arg = cache
    B, C, H, W = xshape
    g = interleave(dout)
    rows = np.arange(He)[:, None] + arg // 3 - 1
    cols = np.arange(We)[None, :] + arg % 3 - 1
    flat = (np.arange(B * C).reshape(B, C, 1, 1) * He + rows) * We + cols
    dx = np.bincount(flat.ravel(), weights=g.ravel(), minlength=B * C * He * We)
    dx = dx.reshape(B, C, He, We).astype(dout.dtype, copy=False)
    if He != H:
        dx[:, :, H - 1] += dx[:, :, H]
    if We != W:
        dx[:, :, :, W - 1] += dx[:, :, :, W]
    return np.ascontiguousarray(dx[:, :, :H, :W])


def split_copies(x):
    """Dense map ``(B, C, H, W)`` -> four phase copies ``(4B, C, H/2, W/2)``."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError("phase split needs even spatial dims")
    y = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(y.reshape(4 * B, C, H // 2, W // 2))


def interleave(x):
    """Inverse of :func:`split_copies`."""
    B4, C, h, w = x.shape
    if B4 % 4:
        raise ShapeError(f"copy count {B4} is not a multiple of 4")
    y = x.reshape(B4 // 4, 2, 2, C, h, w).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(y.reshape(B4 // 4, C, 2 * h, 2 * w))


def pixel_shuffle(x, s):
    """``(B, C*s*s, h, w)`` -> ``(B, C, h*s, w*s)``; channel ``c*s*s + a*s + b`` fills sub-pixel (a, b)."""
    B, Cs, h, w = x.shape
    C = Cs // (s * s)
    y = x.reshape(B, C, s, s, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(B, C, h * s, w * s))


def pixel_unshuffle(x, s):
    B, C, H, W = x.shape
    y = x.reshape(B, C, H // s, s, W // s, s).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(B, C * s * s, H // s, W // s))


def upsample_forward(x, w, b, n_copies_levels, stride):
    """Recombine pooled copies, then a learned 3x3 upsampling by ``stride``.

    Parameters
    ----------
    x : ndarray, shape (B * 4**n_copies_levels, C, h, w)
    w : ndarray, shape (d * stride**2, C, 3, 3)
    b : ndarray, shape (d * stride**2,)
    n_copies_levels : int
        Number of all-offset pooling layers whose copies are interleaved.
    stride : int
        Total convolution stride to undo.
    """
    if x.shape[0] % (4 ** n_copies_levels):
        raise ShapeError("copy bookkeeping mismatch")
    for _ in range(n_copies_levels):
        x = interleave(x)
    y, conv_cache = conv2d_forward(x, w, b, 1, pad_mode="edge")
    return pixel_shuffle(y, stride), (conv_cache, n_copies_levels, stride)


def upsample_backward(dout, cache):
    conv_cache, levels, stride = cache
    dx, dw, db = conv2d_backward(pixel_unshuffle(dout, stride), conv_cache)
    for _ in range(levels):
        dx = split_copies(dx)
    return dx, dw, db


def bilinear_taps(stride):
    """1-D weights over taps (-1, 0, +1) for each of the ``stride`` sub-pixels."""
    taps = np.zeros((stride, 3))
    for a in range(stride):
        t = (a + 0.5) / stride - 0.5
        if t < 0:
            taps[a] = (-t, 1 + t, 0.0)
        else:
            taps[a] = (0.0, 1 - t, t)
    return taps


def bilinear_upsample_weights(proj, stride):
    """Upsampling kernel ``W[c*s*s + a*s + b, cin] = proj[c, cin] * B_a (x) B_b``."""
    d, cin = proj.shape
    t = bilinear_taps(stride)
    w = np.einsum("ci,ay,bx->cabiyx", proj, t, t)
    return w.reshape(d * stride * stride, cin, 3, 3)


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, targets, mask):
    """Mean cross-entropy over supervised pixels.

    Parameters
    ----------
    logits : ndarray, shape (B, K, H, W)
    targets : int ndarray, shape (B, H, W)
    mask : bool ndarray, shape (B, H, W)

    Returns
    -------
    loss : float
    dlogits : ndarray, shape (B, K, H, W)
    """
    mask = np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no supervised pixels")
    K = logits.shape[1]
    t = np.where(mask, targets, 0)
    if (t < 0).any() or (t >= K).any():
        raise ValueError("target class out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, t[:, None], axis=1)[:, 0]
    loss = float(((logsum - picked) * mask).sum() / n)
    p = np.exp(z - logsum[:, None])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
    grad = (p - onehot) * (mask[:, None] / n)
    return loss, grad


def head_forward(f, beta):
    """Logits ``f . beta_k`` for every pixel; ``beta`` is ``(K, d)``."""
    return np.einsum("bdhw,kd->bkhw", f, beta)


def head_backward(dlogits, f, beta):
    df = np.einsum("bkhw,kd->bdhw", dlogits, beta)
    dbeta = np.einsum("bkhw,bdhw->kd", dlogits, f)
    return df, dbeta
