"""Spatial primitives: convolution, pooling, batch normalization.

Convolution has three code paths sharing one contract: a per-tap path for
depthwise kernels (no column matrix at all), a batched matmul for 1x1
kernels, and the general im2col lowering for everything else.  Backward
passes recompute what they need from the saved input instead of keeping
column copies on the tape, trading a little arithmetic for memory.
"""

import numpy as np

from .autodiff import Tensor, add_macs, record
from .errors import DimensionError


def _out_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    eff = dilation * (kernel - 1) + 1
    out = (size + 2 * padding - eff) // stride + 1
    if out < 1:
        raise DimensionError(
            f"spatial extent {size} too small for kernel {kernel} "
            f"(stride {stride}, padding {padding}, dilation {dilation})"
        )
    return out


def _pad0(xd: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    # hand-rolled constant pad: np.pad is disproportionately slow here
    if not padding:
        return xd
    n, c, h, w = xd.shape
    if value == 0.0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    else:
        xp = np.full((n, c, h + 2 * padding, w + 2 * padding), value)
    xp[:, :, padding : padding + h, padding : padding + w] = xd
    return xp


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
             ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, c, ho, wo, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            dilation: int, groups: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xd.shape
    xp = _pad0(xd, padding)
    win = _windows(xp, kh, kw, stride, dilation, ho, wo)
    cg = c // groups
    if cg == 1 or groups == 1:
        # 6-D transpose: (C, kh, kw, N, Ho, Wo) covers both extremes cheaply
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c, kh * kw, n * ho * wo)
        if groups == 1:
            return cols.reshape(1, c * kh * kw, n * ho * wo)
        return cols
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    # (G, Cg*kh*kw, N*Ho*Wo); the reshape materializes the copy
    return win.transpose(1, 2, 5, 6, 0, 3, 4).reshape(groups, cg * kh * kw, n * ho * wo)


def _conv_depthwise(x: Tensor, weight: Tensor, stride, padding, dilation,
                    n, c, h, w, kh, kw, ho, wo) -> Tensor:
    xd = x.data
    wd = weight.data  # (C, 1, kh, kw)
    cols = _im2col(xd, kh, kw, stride, padding, dilation, c, ho, wo)
    w2 = wd.reshape(c, 1, kh * kw)
    out = np.matmul(w2, cols).reshape(c, n, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    need_x = x.requires_grad
    hs, ws = ho * stride, wo * stride

    def fn(gout):
        # both directions walk the k*k taps over the padded input; cheaper
        # than rebuilding the column matrix for channel-per-group kernels
        xpb = _pad0(xd, padding)
        gw = np.empty((c, 1, kh, kw))
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding)) if need_x else None
        for ki in range(kh):
            hi = ki * dilation
            for kj in range(kw):
                wi = kj * dilation
                gw[:, 0, ki, kj] = np.einsum(
                    "nchw,nchw->c", gout,
                    xpb[:, :, hi : hi + hs : stride, wi : wi + ws : stride])
                if need_x:
                    gxp[:, :, hi : hi + hs : stride, wi : wi + ws : stride] += \
                        wd[:, 0, ki, kj].reshape(1, c, 1, 1) * gout
        if not need_x:
            return None, gw
        if padding:
            return gxp[:, :, padding : padding + h, padding : padding + w].copy(), gw
        return gxp, gw

    return record(out, (x, weight), fn)


def _conv_pointwise(x: Tensor, weight: Tensor, stride, n, c, h, w, co, ho, wo) -> Tensor:
    xd = x.data
    xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
    xr = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    w2 = weight.data.reshape(co, c)
    out = np.matmul(w2, xr).reshape(n, co, ho, wo)
    need_x = x.requires_grad

    def fn(gout):
        g3 = gout.reshape(n, co, ho * wo)
        gw = np.einsum("noh,nch->oc", g3, xr).reshape(co, c, 1, 1)
        if not need_x:
            return None, gw
        gxs = np.matmul(w2.T, g3).reshape(n, c, ho, wo)
        if stride > 1:
            gx = np.zeros((n, c, h, w))
            gx[:, :, ::stride, ::stride] = gxs
            return gx, gw
        return gxs, gw

    return record(out, (x, weight), fn)


def _conv_general(x: Tensor, weight: Tensor, stride, padding, dilation, groups,
                  n, c, h, w, co, cg, kh, kw, ho, wo) -> Tensor:
    xd = x.data
    cols = _im2col(xd, kh, kw, stride, padding, dilation, groups, ho, wo)
    w2 = weight.data.reshape(groups, co // groups, cg * kh * kw)
    prod = np.matmul(w2, cols)  # (G, Co/G, N*Ho*Wo)
    out = prod.reshape(groups, co // groups, n, ho, wo).transpose(2, 0, 1, 3, 4)
    out = np.ascontiguousarray(out).reshape(n, co, ho, wo)
    need_x = x.requires_grad

    def fn(gout):
        g3 = gout.reshape(n, groups, co // groups, ho, wo)
        g3 = np.ascontiguousarray(g3.transpose(1, 2, 0, 3, 4))
        g3 = g3.reshape(groups, co // groups, n * ho * wo)
        cols_b = _im2col(xd, kh, kw, stride, padding, dilation, groups, ho, wo)
        gw = np.matmul(g3, cols_b.transpose(0, 2, 1)).reshape(co, cg, kh, kw)
        if not need_x:
            return None, gw
        gcols = np.matmul(w2.transpose(0, 2, 1), g3)
        gwin = gcols.reshape(groups, cg, kh, kw, n, ho, wo)
        gwin = np.ascontiguousarray(gwin.transpose(4, 0, 1, 5, 6, 2, 3))
        gwin = gwin.reshape(n, c, ho, wo, kh, kw)
        hp, wp = h + 2 * padding, w + 2 * padding
        gxp = np.zeros((n, c, hp, wp))
        for ki in range(kh):
            hi = ki * dilation
            for kj in range(kw):
                wi = kj * dilation
                gxp[:, :, hi : hi + ho * stride : stride,
                    wi : wi + wo * stride : stride] += gwin[:, :, :, :, ki, kj]
        if padding:
            return gxp[:, :, padding : padding + h, padding : padding + w].copy(), gw
        return gxp, gw

    return record(out, (x, weight), fn)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation, no bias.

    x: (N, C, H, W); weight: (Co, C/groups, k, k).  Output spatial size is
    floor((H + 2p - d*(k-1) - 1) / s) + 1 per axis.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D, got {x.data.ndim}-D")
    if weight.data.ndim != 4:
        raise DimensionError("conv2d weight must be 4-D")
    n, c, h, w = x.data.shape
    co, cg, kh, kw = weight.data.shape
    if kh != kw:
        raise DimensionError("conv2d kernels must be square")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise DimensionError("conv2d: stride/dilation must be >= 1, padding >= 0")
    if c % groups or co % groups:
        raise DimensionError(
            f"conv2d: channels {c} and filters {co} must divide groups {groups}"
        )
    if cg != c // groups:
        raise DimensionError(
            f"conv2d: weight expects {cg} channels per group, input has {c // groups}"
        )
    ho = _out_extent(h, kh, stride, padding, dilation)
    wo = _out_extent(w, kw, stride, padding, dilation)
    add_macs(n * co * ho * wo * cg * kh * kw)

    if groups == c and co == c and cg == 1:
        return _conv_depthwise(x, weight, stride, padding, dilation,
                               n, c, h, w, kh, kw, ho, wo)
    if kh == 1 and groups == 1 and padding == 0:
        return _conv_pointwise(x, weight, stride, n, c, h, w, co, ho, wo)
    return _conv_general(x, weight, stride, padding, dilation, groups,
                         n, c, h, w, co, cg, kh, kw, ho, wo)


def max_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max pooling; padded cells hold -inf so they never win, ties resolve to
    the first position in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError("max_pool2d input must be 4-D")
    n, c, h, w = x.data.shape
    ho = _out_extent(h, kernel, stride, padding, 1)
    wo = _out_extent(w, kernel, stride, padding, 1)
    xp = _pad0(x.data, padding, value=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]
    win = _windows(xp, kernel, kernel, stride, 1, ho, wo)
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    add_macs(n * c * ho * wo * kernel * kernel)

    def fn(gout):
        # scatter each output grad onto its winning input position
        hi = (np.arange(ho) * stride)[None, None, :, None] + idx // kernel
        wi = (np.arange(wo) * stride)[None, None, None, :] + idx % kernel
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        flat_idx = ((ni * c + ci) * hp + hi) * wp + wi
        gflat = np.zeros(n * c * hp * wp)
        np.add.at(gflat, flat_idx.ravel(), gout.ravel())
        gxp = gflat.reshape(n, c, hp, wp)
        if padding:
            return (gxp[:, :, padding : padding + h, padding : padding + w].copy(),)
        return (gxp,)

    return record(out, (x,), fn)


def avg_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average pooling with divisor kernel**2; zero padding counts toward the
    average (padded cells contribute zeros, the divisor stays kernel**2)."""
    if x.data.ndim != 4:
        raise DimensionError("avg_pool2d input must be 4-D")
    n, c, h, w = x.data.shape
    ho = _out_extent(h, kernel, stride, padding, 1)
    wo = _out_extent(w, kernel, stride, padding, 1)
    xp = _pad0(x.data, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    win = _windows(xp, kernel, kernel, stride, 1, ho, wo)
    denom = kernel * kernel
    out = win.sum(axis=(4, 5)) / denom
    add_macs(n * c * ho * wo * denom)

    def fn(gout):
        gxp = np.zeros((n, c, hp, wp))
        gshare = gout / denom
        for ki in range(kernel):
            for kj in range(kernel):
                gxp[:, :, ki : ki + ho * stride : stride,
                    kj : kj + wo * stride : stride] += gshare
        if padding:
            return (gxp[:, :, padding : padding + h, padding : padding + w].copy(),)
        return (gxp,)

    return record(out, (x,), fn)


def offset_crop(x: Tensor) -> Tensor:
    """Shift a feature map up-left by one pixel, zero-filling the far edge.

    Feeds the second path of a spatial reduction so the two stride-2
    convolutions together see every input pixel.
    """
    if x.data.ndim != 4:
        raise DimensionError("offset_crop input must be 4-D")
    out = np.zeros_like(x.data)
    out[:, :, :-1, :-1] = x.data[:, :, 1:, 1:]

    def fn(gout):
        g = np.zeros_like(gout)
        g[:, :, 1:, 1:] = gout[:, :, :-1, :-1]
        return (g,)

    return record(out, (x,), fn)


def batch_norm(x: Tensor, gamma, beta, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization for 4-D tensors.

    Training mode normalizes by biased batch statistics and folds them into
    the running buffers in place: r <- momentum * r + (1 - momentum) * stat.
    Evaluation mode normalizes by the running buffers.  gamma/beta are
    optional affine tensors of shape (C,); pass None for both to disable.
    """
    if x.data.ndim != 4:
        raise DimensionError("batch_norm input must be 4-D")
    n, c, h, w = x.data.shape
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError("batch_norm: running buffer shape mismatch")
    affine = gamma is not None
    if affine and (gamma.data.shape != (c,) or beta.data.shape != (c,)):
        raise DimensionError("batch_norm: affine parameter shape mismatch")
    xd = x.data
    m = n * h * w

    if training:
        if m < 2:
            raise DimensionError("batch_norm needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        # biased variance via E[x^2] - E[x]^2: one pass, fine in float64
        var = np.einsum("nchw,nchw->c", xd, xd) / m - mean * mean
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.copy()
        var = running_var.copy()

    inv = 1.0 / np.sqrt(var + eps)
    mc = mean.reshape(1, c, 1, 1)
    ic = inv.reshape(1, c, 1, 1)
    xhat = (xd - mc) * ic
    if affine:
        out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    else:
        out = xhat
    add_macs(2 * out.size)

    need_x = x.requires_grad

    if training:

        def fn(gout):
            xh = (xd - mc) * ic  # recomputed, not saved on the tape
            if affine:
                dgamma = (gout * xh).sum(axis=(0, 2, 3))
                dbeta = gout.sum(axis=(0, 2, 3))
                dxhat = gout * gamma.data.reshape(1, c, 1, 1)
            else:
                dxhat = gout
            if not need_x:
                return (None, dgamma, dbeta) if affine else (None,)
            mean_d = dxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            mean_dx = (dxhat * xh).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = ic * (dxhat - mean_d - xh * mean_dx)
            return (dx, dgamma, dbeta) if affine else (dx,)

    else:

        def fn(gout):
            if affine:
                xh = (xd - mc) * ic
                dgamma = (gout * xh).sum(axis=(0, 2, 3))
                dbeta = gout.sum(axis=(0, 2, 3))
                dx = gout * (gamma.data.reshape(1, c, 1, 1) * ic) if need_x else None
                return dx, dgamma, dbeta
            return (gout * ic,)

    parents = (x, gamma, beta) if affine else (x,)
    return record(out, parents, fn)
