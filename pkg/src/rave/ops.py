"""Differentiable tensor operations (channel-last, ``[H, W, C]`` frames)."""

from __future__ import annotations

import numpy as np

from rave.autograd import DomainError, ShapeError, Tensor, as_tensor, make_result


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _scalar_like(a, b)
    b = _scalar_like(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        axis = _first_mismatch(a.shape, b.shape)
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast (axis {axis})", axis) from None
    return a, b


def _first_mismatch(sa, sb) -> int | None:
    if len(sa) != len(sb):
        return None
    for i, (x, y) in enumerate(zip(sa, sb)):
        if x != y and 1 not in (x, y):
            return i
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1, slope).astype(a.dtype)
    return make_result(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value; use softplus for cross-entropy terms")
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    ad = a.data
    return make_result(np.logaddexp(0, ad).astype(a.dtype), (a,), lambda g: (g * _sigmoid(ad),))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {
        "square": square,
        "relu": relu,
        "leaky_relu": leaky_relu,
        "sigmoid": sigmoid,
        "log": log,
        "softplus": softplus,
        "neg": neg,
    }
    if op in binary:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / count, dtype=a.dtype)))


def spatial_mean(x: Tensor) -> Tensor:
    """Mean of an ``[H, W, 1]`` map, as a scalar tensor."""
    if x.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"spatial_mean expects [H, W, 1], got {x.shape}", 2 if x.ndim == 3 else None)
    return mean(x)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over both spatial axes: ``[H, W, F] -> [1, 1, F]``."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [H, W, F], got {x.shape}")
    h, w, _ = x.shape
    inv = np.asarray(1.0 / (h * w), dtype=x.dtype)
    return make_result(
        x.data.mean(axis=(0, 1), keepdims=True).astype(x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g * inv, x.shape).copy(),),
    )


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def index(a: Tensor, idx) -> Tensor:
    def grad(g):
        full = np.zeros_like(a.data)
        if _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_result(a.data[idx], (a,), grad)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return make_result(np.stack([p.data for p in parts], axis=axis), parts, grad)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate ``[H, W, C_i]`` tensors along channels, preserving order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    hw = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != hw:
            axis = _first_mismatch(p.shape[:-1], hw)
            raise ShapeError(f"cannot concat {p.shape} with leading extents {hw} (axis {axis})", axis)
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]
    return make_result(
        np.concatenate([p.data for p in parts], axis=-1),
        parts,
        lambda g: tuple(np.split(g, splits, axis=-1)),
    )


def replicate_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Tile a ``[1, 1, F]`` vector over an ``h x w`` grid."""
    if v.ndim != 3 or v.shape[:2] != (1, 1):
        raise ShapeError(f"replicate_spatial expects [1, 1, F], got {v.shape}")
    if h < 1 or w < 1:
        raise ShapeError(f"replicate_spatial needs h, w >= 1, got {h}x{w}")
    return make_result(
        np.broadcast_to(v.data, (h, w, v.shape[2])).copy(),
        (v,),
        lambda g: (g.sum(axis=(0, 1), keepdims=True),),
    )


def space_to_depth(x: Tensor, block: int) -> Tensor:
    """``[H, W, C] -> [H/b, W/b, C*b*b]``; channel index is ``(dy*b + dx)*C + c``."""
    h, w, c = x.shape
    for axis, n in ((0, h), (1, w)):
        if n % block:
            raise ShapeError(f"block {block} does not divide extent {n} on axis {axis}", axis)
    b = block
    out = x.data.reshape(h // b, b, w // b, b, c).transpose(0, 2, 1, 3, 4).reshape(h // b, w // b, b * b * c)

    def grad(g):
        return (g.reshape(h // b, w // b, b, b, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c),)

    return make_result(out, (x,), grad)


def depth_to_space(x: Tensor, block: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    h, w, cb = x.shape
    b = block
    if cb % (b * b):
        raise ShapeError(f"channels {cb} not divisible by {b * b}", 2)
    c = cb // (b * b)
    out = x.data.reshape(h, w, b, b, c).transpose(0, 2, 1, 3, 4).reshape(h * b, w * b, c)

    def grad(g):
        return (g.reshape(h, b, w, b, c).transpose(0, 2, 1, 3, 4).reshape(h, w, cb),)

    return make_result(out, (x,), grad)


# ---------------------------------------------------------------- resampling


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel centres: out[2i] = .25 a[i-1] + .75 a[i], out[2i+1] = .75 a[i] + .25 a[i+1], edges clamped
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    even = 0.25 * prev + 0.75 * a
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=1).reshape((2 * a.shape[0],) + a.shape[1:])
    return np.moveaxis(out, 0, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] // 2
    g = g.reshape((n, 2) + g.shape[1:])
    even, odd = g[:, 0], g[:, 1]
    out = 0.75 * even + 0.75 * odd
    # even[i] took .25 from a[i-1] (clamped to a[0] at i=0)
    out[:-1] += 0.25 * even[1:]
    out[0] += 0.25 * even[0]
    # odd[i] took .25 from a[i+1] (clamped to a[n-1] at the end)
    out[1:] += 0.25 * odd[:-1]
    out[-1] += 0.25 * odd[-1]
    return np.moveaxis(out, 0, axis)


def bilinear_resize_x2(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (align-corners off)."""
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"bilinear_resize_x2 expects non-empty [H, W, C], got {x.shape}")
    dt = x.dtype
    out = _up2_axis(_up2_axis(x.data, 0), 1).astype(dt)
    return make_result(out, (x,), lambda g: (_up2_axis_adjoint(_up2_axis_adjoint(g, 1), 0).astype(dt),))


# ---------------------------------------------------------------- convolution
#
# Three kernels share one contract. Stride-1 convs multiply every padded pixel
# by all k*k weight slices at once and sum shifted views of the result, which
# moves far less memory than im2col when Cout <= Cin. Non-overlapping patch
# convs (k == stride, valid) are a reshape plus one matmul. Anything else uses
# im2col.


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return a
    out = np.zeros((a.shape[0] + 2 * p, a.shape[1] + 2 * p, a.shape[2]), a.dtype)
    out[p:-p, p:-p] = a
    return out


def _conv_shifted(xp: np.ndarray, weight: Tensor, ho: int, wo: int, x_needs: bool):
    k, _, cin, cout = weight.shape
    hp, wp = xp.shape[:2]
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    xflat = xp.reshape(hp * wp, cin)
    y = (xflat @ wmat).reshape(hp, wp, k * k, cout)
    out = y[0:ho, 0:wo, 0].copy()
    for i in range(1, k * k):
        ky, kx = divmod(i, k)
        out += y[ky : ky + ho, kx : kx + wo, i]

    def grad(g):
        gb = np.zeros((hp, wp, k * k, cout), g.dtype)
        for i in range(k * k):
            ky, kx = divmod(i, k)
            gb[ky : ky + ho, kx : kx + wo, i] = g
        gflat = gb.reshape(hp * wp, k * k * cout)
        gxp = (gflat @ wmat.T).reshape(hp, wp, cin) if x_needs else None
        gw = None
        if weight.requires_grad:
            gw = (xflat.T @ gflat).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        return gxp, gw

    return out, grad


def _conv_patches(x: np.ndarray, weight: Tensor, ho: int, wo: int, x_needs: bool):
    k, _, cin, cout = weight.shape
    cols = x.reshape(ho, k, wo, k, cin).transpose(0, 2, 1, 3, 4).reshape(ho * wo, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(ho, wo, cout)

    def grad(g):
        g2 = g.reshape(ho * wo, cout)
        gx = gw = None
        if x_needs:
            gx = (g2 @ wmat.T).reshape(ho, wo, k, k, cin).transpose(0, 2, 1, 3, 4).reshape(ho * k, wo * k, cin)
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        return gx, gw

    return out, grad


def _conv_im2col(xp: np.ndarray, weight: Tensor, stride: int, ho: int, wo: int, x_needs: bool):
    k, _, cin, cout = weight.shape
    cols = np.concatenate(
        [
            xp[ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :]
            for ky in range(k)
            for kx in range(k)
        ],
        axis=-1,
    ).reshape(ho * wo, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(ho, wo, cout)

    def grad(g):
        g2 = g.reshape(ho * wo, cout)
        gxp = gw = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(weight.shape)
        if x_needs:
            gcols = (g2 @ wmat.T).reshape(ho, wo, k * k, cin)
            gxp = np.zeros(xp.shape, g.dtype)
            for i in range(k * k):
                ky, kx = divmod(i, k)
                gxp[ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += gcols[:, :, i]
        return gxp, gw

    return out, grad


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``[H, W, Cin]`` with ``[k, k, Cin, Cout]``.

    ``padding="same"`` zero-pads by ``k // 2`` (odd ``k`` only); ``"valid"``
    uses no padding.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be [H, W, C], got {x.shape}")
    if weight.ndim != 4 or weight.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d weight must be [k, k, Cin, Cout], got {weight.shape}")
    k, _, cin, cout = weight.shape
    h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but weight expects {cin} (axis 2)", 2)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)", 0)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"same padding needs an odd kernel, got k={k}", 0)
        p = k // 2
    elif padding == "valid":
        p = 0
        for axis, n in ((0, h), (1, w)):
            if n < k:
                raise ShapeError(f"extent {n} on axis {axis} smaller than kernel {k}", axis)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    x_needs = x.requires_grad
    if stride == k and p == 0 and h % k == 0 and w % k == 0:
        out, kernel_grad = _conv_patches(x.data, weight, ho, wo, x_needs)
        crop = False
    elif stride == 1:
        out, kernel_grad = _conv_shifted(_pad_hw(x.data, p), weight, ho, wo, x_needs)
        crop = True
    else:
        out, kernel_grad = _conv_im2col(_pad_hw(x.data, p), weight, stride, ho, wo, x_needs)
        crop = True
    if bias is not None:
        out += bias.data

    def grad(g):
        gx, gw = kernel_grad(g)
        if gx is not None and crop and (p or gx.shape[:2] != (h, w)):
            gx = gx[p : p + h, p : p + w]
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, cout).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, grad)
