"""The operator set used by the text tower, backbone, fusion and loss."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from useg.autograd.tensor import Op, Tensor, apply_op, register, unbroadcast
from useg.errors import InvalidAttr, ShapeMismatch


def _broadcast_check(name, shapes):
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeMismatch(f"{name}: cannot broadcast {shapes}") from None


def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise InvalidAttr(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise InvalidAttr(f"repeated axis in {axis}")
    return tuple(sorted(out))


# --------------------------------------------------------------------------
# elementwise binary


@register
class Add(Op):
    name = "add"
    n_inputs = 2

    def check(self, shapes, attrs):
        _broadcast_check(self.name, shapes)

    def forward(self, ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(g, sb)


@register
class Sub(Op):
    name = "sub"
    n_inputs = 2

    def check(self, shapes, attrs):
        _broadcast_check(self.name, shapes)

    def forward(self, ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(-g, sb)


@register
class Mul(Op):
    name = "mul"
    n_inputs = 2

    def check(self, shapes, attrs):
        _broadcast_check(self.name, shapes)

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


@register
class Div(Op):
    name = "div"
    n_inputs = 2

    def check(self, shapes, attrs):
        _broadcast_check(self.name, shapes)

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a / b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)


@register
class MatMul(Op):
    name = "matmul"
    n_inputs = 2

    def check(self, shapes, attrs):
        sa, sb = shapes
        if len(sa) < 2 or len(sb) < 2:
            raise ShapeMismatch(f"matmul needs >=2-d inputs, got {sa} and {sb}")
        if sa[-1] != sb[-2]:
            raise ShapeMismatch(f"matmul inner dims differ: {sa} @ {sb}")
        _broadcast_check(self.name, [sa[:-2], sb[:-2]])

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return np.matmul(a, b)

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


# --------------------------------------------------------------------------
# elementwise unary


@register
class Exp(Op):
    name = "exp"
    n_inputs = 1

    def forward(self, ctx, x):
        y = np.exp(x)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        return (g * ctx["y"],)


@register
class Log(Op):
    name = "log"
    n_inputs = 1

    def forward(self, ctx, x):
        ctx["x"] = x
        return np.log(x)

    def backward(self, ctx, g):
        return (g / ctx["x"],)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


@register
class Sigmoid(Op):
    name = "sigmoid"
    n_inputs = 1

    def forward(self, ctx, x):
        y = _sigmoid(x)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        y = ctx["y"]
        return (g * y * (1 - y),)


@register
class SiLU(Op):
    name = "silu"
    n_inputs = 1

    def forward(self, ctx, x):
        s = _sigmoid(x)
        ctx["x"], ctx["s"] = x, s
        return x * s

    def backward(self, ctx, g):
        x, s = ctx["x"], ctx["s"]
        return (g * s * (1 + x * (1 - s)),)


@register
class Softplus(Op):
    name = "softplus"
    n_inputs = 1

    def forward(self, ctx, x):
        ctx["x"] = x
        return np.logaddexp(0, x).astype(x.dtype, copy=False)

    def backward(self, ctx, g):
        return (g * _sigmoid(ctx["x"]),)


# --------------------------------------------------------------------------
# reductions and normalisation


@register
class Sum(Op):
    name = "sum"
    n_inputs = 1

    def check(self, shapes, attrs):
        _norm_axes(attrs.get("axis"), len(shapes[0]))

    def forward(self, ctx, x, axis=None, keepdims=False):
        axes = _norm_axes(axis, x.ndim)
        ctx["shape"], ctx["axes"], ctx["keepdims"] = x.shape, axes, keepdims
        return np.asarray(x.sum(axis=axes, keepdims=keepdims))

    def backward(self, ctx, g):
        shape, axes = ctx["shape"], ctx["axes"]
        if not ctx["keepdims"]:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


@register
class Mean(Op):
    name = "mean"
    n_inputs = 1

    def check(self, shapes, attrs):
        _norm_axes(attrs.get("axis"), len(shapes[0]))

    def forward(self, ctx, x, axis=None, keepdims=False):
        axes = _norm_axes(axis, x.ndim)
        ctx["shape"], ctx["axes"], ctx["keepdims"] = x.shape, axes, keepdims
        ctx["n"] = int(np.prod([x.shape[a] for a in axes]))
        return np.asarray(x.mean(axis=axes, keepdims=keepdims))

    def backward(self, ctx, g):
        shape, axes = ctx["shape"], ctx["axes"]
        if not ctx["keepdims"]:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / ctx["n"], shape).copy(),)


@register
class LayerNorm(Op):
    """Zero-mean, unit-variance normalisation over ``axis`` (no affine)."""

    name = "layer_norm"
    n_inputs = 1

    def check(self, shapes, attrs):
        _norm_axes(attrs.get("axis", -1), len(shapes[0]))
        if attrs.get("eps", 1e-5) <= 0:
            raise InvalidAttr("layer_norm eps must be positive")

    def forward(self, ctx, x, axis=-1, eps=1e-5):
        axes = _norm_axes(axis, x.ndim)
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        ctx["y"], ctx["inv"], ctx["axes"] = y, inv, axes
        return y

    def backward(self, ctx, g):
        y, inv, axes = ctx["y"], ctx["inv"], ctx["axes"]
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)


@register
class Softmax(Op):
    name = "softmax"
    n_inputs = 1

    def check(self, shapes, attrs):
        _norm_axes(attrs.get("axis", -1), len(shapes[0]))

    def forward(self, ctx, x, axis=-1):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        y = z / z.sum(axis=axis, keepdims=True)
        ctx["y"], ctx["axis"] = y, axis
        return y

    def backward(self, ctx, g):
        y, axis = ctx["y"], ctx["axis"]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@register
class LogSoftmax(Op):
    name = "log_softmax"
    n_inputs = 1

    def check(self, shapes, attrs):
        _norm_axes(attrs.get("axis", -1), len(shapes[0]))

    def forward(self, ctx, x, axis=-1):
        xs = x - x.max(axis=axis, keepdims=True)
        y = xs - np.log(np.exp(xs).sum(axis=axis, keepdims=True))
        ctx["y"], ctx["axis"] = y, axis
        return y

    def backward(self, ctx, g):
        y, axis = ctx["y"], ctx["axis"]
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


# --------------------------------------------------------------------------
# shape manipulation


@register
class Reshape(Op):
    name = "reshape"
    n_inputs = 1

    def check(self, shapes, attrs):
        shape = attrs.get("shape")
        if shape is None:
            raise InvalidAttr("reshape needs a shape")
        try:
            np.empty(shapes[0], dtype=np.bool_).reshape(shape)
        except ValueError:
            raise ShapeMismatch(f"cannot reshape {shapes[0]} to {shape}") from None

    def forward(self, ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    def backward(self, ctx, g):
        return (g.reshape(ctx["shape"]),)


@register
class Transpose(Op):
    name = "transpose"
    n_inputs = 1

    def check(self, shapes, attrs):
        axes = attrs.get("axes")
        if axes is None or sorted(a % len(shapes[0]) for a in axes) != list(range(len(shapes[0]))):
            raise InvalidAttr(f"transpose axes {axes} invalid for shape {shapes[0]}")

    def forward(self, ctx, x, axes):
        ctx["axes"] = axes
        return np.ascontiguousarray(np.transpose(x, axes))

    def backward(self, ctx, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(ctx["axes"]))),)


@register
class Flip(Op):
    """Reverse the order of elements along one axis."""

    name = "flip"
    n_inputs = 1

    def check(self, shapes, attrs):
        _norm_axes(attrs.get("axis"), len(shapes[0]))

    def forward(self, ctx, x, axis):
        ctx["axis"] = axis
        return np.ascontiguousarray(np.flip(x, axis))

    def backward(self, ctx, g):
        return (np.ascontiguousarray(np.flip(g, ctx["axis"])),)


@register
class Concat(Op):
    name = "concat"
    n_inputs = None

    def check(self, shapes, attrs):
        if not shapes:
            raise ShapeMismatch("concat of nothing")
        nd = len(shapes[0])
        axis = _norm_axes(attrs.get("axis", 0), nd)[0]
        for s in shapes[1:]:
            if len(s) != nd or any(a != b for i, (a, b) in enumerate(zip(s, shapes[0])) if i != axis):
                raise ShapeMismatch(f"concat shapes disagree off-axis: {shapes}")

    def forward(self, ctx, *xs, axis=0):
        ctx["sizes"] = [x.shape[axis] for x in xs]
        ctx["axis"] = axis
        return np.concatenate(xs, axis=axis)

    def backward(self, ctx, g):
        cuts = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, cuts, axis=ctx["axis"]))


# --------------------------------------------------------------------------
# convolutions (NCHW, weight OIHW for conv2d, IOHW for transposed conv)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> (B,ho,wo,C,kh,kw) patch tensor, contiguous."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B,ho,wo,C,kh,kw) patches back."""
    b, ho, wo, c, kh, kw = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[..., i, j]
    return out


def _check_conv_attrs(attrs):
    stride, padding = attrs.get("stride", 1), attrs.get("padding", 0)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise InvalidAttr(f"stride must be an integer >= 1, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise InvalidAttr(f"padding must be an integer >= 0, got {padding!r}")
    return stride, padding


@register
class Conv2d(Op):
    name = "conv2d"
    n_inputs = None  # x, w[, b]

    def check(self, shapes, attrs):
        stride, padding = _check_conv_attrs(attrs)
        if len(shapes) not in (2, 3):
            raise InvalidAttr("conv2d takes x, w and an optional bias")
        xs, ws = shapes[0], shapes[1]
        if len(xs) != 4 or len(ws) != 4:
            raise ShapeMismatch(f"conv2d needs 4-d x and w, got {xs}, {ws}")
        if xs[1] != ws[1]:
            raise ShapeMismatch(f"conv2d channels: x has {xs[1]}, w expects {ws[1]}")
        if len(shapes) == 3 and tuple(shapes[2]) != (ws[0],):
            raise ShapeMismatch(f"conv2d bias shape {shapes[2]} != ({ws[0]},)")
        if xs[2] + 2 * padding < ws[2] or xs[3] + 2 * padding < ws[3]:
            raise ShapeMismatch("conv2d kernel larger than padded input")

    def forward(self, ctx, x, w, b=None, stride=1, padding=0):
        bsz, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, c * kh * kw)
        wm = w.reshape(o, -1)
        y = cols @ wm.T
        if b is not None:
            y += b
        ctx.update(cols=cols, w=w, xp_shape=xp.shape, x_shape=x.shape, stride=stride,
                   padding=padding, ho=ho, wo=wo, has_bias=b is not None)
        return np.ascontiguousarray(y.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(self, ctx, g):
        w = ctx["w"]
        o, c, kh, kw = w.shape
        bsz = ctx["x_shape"][0]
        ho, wo, p = ctx["ho"], ctx["wo"], ctx["padding"]
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ ctx["cols"]).reshape(w.shape)
        h, wd = ctx["x_shape"][2:]
        if ctx["stride"] == 1 and p <= kh - 1 and p <= kw - 1:
            # stride-1 input gradient is a full correlation with the flipped kernel
            gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p), (kw - 1 - p, kw - 1 - p)))
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
            gx = (_im2col(gpad, kh, kw, 1, h, wd).reshape(bsz * h * wd, -1) @ wf.T)
            gx = gx.reshape(bsz, h, wd, c).transpose(0, 3, 1, 2)
        else:
            gcols = (gm @ w.reshape(o, -1)).reshape(bsz, ho, wo, c, kh, kw)
            gxp = _col2im(gcols, ctx["xp_shape"], ctx["stride"])
            gx = gxp[:, :, p : p + h, p : p + wd]
        out = [np.ascontiguousarray(gx), gw]
        if ctx["has_bias"]:
            out.append(gm.sum(axis=0))
        return tuple(out)


@register
class ConvTranspose2d(Op):
    name = "conv_transpose2d"
    n_inputs = None  # x, w[, b]

    def check(self, shapes, attrs):
        stride, padding = _check_conv_attrs(attrs)
        if len(shapes) not in (2, 3):
            raise InvalidAttr("conv_transpose2d takes x, w and an optional bias")
        xs, ws = shapes[0], shapes[1]
        if len(xs) != 4 or len(ws) != 4:
            raise ShapeMismatch(f"conv_transpose2d needs 4-d x and w, got {xs}, {ws}")
        if xs[1] != ws[0]:
            raise ShapeMismatch(f"conv_transpose2d channels: x has {xs[1]}, w expects {ws[0]}")
        if len(shapes) == 3 and tuple(shapes[2]) != (ws[1],):
            raise ShapeMismatch(f"conv_transpose2d bias shape {shapes[2]} != ({ws[1]},)")
        if (xs[2] - 1) * stride - 2 * padding + ws[2] < 1:
            raise InvalidAttr("conv_transpose2d output would be empty")

    def forward(self, ctx, x, w, b=None, stride=1, padding=0):
        bsz, c, h, wd = x.shape
        _, o, kh, kw = w.shape
        hp = (h - 1) * stride + kh
        wp = (wd - 1) * stride + kw
        xm = x.transpose(0, 2, 3, 1).reshape(-1, c)
        cols = (xm @ w.reshape(c, -1)).reshape(bsz, h, wd, o, kh, kw)
        yp = _col2im(cols, (bsz, o, hp, wp), stride)
        y = yp[:, :, padding : hp - padding, padding : wp - padding]
        if b is not None:
            y = y + b[None, :, None, None]
        ctx.update(xm=xm, w=w, x_shape=x.shape, stride=stride, padding=padding, has_bias=b is not None)
        return np.ascontiguousarray(y)

    def backward(self, ctx, g):
        w = ctx["w"]
        c, o, kh, kw = w.shape
        bsz, _, h, wd = ctx["x_shape"]
        p, s = ctx["padding"], ctx["stride"]
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gp, kh, kw, s, h, wd).reshape(bsz * h * wd, o * kh * kw)
        gx = (gcols @ w.reshape(c, -1).T).reshape(bsz, h, wd, c).transpose(0, 3, 1, 2)
        gw = (ctx["xm"].T @ gcols).reshape(w.shape)
        out = [np.ascontiguousarray(gx), gw]
        if ctx["has_bias"]:
            out.append(g.sum(axis=(0, 2, 3)))
        return tuple(out)


# --------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    return apply_op("add", [a, b])


def mul(a, b):
    return apply_op("mul", [a, b])


def matmul(a, b):
    return apply_op("matmul", [a, b])


def exp(x):
    return apply_op("exp", [x])


def log(x):
    return apply_op("log", [x])


def sigmoid(x):
    return apply_op("sigmoid", [x])


def silu(x):
    return apply_op("silu", [x])


def softplus(x):
    return apply_op("softplus", [x])


def softmax(x, axis=-1):
    return apply_op("softmax", [x], {"axis": axis})


def log_softmax(x, axis=-1):
    return apply_op("log_softmax", [x], {"axis": axis})


def layer_norm(x, axis=-1, eps=1e-5):
    return apply_op("layer_norm", [x], {"axis": axis, "eps": eps})


def mean(x, axis=None, keepdims=False):
    return apply_op("mean", [x], {"axis": axis, "keepdims": keepdims})


def sum_(x, axis=None, keepdims=False):
    return apply_op("sum", [x], {"axis": axis, "keepdims": keepdims})


def concat(xs: Sequence[Tensor], axis=0):
    return apply_op("concat", list(xs), {"axis": axis})


def flip(x, axis):
    return apply_op("flip", [x], {"axis": axis})


def reshape(x, shape):
    return apply_op("reshape", [x], {"shape": tuple(shape)})


def transpose(x, axes):
    return apply_op("transpose", [x], {"axes": tuple(axes)})


def conv2d(x, w, b: Optional[Tensor] = None, stride=1, padding=0):
    inputs = [x, w] if b is None else [x, w, b]
    return apply_op("conv2d", inputs, {"stride": stride, "padding": padding})


def conv_transpose2d(x, w, b: Optional[Tensor] = None, stride=1, padding=0):
    inputs = [x, w] if b is None else [x, w, b]
    return apply_op("conv_transpose2d", inputs, {"stride": stride, "padding": padding})


def linear(x, w, b: Optional[Tensor] = None):
    """x @ w (+ b) with w stored as (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)
