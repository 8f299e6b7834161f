"""Dense numerical kernels: convolution, linear, batchnorm, pooling, losses.

Tensors are plain ``numpy.ndarray`` objects in row-major order.  Model code
keeps everything in float32; the kernels themselves preserve the dtype they
are given, which lets gradient checks run in float64.

Every differentiable kernel comes as a ``*_forward`` / ``*_backward`` pair.
There is no autograd tape.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def as_tensor(values, dtype=DTYPE):
    """Return ``values`` as a C-contiguous array of ``dtype``."""
    return np.ascontiguousarray(values, dtype=dtype)


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel_h", "kernel_w", "stride"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"ConvSpec.{name} must be >= 1", dim=name)
        if self.padding < 0:
            raise ShapeError("ConvSpec.padding must be >= 0", dim="padding")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h, w):
        # floor division, the usual convention (e.g. 7x7/2 pad 3 on 224 -> 112)
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} does not fit a padded {h}x{w} input",
                dim="H" if ho < 1 else "W",
            )
        return ho, wo


def _check_conv_operands(x, weights, bias, spec):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-d [N,C,H,W], got {x.shape}", dim="input.ndim")
    if tuple(weights.shape) != spec.weight_shape:
        for axis, name in enumerate(("Cout", "Cin", "Kh", "Kw")):
            if weights.ndim <= axis or weights.shape[axis] != spec.weight_shape[axis]:
                raise ShapeError(
                    f"conv weights {weights.shape} disagree with spec {spec.weight_shape} in {name}",
                    dim=name,
                )
        raise ShapeError(f"conv weights must be 4-d, got {weights.shape}", dim="weights.ndim")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels, spec expects {spec.in_channels}", dim="Cin"
        )
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"conv bias {bias.shape} must be ({spec.out_channels},)", dim="Cout")


def _im2col(x, spec):
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    s = spec.stride
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # [N,C,Ho,Wo,Kh,Kw] -> [N,Ho,Wo,C,Kh,Kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * spec.kernel_h * spec.kernel_w)
    return cols, ho, wo


def conv2d_forward(x, weights, bias, spec):
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``weights`` [Cout,Cin,Kh,Kw]."""
    _check_conv_operands(x, weights, bias, spec)
    n = x.shape[0]
    cols, ho, wo = _im2col(x, spec)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, spec.out_channels).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, weights, spec):
    """Gradients of :func:`conv2d_forward`: ``(grad_input, grad_weights, grad_bias)``."""
    _check_conv_operands(x, weights, None, spec)
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    if tuple(grad_out.shape) != (n, spec.out_channels, ho, wo):
        raise ShapeError(
            f"grad_out {grad_out.shape} does not match forward output {(n, spec.out_channels, ho, wo)}",
            dim="grad_out",
        )
    cols, _, _ = _im2col(x, spec)
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, spec.out_channels)
    grad_w = (g2.T @ cols).reshape(spec.weight_shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    gcols = (g2 @ weights.reshape(spec.out_channels, -1)).reshape(n, ho, wo, c, kh, kw)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # [N,C,Kh,Kw,Ho,Wo]
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[:, :, i, j]
    grad_x = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul operands {a.shape} and {b.shape} do not chain", dim="inner")
    return a @ b


def linear_forward(x, weights, bias=None):
    """``x`` [N,in] (or anything flattening to it) times ``weights.T`` [in,out]."""
    x2 = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or x2.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"linear input has {x2.shape[1]} features, weights {weights.shape} expect {weights.shape[-1]}",
            dim="in_features",
        )
    out = x2 @ weights.T
    if bias is not None:
        if tuple(bias.shape) != (weights.shape[0],):
            raise ShapeError(f"linear bias {bias.shape} must be ({weights.shape[0]},)", dim="out_features")
        out = out + bias
    return out


def linear_backward(grad_out, x, weights):
    x2 = x.reshape(x.shape[0], -1)
    if grad_out.shape != (x2.shape[0], weights.shape[0]):
        raise ShapeError(f"grad_out {grad_out.shape} does not match linear output", dim="grad_out")
    grad_x = (grad_out @ weights).reshape(x.shape)
    return grad_x, grad_out.T @ x2, grad_out.sum(axis=0)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}", dim="shape")
    return a + b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects [N,C] or [N,C,H,W], got {x.shape}", dim="input.ndim")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation followed by scale ``gamma`` and shift ``beta``.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, as in the common
    frameworks).  Returns ``(out, cache)``.
    """
    axes, bshape = _bn_axes(x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm {name} {arr.shape} must be ({c},)", dim="C")
    if training:
        m = x.size // c
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, training)


def batchnorm_backward(grad_out, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    axes, bshape = _bn_axes(grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    g = gamma.reshape(bshape) * inv_std.reshape(bshape)
    if not training:
        return grad_out * g, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    grad_x = g / m * (
        m * grad_out - grad_beta.reshape(bshape) - xhat * grad_gamma.reshape(bshape)
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}", dim="input.ndim")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, input_shape):
    n, c, h, w = input_shape
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], input_shape).astype(grad_out.dtype)


def max_pool2d_forward(x, kernel, stride, padding=0):
    """Max pooling; padded cells never win.  Returns ``(out, argmax_cache)``."""
    spec = ConvSpec(x.shape[1], x.shape[1], kernel, kernel, stride, padding)
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2), constant_values=-np.inf) if padding else x
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (arg, x.shape, kernel, stride, padding)


def max_pool2d_backward(grad_out, cache):
    arg, shape, kernel, stride, padding = cache
    n, c, h, w = shape
    _, _, ho, wo = grad_out.shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    di, dj = np.divmod(arg, kernel)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gxp, (nn, cc, rows, cols), grad_out)
    return gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree", dim="N")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError(f"labels must lie in [0, {c})", dim="class")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_z - z[np.arange(n), labels]))
    grad = np.exp(z - log_z[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype, copy=False)


def abs_mean_std(t):
    """Mean and population standard deviation of ``|t|``."""
    a = np.abs(np.asarray(t)).ravel()
    if a.size == 0:
        raise ShapeError("abs_mean_std of an empty tensor", dim="size")
    mean = a.mean(dtype=np.float64)
    std = np.sqrt(np.mean((a - mean) ** 2, dtype=np.float64))
    return float(mean), float(std)
