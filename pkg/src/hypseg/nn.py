"""Layer primitives and a small module system with a named-parameter registry."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, _lift, get_default_dtype, record

# -- convolution core (NCHW) --------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _tap(n_in: int, n_out: int, tap: int, stride: int, padding: int):
    """Output slice and input slice touched by kernel offset ``tap``."""
    # output o reads input stride*o + tap - padding
    lo = max(0, -(-(padding - tap) // stride))
    hi = min(n_out - 1, (n_in - 1 + padding - tap) // stride)
    if hi < lo:
        return None
    first = stride * lo + tap - padding
    return slice(lo, hi + 1), slice(first, first + stride * (hi - lo) + 1, stride)


def _taps(x_hw, y_hw, kh, kw, stride, padding):
    for i in range(kh):
        ti = _tap(x_hw[0], y_hw[0], i, stride, padding)
        if ti is None:
            continue
        for j in range(kw):
            tj = _tap(x_hw[1], y_hw[1], j, stride, padding)
            if tj is None:
                continue
            yield i, j, (ti[0], tj[0]), (ti[1], tj[1])


def _im2col(x, kh, kw, stride, padding, y_hw):
    B, C, H, W = x.shape
    cols = np.zeros((B, C, kh, kw) + tuple(y_hw), dtype=x.dtype)
    for i, j, (oh, ow), (ih, iw) in _taps((H, W), y_hw, kh, kw, stride, padding):
        cols[:, :, i, j, oh, ow] = x[:, :, ih, iw]
    return cols.reshape(B, C * kh * kw, y_hw[0] * y_hw[1])


def _col2im(cols, x_shape, kh, kw, stride, padding, y_hw):
    B, C, H, W = x_shape
    cols = cols.reshape((B, C, kh, kw) + tuple(y_hw))
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for i, j, (oh, ow), (ih, iw) in _taps((H, W), y_hw, kh, kw, stride, padding):
        dx[:, :, ih, iw] += cols[:, :, i, j, oh, ow]
    return dx


def _shift_sum(Z, y_shape, kh, kw, stride, padding):
    # Z: (B, kh, kw, O, H, W) per-tap projections of the input
    B, _, _, O, H, W = Z.shape
    out = np.zeros(y_shape, dtype=Z.dtype)
    for i, j, (oh, ow), (ih, iw) in _taps((H, W), y_shape[2:], kh, kw, stride, padding):
        out[:, :, oh, ow] += Z[:, i, j, :, ih, iw]
    return out


def _shift_scatter(dy, x_hw, kh, kw, stride, padding):
    B, O, Ho, Wo = dy.shape
    dZ = np.zeros((B, kh, kw, O) + tuple(x_hw), dtype=dy.dtype)
    for i, j, (oh, ow), (ih, iw) in _taps(x_hw, (Ho, Wo), kh, kw, stride, padding):
        dZ[:, i, j, :, ih, iw] = dy[:, :, oh, ow]
    return dZ


def _use_im2col(C, O, x_hw, y_hw) -> bool:
    # pick the strategy with the smaller intermediate buffer
    return C * y_hw[0] * y_hw[1] <= O * x_hw[0] * x_hw[1]


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    y_hw = (conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding))
    if kh == kw == 1 and stride == 1 and padding == 0:
        return (w.reshape(O, C) @ x.reshape(B, C, H * W)).reshape(B, O, H, W)
    if _use_im2col(C, O, (H, W), y_hw):
        cols = _im2col(x, kh, kw, stride, padding, y_hw)
        return (w.reshape(O, -1) @ cols).reshape(B, O, *y_hw)
    wcat = w.transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
    Z = (wcat @ x.reshape(B, C, H * W)).reshape(B, kh, kw, O, H, W)
    return _shift_sum(Z, (B, O) + y_hw, kh, kw, stride, padding)


def conv_backward_data(dy: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    B, C, H, W = x_shape
    O, _, kh, kw = w.shape
    y_hw = dy.shape[2:]
    if kh == kw == 1 and stride == 1 and padding == 0:
        return (w.reshape(O, C).T @ dy.reshape(B, O, H * W)).reshape(x_shape)
    if _use_im2col(C, O, (H, W), y_hw):
        dcols = w.reshape(O, -1).T @ dy.reshape(B, O, -1)
        return _col2im(dcols, x_shape, kh, kw, stride, padding, y_hw)
    dZ = _shift_scatter(dy, (H, W), kh, kw, stride, padding).reshape(B, kh * kw * O, H * W)
    wcat = w.transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
    return (wcat.T @ dZ).reshape(x_shape)


def conv_backward_weight(dy: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, kh, kw = w_shape
    y_hw = dy.shape[2:]
    if kh == kw == 1 and stride == 1 and padding == 0:
        return np.einsum("boh,bch->oc", dy.reshape(B, O, -1), x.reshape(B, C, -1)).reshape(w_shape)
    if _use_im2col(C, O, (H, W), y_hw):
        cols = _im2col(x, kh, kw, stride, padding, y_hw)
        return (dy.reshape(B, O, -1) @ cols.transpose(0, 2, 1)).sum(0).reshape(w_shape)
    dZ = _shift_scatter(dy, (H, W), kh, kw, stride, padding).reshape(B, kh * kw * O, H * W)
    dwcat = (dZ @ x.reshape(B, C, H * W).transpose(0, 2, 1)).sum(0)
    return dwcat.reshape(kh, kw, O, C).transpose(2, 3, 0, 1)


# -- functional layers ----------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding. x: B×Cin×H×W, w: Cout×Cin×kh×kw."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    H, W = x.shape[2:]
    kh, kw = w.shape[2:]
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(f"input {H}x{W} with padding {padding} is smaller than kernel {kh}x{kw}")
    xd, wd = x.data, w.data
    out = conv_forward(xd, wd, stride, padding)
    inputs = [x, w]
    if b is not None:
        b = _lift(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        inputs.append(b)

    def bw(g):
        gx = conv_backward_data(g, wd, xd.shape, stride, padding) if x.requires_grad else None
        gw = conv_backward_weight(g, xd, wd.shape, stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d", out, inputs, bw)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1, output_padding: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d`. w: Cin×Cout×kh×kw; output is ``stride`` times the input size."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    B, _, H, W = x.shape
    kh, kw = w.shape[2:]
    Ho = (H - 1) * stride - 2 * padding + kh + output_padding
    Wo = (W - 1) * stride - 2 * padding + kw + output_padding
    if (Ho, Wo) != (stride * H, stride * W) or not 0 <= output_padding < stride:
        raise ValueError(
            f"inconsistent transposed-conv geometry: {H}x{W} -> {Ho}x{Wo}, expected {stride * H}x{stride * W}"
        )
    y_shape = (B, w.shape[1], Ho, Wo)
    xd, wd = x.data, w.data
    out = conv_backward_data(xd, wd, y_shape, stride, padding)
    inputs = [x, w]
    if b is not None:
        b = _lift(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        inputs.append(b)

    def bw(g):
        gx = conv_forward(g, wd, stride, padding) if x.requires_grad else None
        gw = conv_backward_weight(xd, g, wd.shape, stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv_transpose2d", out, inputs, bw)


def max_pool2d(x, k: int = 2, stride: int = 2) -> Tensor:
    x = _lift(x)
    if k != 2 or stride != 2:
        raise ValueError("only 2x2 pooling with stride 2 is supported")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d needs even spatial size, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return record("max_pool2d", out, (x,), bw)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True, momentum=0.1, eps=1e-5) -> Tensor:
    """Normalise over every axis except axis 1 (channels).

    In training mode the running buffers (numpy arrays) are updated in
    place; the running variance uses the unbiased batch estimate.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.shape[0] == 0:
        raise ValueError("batch_norm on an empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    n = xd.size // xd.shape[1]
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    g = gamma.data.reshape(bshape)
    out = xhat * g + beta.data.reshape(bshape)

    def bw(dy):
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        if not x.requires_grad:
            return None, dgamma, dbeta
        dxhat = dy * g
        if training:
            dx = (inv_std.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return record("batch_norm", out, (x, gamma, beta), bw)


def linear(x, w, b=None) -> Tensor:
    """x: N×din, w: dout×din, b: dout."""
    x, w = _lift(x), _lift(w)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear expects {w.shape[1]} input features, got {x.shape[-1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    inputs = [x, w]
    if b is not None:
        b = _lift(b)
        out = out + b.data
        inputs.append(b)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(0)

    return record("linear", out, inputs, bw)


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    # np.maximum keeps NaN, so corrupt input surfaces as a non-finite loss
    return record("relu", np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), bw)


def dropout(x, rate: float, training: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity in eval mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _lift(x)
    if not training or rate == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- modules --------------------------------------------------------------


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class ParamRegistry(OrderedDict):
    """Ordered ``name -> Tensor`` map with hierarchical dotted names."""

    def param_count(self) -> int:
        return param_count(self)


def param_count(registry) -> int:
    return int(sum(t.size for t in registry.values()))


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def registry(self) -> ParamRegistry:
        return ParamRegistry(self.named_parameters())

    def trainable_registry(self) -> ParamRegistry:
        return ParamRegistry((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, m in self.children():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        object.__setattr__(self, "frozen", True)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.dtype).reshape(p.shape)
        for name, buf in self.named_buffers():
            buf[...] = state[name]

    def astype(self, dtype) -> "Module":
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        for name in list(self._buffers):
            self.register_buffer(name, self._buffers[name].astype(dtype))
        for _, m in self.children():
            m.astype(dtype)
        return self


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=None) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng=None, bias: bool = True):
        super().__init__()
        rng = _rng(rng)
        self.weight = Parameter(kaiming_uniform((dout, din), din, rng))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1, padding: int = 1, rng=None):
        super().__init__()
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("kernel_size and stride must be positive, padding non-negative")
        rng = _rng(rng)
        k = kernel_size
        self.stride, self.padding = stride, padding
        self.weight = Parameter(kaiming_uniform((cout, cin, k, k), cin * k * k, rng))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 2, padding: int = 1,
                 output_padding: int = 1, rng=None):
        super().__init__()
        rng = _rng(rng)
        k = kernel_size
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = Parameter(kaiming_uniform((cin, cout, k, k), cout * k * k, rng))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        dtype = get_default_dtype()
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum, eps=self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = _rng(rng)

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.rng)
