"""Dense numpy layers with hand-written reverse-mode gradients.

Only the layer kinds the detector needs are provided. Activations are plain
``np.ndarray`` in NCHW layout; weights live in :class:`Parameter` objects that
carry a same-shape gradient buffer. Every layer caches what its backward pass
needs when ``forward`` runs with ``train=True``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class Parameter:
    """A trainable array plus its gradient accumulator."""

    def __init__(self, data, group: str = "default"):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)
        self.group = group

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    """Base for layers and containers: parameter/buffer traversal only."""

    kind = "Module"

    def children(self) -> dict[str, "Module"]:
        return {}

    def own_parameters(self) -> dict[str, Parameter]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray):
        setattr(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self.own_parameters().items():
            yield prefix + name, p
        for cname, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self.own_buffers().items():
            yield prefix + name, self, name, b
        for cname, child in self.children().items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self.children().values():
            yield from child.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = p.grad.astype(dtype)
        for _, owner, name, b in list(self.named_buffers()):
            owner.set_buffer(name, b.astype(dtype))
        return self

    def clear_cache(self):
        for m in self.modules():
            if hasattr(m, "_cache"):
                m._cache = None


def _check_input(layer, x, channels):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(
            f"{layer.kind} expects input (N, {channels}, H, W), got {tuple(x.shape)}")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    kind = "Conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=None, bias=False, rng=None):
        if stride < 1 or kernel_size % 2 == 0 or in_channels <= 0 or out_channels <= 0:
            raise ValueError("invalid conv spec")
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, np.float32)) if bias else None
        self._cache = None

    def own_parameters(self):
        d = {"weight": self.weight}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.kind}: channel mismatch {c} vs {self.in_channels}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (n, self.out_channels, conv_out_size(h, k, s, p), conv_out_size(w, k, s, p))

    def macs(self, in_shape) -> int:
        _, co, ho, wo = self.output_shape(in_shape)
        return ho * wo * co * self.in_channels * self.kernel_size ** 2

    def _im2col(self, x):
        # cols: (C*k*k, N*Ho*Wo), channel-major so rows match weight.reshape(O, -1)
        n, c, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
        xt = x.transpose(1, 0, 2, 3)
        if k == 1 and s == 1 and p == 0:
            return xt.reshape(c, n * h * w), ho, wo
        xp = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
        return cols.reshape(c * k * k, n * ho * wo), ho, wo

    def forward(self, x, train=False, weight=None, bias=None):
        _check_input(self, x, self.in_channels)
        w = self.weight.data if weight is None else weight
        b = (self.bias.data if self.bias is not None else None) if bias is None else bias
        n = x.shape[0]
        if not train and n > 1:
            # BLAS blocking depends on the column count; per-image GEMMs keep eval outputs batch-invariant
            return np.concatenate([self.forward(x[i:i + 1], weight=w, bias=b) for i in range(n)])
        cols, ho, wo = self._im2col(x)
        out = w.reshape(self.out_channels, -1) @ cols
        if b is not None:
            out += b[:, None]
        out = out.reshape(self.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
        if train:
            self._cache = (x.shape, cols, w)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        """Return input gradient; accumulate weight (and bias) gradients.

        When the forward pass ran with an external weight, the weight gradient
        is written to ``self.ext_weight_grad`` instead of the parameter.
        """
        if self._cache is None:
            raise RuntimeError(f"{self.kind}.backward called without a retained forward state")
        in_shape, cols, w = self._cache
        n, c, h, wd = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = grad.shape[2], grad.shape[3]
        g2 = grad.transpose(1, 0, 2, 3).reshape(self.out_channels, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        if w is self.weight.data:
            self.weight.grad += gw
            self.ext_weight_grad = None
        else:
            self.ext_weight_grad = gw
        gb = g2.sum(axis=1)
        if self.bias is not None:
            self.bias.grad += gb
        self.ext_bias_grad = gb
        dcols = w.reshape(self.out_channels, -1).T @ g2
        if k == 1 and s == 1 and p == 0:
            return np.ascontiguousarray(dcols.reshape(c, n, h, wd).transpose(1, 0, 2, 3))
        dcols = dcols.reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd]
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


class DepthwiseConv2d(Module):
    kind = "DepthwiseConv2d"

    def __init__(self, channels, kernel_size=3, stride=1, padding=None, bias=False, rng=None):
        if stride < 1 or kernel_size % 2 == 0 or channels <= 0:
            raise ValueError("invalid depthwise conv spec")
        rng = rng or np.random.default_rng(0)
        self.in_channels = self.out_channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(
            rng, (channels, 1, kernel_size, kernel_size), kernel_size * kernel_size))
        self.bias = Parameter(np.zeros(channels, np.float32)) if bias else None
        self._cache = None

    def own_parameters(self):
        d = {"weight": self.weight}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.kind}: channel mismatch {c} vs {self.in_channels}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (n, c, conv_out_size(h, k, s, p), conv_out_size(w, k, s, p))

    def macs(self, in_shape) -> int:
        _, c, ho, wo = self.output_shape(in_shape)
        return ho * wo * c * self.kernel_size ** 2

    def forward(self, x, train=False, weight=None, bias=None):
        _check_input(self, x, self.in_channels)
        w = self.weight.data if weight is None else weight
        b = (self.bias.data if self.bias is not None else None) if bias is None else bias
        n, c, h, wd = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = conv_out_size(h, k, s, p), conv_out_size(wd, k, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] * w[None, :, 0, i, j, None, None]
        if b is not None:
            out += b[None, :, None, None]
        if train:
            self._cache = (xp, w, x.shape)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}.backward called without a retained forward state")
        xp, w, in_shape = self._cache
        n, c, h, wd = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = grad.shape[2], grad.shape[3]
        gw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", grad, xp[sl])
                dxp[sl] += grad * w[None, :, 0, i, j, None, None]
        if w is self.weight.data:
            self.weight.grad += gw
            self.ext_weight_grad = None
        else:
            self.ext_weight_grad = gw
        gb = grad.sum(axis=(0, 2, 3))
        if self.bias is not None:
            self.bias.grad += gb
        self.ext_bias_grad = gb
        return dxp[:, :, p:p + h, p:p + wd].copy()


class BatchNorm(Module):
    kind = "BatchNorm"

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self._cache = None

    def own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def output_shape(self, in_shape):
        if in_shape[1] != self.channels:
            raise ShapeError(f"{self.kind}: channel mismatch {in_shape[1]} vs {self.channels}")
        return tuple(in_shape)

    def macs(self, in_shape) -> int:
        return 0

    def scale_shift(self):
        """Eval-mode affine map as (scale, shift) per channel."""
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = self.gamma.data * inv
        return scale, self.beta.data - self.running_mean * scale

    def forward(self, x, train=False):
        _check_input(self, x, self.channels)
        if not train:
            scale, shift = self.scale_shift()
            return x * scale[None, :, None, None].astype(x.dtype) + shift[None, :, None, None].astype(x.dtype)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // self.channels
        unbiased = var * m / max(m - 1, 1)
        self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(self.running_var.dtype)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv)
        return xhat * self.gamma.data[None, :, None, None] + self.beta.data[None, :, None, None]

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}.backward called without a retained forward state")
        xhat, inv = self._cache
        self.gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        gx = grad * self.gamma.data[None, :, None, None]
        mean_g = gx.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gx - mean_g - xhat * mean_gx) * inv[None, :, None, None]


class ReLU6(Module):
    kind = "ReLU6"

    def __init__(self):
        self._cache = None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def macs(self, in_shape) -> int:
        return 0

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return np.clip(x, 0, 6)

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("ReLU6.backward called without a retained forward state")
        x = self._cache
        return grad * ((x > 0) & (x < 6))


class GlobalAvgPool(Module):
    kind = "GlobalAvgPool"

    def __init__(self):
        self._cache = None

    def output_shape(self, in_shape):
        return (in_shape[0], in_shape[1])

    def macs(self, in_shape) -> int:
        return 0

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"GlobalAvgPool expects a 4-d input, got {tuple(x.shape)}")
        if train:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("GlobalAvgPool.backward called without a retained forward state")
        n, c, h, w = self._cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._cache).copy()


class Linear(Module):
    kind = "Linear"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        if in_features <= 0 or out_features <= 0:
            raise ValueError("invalid linear spec")
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, np.float32)) if bias else None
        self._cache = None

    def own_parameters(self):
        d = {"weight": self.weight}
        if self.bias is not None:
            d["bias"] = self.bias
        return d

    def output_shape(self, in_shape):
        if in_shape[-1] != self.in_features:
            raise ShapeError(f"Linear: expected {self.in_features} features, got {in_shape[-1]}")
        return (in_shape[0], self.out_features)

    def macs(self, in_shape) -> int:
        return self.in_features * self.out_features

    def forward(self, x, train=False, weight=None, bias=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (N, {self.in_features}), got {tuple(x.shape)}")
        w = self.weight.data if weight is None else weight
        b = (self.bias.data if self.bias is not None else None) if bias is None else bias
        if not train and x.shape[0] > 1:
            return np.concatenate([self.forward(x[i:i + 1], weight=w, bias=b) for i in range(x.shape[0])])
        y = x @ w.T
        if b is not None:
            y = y + b
        if train:
            self._cache = (x, w)
        return y

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("Linear.backward called without a retained forward state")
        x, w = self._cache
        gw = grad.T @ x
        if w is self.weight.data:
            self.weight.grad += gw
            self.ext_weight_grad = None
        else:
            self.ext_weight_grad = gw
        gb = grad.sum(axis=0)
        if self.bias is not None:
            self.bias.grad += gb
        self.ext_bias_grad = gb
        return grad @ w


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class Softmax(Module):
    kind = "Softmax"

    def __init__(self):
        self._cache = None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def macs(self, in_shape) -> int:
        return 0

    def forward(self, x, train=False):
        y = softmax(x, axis=-1)
        if train:
            self._cache = y
        return y

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("Softmax.backward called without a retained forward state")
        y = self._cache
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


class Add(Module):
    kind = "Add"

    def __init__(self):
        self._cache = None

    def output_shape(self, a_shape, b_shape=None):
        if b_shape is not None and tuple(a_shape) != tuple(b_shape):
            raise ShapeError(f"Add: operand shapes differ {tuple(a_shape)} vs {tuple(b_shape)}")
        return tuple(a_shape)

    def macs(self, in_shape) -> int:
        return 0

    def forward(self, a, b, train=False):
        if a.shape != b.shape:
            raise ShapeError(f"Add: operand shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
        if train:
            self._cache = True
        return a + b

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("Add.backward called without a retained forward state")
        return grad, grad


class Sequential(Module):
    kind = "Sequential"

    def __init__(self, *layers):
        self.layers = list(layers)

    def children(self):
        return {str(i): l for i, l in enumerate(self.layers)}

    def output_shape(self, in_shape):
        for l in self.layers:
            in_shape = l.output_shape(in_shape)
        return in_shape

    def macs(self, in_shape) -> int:
        total = 0
        for l in self.layers:
            total += l.macs(in_shape)
            in_shape = l.output_shape(in_shape)
        return total

    def forward(self, x, train=False):
        for l in self.layers:
            x = l.forward(x, train=train)
        return x

    def backward(self, grad):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return grad


# --------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    attempts: int = 1

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def _near_kink(fragment, margin=1e-3) -> bool:
    for m in fragment.modules():
        if isinstance(m, ReLU6) and m._cache is not None:
            x = m._cache
            if np.any(np.abs(x) < margin) or np.any(np.abs(x - 6) < margin):
                return True
    return False


def gradient_check(fragment, x, tolerance=1e-4, loss_fn=None, h=1e-5, sampler=None,
                   max_resample=50, rng=None, check_input=True) -> GradCheckReport:
    """Compare backward() against central finite differences in float64.

    ``loss_fn(out) -> (L, dL/dout)`` defaults to a fixed random projection of
    the output. If any ReLU6 input lies within 1e-3 of a kink, the input is
    redrawn with ``sampler(rng)`` (when given).
    """
    rng = rng or np.random.default_rng(0)
    fragment.astype(np.float64)
    x = np.asarray(x, np.float64)
    attempts = 1
    fragment.forward(x, train=True)
    while sampler is not None and _near_kink(fragment) and attempts < max_resample:
        x = np.asarray(sampler(rng), np.float64)
        fragment.forward(x, train=True)
        attempts += 1

    if loss_fn is None:
        out_shape = fragment.forward(x, train=True).shape
        proj = rng.standard_normal(out_shape)

        def loss_fn(out):
            return float((out * proj).sum()), proj

    buffers = [(owner, name, b.copy()) for _, owner, name, b in fragment.named_buffers()]

    def restore():
        for owner, name, b in buffers:
            owner.set_buffer(name, b.copy())

    def evaluate(inp):
        restore()
        return loss_fn(fragment.forward(inp, train=True))[0]

    fragment.zero_grad()
    restore()
    out = fragment.forward(x, train=True)
    _, gout = loss_fn(out)
    gx = fragment.backward(gout)

    report = GradCheckReport(tolerance=tolerance, attempts=attempts)
    for name, p in fragment.named_parameters():
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p.data[idx]
            p.data[idx] = old + h
            lp = evaluate(x)
            p.data[idx] = old - h
            lm = evaluate(x)
            p.data[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        report.errors[name] = rel_error(p.grad, num)
    if check_input:
        num = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = x[idx]
            x[idx] = old + h
            lp = evaluate(x)
            x[idx] = old - h
            lm = evaluate(x)
            x[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        report.errors["input"] = rel_error(gx, num)
    restore()
    return report
