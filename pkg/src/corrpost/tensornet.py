"""Small reverse-mode tensor library with the layer set the classifier needs.

Every op takes and returns :class:`Tensor` objects. When any input requires a
gradient the op records a closure that maps the output gradient to input
gradients; :func:`backward` replays those closures in reverse topological
order. Arrays are NCHW. Training runs in float32; the gradient checks build
the same graph in float64.
"""
from __future__ import annotations

import contextlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (FormatError, InputError, ModelStateError, ShapeError, StateError,
                     TrainingDivergenceError)

__all__ = [
    "Tensor",
    "no_grad",
    "conv2d",
    "batchnorm",
    "swish",
    "add",
    "global_avg_pool",
    "dense_sigmoid",
    "bce_loss",
    "backward",
    "BNState",
    "ModelParams",
    "init_conv",
    "init_bn",
    "residual_block",
    "init_residual_block",
    "SGD",
    "Adam",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PRED_CLAMP = 1e-7

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every tensor that requires it.

    The seed is d(loss) = 1, or ``grad`` (same shape as ``loss``) to
    back-propagate a vector-Jacobian product from a non-scalar output.
    """
    if loss is None or loss._backward is None:
        if loss is not None and loss._consumed:
            raise StateError("graph already consumed by an earlier backward()")
        raise StateError("backward() needs a recorded forward pass")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    if grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.data.dtype)
        if grad.shape != loss.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")
        loss.grad = grad.copy()
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # drop the graph so caches are freed
            node._backward = None
            node._parents = ()
            node._consumed = True
            if node is not loss:
                node.grad = None


# --- layers -----------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 (zero pad 1) or 1x1 (no pad) convolution without bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and KCkk weights")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"unsupported kernel {kh}x{kw}")
    if stride not in (1, 2) or h % stride or wd % stride:
        raise ShapeError(f"spatial dims {h}x{wd} not divisible by stride {stride}")
    pad = kh // 2
    ho, wo = h // stride, wd // stride
    xd = x.data
    if kh == 1:
        cols = xd[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(k, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        if w.requires_grad:
            _accum(w, (gm.T @ cols).reshape(w.shape))
        if not x.requires_grad:
            return
        dcols = gm @ wmat
        if kh == 1:
            dx = np.zeros_like(xd)
            dx[:, :, ::stride, ::stride] = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        _accum(x, dx)

    return _result(out, (x, w), back)


@dataclass
class BNState:
    """Running statistics of one batch-norm layer (not trainable).

    ``pooled`` switches updates from the exponential moving average to a
    running average over all values seen since it was set to 0. In that
    mode ``var`` accumulates the raw second moment E[x^2]; call
    :meth:`finish_average` afterwards to turn it back into a variance.
    """
    mean: np.ndarray
    var: np.ndarray
    pooled: int | None = None

    def finish_average(self) -> None:
        if self.pooled is not None:
            self.var = np.maximum(self.var - self.mean ** 2, 0.0).astype(self.var.dtype)
            self.pooled = None


def batchnorm(x: Tensor, gain: Tensor, shift: Tensor, state: BNState, train: bool) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In train mode the batch moments normalize the input and the running
    statistics are updated with momentum 0.9; in infer mode the running
    statistics are used instead.
    """
    xd = x.data
    c = xd.shape[1]
    bshape = (1, c, 1, 1)
    g = gain.data.reshape(bshape)
    b = shift.data.reshape(bshape)
    if not train:
        if state.mean is None or state.var is None or not (
                np.all(np.isfinite(state.mean)) and np.all(np.isfinite(state.var))):
            raise ModelStateError("batch-norm running statistics are not initialized")
        invstd = 1.0 / np.sqrt(state.var.reshape(bshape) + BN_EPS)
        xhat = (xd - state.mean.reshape(bshape)) * invstd
        out = g * xhat + b

        def back_inf(go):
            _accum(gain, (go * xhat).sum(axis=(0, 2, 3)))
            _accum(shift, go.sum(axis=(0, 2, 3)))
            _accum(x, go * g * invstd)

        return _result(out.astype(xd.dtype, copy=False), (x, gain, shift), back_inf)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if m < 2:
        raise InputError("batch norm in train mode needs at least 2 values per channel")
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    invstd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * invstd
    out = g * xhat + b
    if state.pooled is None:
        keep = BN_MOMENTUM
        second = var.reshape(c)
    else:
        # equal-weight average of raw second moments; see BNState
        keep = state.pooled / (state.pooled + m)
        state.pooled += m
        second = var.reshape(c) + mean.reshape(c) ** 2
    state.mean = (keep * state.mean + (1 - keep) * mean.reshape(c)).astype(state.mean.dtype)
    state.var = (keep * state.var + (1 - keep) * second).astype(state.var.dtype)

    def back(go):
        _accum(gain, (go * xhat).sum(axis=(0, 2, 3)))
        _accum(shift, go.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = go * g
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            _accum(x, invstd / m * (m * dxhat - s1 - xhat * s2))

    return _result(out, (x, gain, shift), back)


def _sigmoid(z):
    # exp of a non-positive argument only, so it never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def back(g):
        _accum(x, g * (s + x.data * s * (1 - s)))

    return _result(out, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), back)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _result(out, (x,), back)


def dense_sigmoid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """One-neuron dense layer followed by a logistic output: ``sigmoid(x @ w + b)``."""
    if x.data.ndim != 2 or w.data.ndim != 1 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    z = x.data @ w.data + b.data
    p = _sigmoid(z)

    def back(g):
        dz = g * p * (1 - p)
        _accum(w, x.data.T @ dz)
        _accum(b, dz.sum())
        _accum(x, np.outer(dz, w.data))

    return _result(p, (x, w, b), back)


def bce_loss(pred: Tensor, label, weights=(), l2: float = 0.0) -> Tensor:
    """Mean binary cross-entropy on clamped probabilities plus ``l2 * sum(w**2)``.

    ``weights`` lists the regularized tensors (conv and dense weights only).
    """
    y = np.asarray(label, dtype=pred.dtype)
    lo, hi = PRED_CLAMP, 1.0 - PRED_CLAMP
    p = np.clip(pred.data, lo, hi)
    n = p.shape[0]
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    reg = sum(float(np.sum(w.data.astype(np.float64) ** 2)) for w in weights)
    total = np.asarray(bce + l2 * reg, dtype=pred.dtype)
    inside = (pred.data >= lo) & (pred.data <= hi)

    def back(g):
        dp = -(y / p - (1 - y) / (1 - p)) / n
        _accum(pred, g * dp * inside)
        if l2:
            for w in weights:
                _accum(w, g * 2 * l2 * w.data)

    return _result(total, (pred, *weights), back)


# --- parameters ---------------------------------------------------------------

class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.bn: OrderedDict[str, BNState] = OrderedDict()
        self.decay: set[str] = set()

    def add(self, name: str, data, decay: bool = False) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.tensors[name] = t
        if decay:
            self.decay.add(name)
        return t

    def add_bn(self, name: str, channels: int) -> None:
        self.add(f"{name}.gain", np.ones(channels))
        self.add(f"{name}.shift", np.zeros(channels))
        self.bn[name] = BNState(np.zeros(channels, dtype=self.dtype),
                                np.ones(channels, dtype=self.dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def decay_tensors(self) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if k in self.decay]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self.tensors.values() if t.requires_grad)

    def state_arrays(self) -> OrderedDict:
        """Every persisted array: trainable tensors then running statistics."""
        out = OrderedDict((k, t.data) for k, t in self.tensors.items())
        for k, st in self.bn.items():
            out[f"{k}.running_mean"] = st.mean
            out[f"{k}.running_var"] = st.var
        return out

    def astype(self, dtype) -> "ModelParams":
        other = ModelParams(dtype)
        for k, t in self.tensors.items():
            other.tensors[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        for k, st in self.bn.items():
            other.bn[k] = BNState(st.mean.astype(dtype), st.var.astype(dtype))
        other.decay = set(self.decay)
        return other


def param_count(params: ModelParams) -> int:
    return params.total_count


def init_conv(params: ModelParams, name: str, in_ch: int, out_ch: int, k: int, rng) -> None:
    std = np.sqrt(2.0 / (in_ch * k * k))
    params.add(name, rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), decay=True)


def init_bn(params: ModelParams, name: str, channels: int) -> None:
    params.add_bn(name, channels)


def init_residual_block(params: ModelParams, prefix: str, in_ch: int, width: int,
                        stride: int, rng) -> None:
    init_conv(params, f"{prefix}.conv1", in_ch, width, 3, rng)
    init_bn(params, f"{prefix}.bn1", width)
    init_conv(params, f"{prefix}.conv2", width, width, 3, rng)
    init_bn(params, f"{prefix}.bn2", width)
    if stride != 1 or in_ch != width:
        init_conv(params, f"{prefix}.proj", in_ch, width, 1, rng)
        init_bn(params, f"{prefix}.proj_bn", width)


def _bn(x, params, name, train):
    return batchnorm(x, params[f"{name}.gain"], params[f"{name}.shift"], params.bn[name], train)


def residual_block(x: Tensor, params: ModelParams, prefix: str, stride: int,
                   train: bool) -> Tensor:
    """Post-activation basic block with Swish.

    ``conv3x3(stride)-BN-Swish-conv3x3-BN`` plus the identity (or a strided
    1x1 conv + BN projection when the shape changes), then Swish on the sum.
    """
    w1 = params[f"{prefix}.conv1"]
    if w1.shape[1] != x.shape[1]:
        raise ShapeError(f"{prefix}: input has {x.shape[1]} channels, block expects {w1.shape[1]}")
    h = conv2d(x, w1, stride)
    h = swish(_bn(h, params, f"{prefix}.bn1", train))
    h = conv2d(h, params[f"{prefix}.conv2"], 1)
    h = _bn(h, params, f"{prefix}.bn2", train)
    if f"{prefix}.proj" in params:
        skip = _bn(conv2d(x, params[f"{prefix}.proj"], stride), params, f"{prefix}.proj_bn", train)
    else:
        if stride != 1:
            raise ShapeError(f"{prefix}: stride {stride} needs a projection shortcut")
        skip = x
    return swish(add(h, skip))


# --- optimizers -----------------------------------------------------------------

def _check_finite(name, g):
    if not np.all(np.isfinite(g)):
        raise TrainingDivergenceError(f"non-finite gradient for {name}")


class SGD:
    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        items = params.items() if hasattr(params, "items") else params
        for name, t in items:
            if t.grad is None:
                continue
            _check_finite(name, t.grad)
            if self.momentum:
                v = self.velocity.get(name)
                v = t.grad.copy() if v is None else self.momentum * v + t.grad
                self.velocity[name] = v
                t.data -= self.lr * v
            else:
                t.data -= self.lr * t.grad


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        items = list(params.items() if hasattr(params, "items") else params)
        for name, t in items:
            if t.grad is not None:
                _check_finite(name, t.grad)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, t in items:
            g = t.grad
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            t.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.data.dtype)


# --- checkpoint format ------------------------------------------------------------

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CNNW_VERSION = 1


def save_checkpoint(path, params: ModelParams, architecture: dict | None = None) -> None:
    """Write the binary CNNW file; the architecture table goes to ``<path>.json``."""
    arrays = params.state_arrays()
    chunks = [struct.pack("<4sHI", b"CNNW", _CNNW_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))
    if architecture is not None:
        Path(str(path) + ".json").write_text(json.dumps(architecture, indent=2, sort_keys=True))


def load_checkpoint(path) -> OrderedDict:
    """Return ``name -> array`` in file order."""
    buf = Path(path).read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sHI", buf, 0)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated CNNW header") from exc
    if magic != b"CNNW":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _CNNW_VERSION:
        raise FormatError(f"{path}: unsupported CNNW version {version}")
    pos = struct.calcsize("<4sHI")
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            out[name] = np.frombuffer(buf, dtype=dt, count=size, offset=pos).reshape(dims).copy()
            pos += size * dt.itemsize
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt CNNW payload") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes in CNNW file")
    return out
