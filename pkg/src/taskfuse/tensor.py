"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the fusion networks need is built from the operations in this
module: convolutions, linear maps, activations, pooling, batch norm, the
Sobel gradient-magnitude operator, elementwise arithmetic, and the common
training losses. Forward passes are deterministic (identical inputs give
bitwise-identical outputs) and every differentiable operation is validated
against central finite differences by the gradcheck suite.

Gradient conventions that matter for reproducibility:
  - elementwise max and max pooling route gradient to the first operand /
    first occurrence on ties,
  - repeated backward() calls accumulate into leaf gradients; intermediate
    node gradients are reset at the start of each backward pass,
  - convolution reduces over (channel, row, col) in row-major patch order;
    the heavy contraction runs through BLAS, which agrees with a scalar
    sliding-window sum to ~1e-15 relative and is bitwise-stable run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateBatchError,
    DimensionError,
    InputError,
    NumericError,
)

__all__ = [
    "Tensor",
    "AdamState",
    "Adam",
    "adam_step",
    "grad_check",
    "conv2d",
    "linear",
    "relu",
    "lrelu",
    "sigmoid",
    "absolute",
    "maximum",
    "concat",
    "reshape",
    "global_avg_pool",
    "global_max_pool",
    "avg_pool2d",
    "max_pool2d",
    "batch_norm",
    "pad_reflect",
    "spatial_gradient",
    "upsample_nearest",
    "broadcast_hw",
    "l1",
    "mse",
    "softmax_cross_entropy",
    "bce_with_logits",
]


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    Leaf tensors are created directly (parameters, inputs); interior nodes
    come out of the operations below and carry a backward closure. 4-D
    tensors follow (batch, channel, height, width) order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float64), requires_grad)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar. Leaf gradients accumulate."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        # interior grads are per-pass scratch; leaves persist across passes
        for node in topo:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _node(data: np.ndarray, parents, backward) -> Tensor:
    """Interior graph node; skips the leaf finiteness check."""
    out = Tensor.__new__(Tensor)
    out.data = data
    grads_needed = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(grads_needed)
    out.grad = None
    out._parents = grads_needed
    out._backward = backward if grads_needed else None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _accum_owned(t: Tensor, g: np.ndarray) -> None:
    """Like _accum but takes ownership of g (a buffer the caller just
    allocated and will not reuse), skipping the defensive copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum_owned(a, g * b.data)
        _accum_owned(b, g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum_owned(a, g * s)

    return _node(a.data * s, (a,), bw)


def shift(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g)

    return _node(a.data + s, (a,), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def bw(g):
        _accum_owned(a, g * take_a)
        _accum_owned(b, g * ~take_a)

    return _node(np.where(take_a, a.data, b.data), (a, b), bw)


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)

    def bw(g):
        _accum_owned(a, g * sgn)

    return _node(np.abs(a.data), (a,), bw)


# -- shape manipulation -------------------------------------------------------


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
            i != axis and s[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} vs {s} on axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw)


def broadcast_hw(a: Tensor, h: int, w: int) -> Tensor:
    """Expand a [B, C] tensor to [B, C, h, w] (constant over space)."""
    if a.data.ndim != 2:
        raise DimensionError(f"broadcast_hw expects [B, C], got {a.data.shape}")

    def bw(g):
        _accum_owned(a, g.sum(axis=(2, 3)))

    data = np.broadcast_to(a.data[:, :, None, None], a.data.shape + (h, w)).copy()
    return _node(data, (a,), bw)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of [B, C, H, W] by an integer factor."""
    if a.data.ndim != 4:
        raise DimensionError("upsample_nearest expects a 4-D tensor")
    f = int(factor)
    if f < 1:
        raise ConfigurationError("upsample factor must be >= 1")
    b, c, h, w = a.data.shape

    def bw(g):
        _accum_owned(a, g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)))

    return _node(np.repeat(np.repeat(a.data, f, axis=2), f, axis=3), (a,), bw)


# -- activations ---------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accum_owned(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def lrelu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError("lrelu slope must lie in [0, 1)")
    flat = a.data.reshape(-1)
    out = np.empty_like(a.data)
    _k.lrelu_forward(flat, slope, out.reshape(-1))

    def bw(g):
        dx = np.empty_like(a.data)
        _k.lrelu_backward(flat, np.ascontiguousarray(g).reshape(-1), slope,
                          dx.reshape(-1))
        _accum_owned(a, dx)

    return _node(out, (a,), bw)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # stable for both signs: exp of -|x| never overflows
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_data(a.data)

    def bw(g):
        _accum_owned(a, g * out * (1.0 - out))

    return _node(out, (a,), bw)


# -- reductions ------------------------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    def bw(g):
        _accum_owned(a, np.full_like(a.data, float(g.reshape(())))) 

    return _node(np.asarray(a.data.sum()), (a,), bw)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum_owned(a, np.full_like(a.data, float(g.reshape(())) / n))

    return _node(np.asarray(a.data.mean()), (a,), bw)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference (the 1/(H*W)-normalized L1 of the losses)."""
    _check_same_shape(a, b, "l1")
    diff = a.data - b.data
    sgn = np.sign(diff)
    n = diff.size

    def bw(g):
        gs = float(g.reshape(())) / n
        _accum_owned(a, gs * sgn)
        _accum_owned(b, -gs * sgn)

    return _node(np.asarray(np.abs(diff).mean()), (a, b), bw)


def mse(a: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array or tensor."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if a.data.shape != tgt.shape:
        raise DimensionError(f"mse: shape mismatch {a.data.shape} vs {tgt.shape}")
    diff = a.data - tgt
    n = diff.size
    parents = (a, target) if isinstance(target, Tensor) else (a,)

    def bw(g):
        gs = float(g.reshape(())) / n
        _accum_owned(a, 2.0 * gs * diff)
        if isinstance(target, Tensor):
            _accum_owned(target, -2.0 * gs * diff)

    return _node(np.asarray((diff * diff).mean()), parents, bw)


# -- pooling ------------------------------------------------------------------


def _require_4d(a: Tensor, op: str) -> tuple[int, int, int, int]:
    if a.data.ndim != 4:
        raise DimensionError(f"{op} expects [B, C, H, W], got {a.data.shape}")
    return a.data.shape


def global_avg_pool(a: Tensor) -> Tensor:
    b, c, h, w = _require_4d(a, "global_avg_pool")
    n = h * w

    def bw(g):
        _accum_owned(a, np.broadcast_to(g / n, (b, c, h, w)).copy())

    return _node(a.data.mean(axis=(2, 3), keepdims=True), (a,), bw)


def global_max_pool(a: Tensor) -> Tensor:
    b, c, h, w = _require_4d(a, "global_max_pool")
    flat = a.data.reshape(b, c, h * w)
    idx = np.argmax(flat, axis=2)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[:, :, None], g.reshape(b, c, 1), axis=2)
        _accum_owned(a, dflat.reshape(b, c, h, w))

    return _node(out[:, :, None, None].copy(), (a,), bw)


def _pool_windows(a: Tensor, k: int, op: str):
    b, c, h, w = _require_4d(a, op)
    k = int(k)
    if k < 1 or k > h or k > w:
        raise DimensionError(f"{op}: window {k} does not fit in {h}x{w}")
    if h % k or w % k:
        raise DimensionError(f"{op}: {h}x{w} not divisible by window {k}")
    return b, c, h, w, k


def avg_pool2d(a: Tensor, k: int) -> Tensor:
    b, c, h, w, k = _pool_windows(a, k, "avg_pool2d")
    ho, wo = h // k, w // k
    out = a.data.reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))

    def bw(g):
        spread = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (b, c, ho, k, wo, k)
        )
        _accum_owned(a, spread.reshape(b, c, h, w).copy())

    return _node(out, (a,), bw)


def max_pool2d(a: Tensor, k: int) -> Tensor:
    """Non-overlapping max pool; gradient goes to the first max per window."""
    b, c, h, w, k = _pool_windows(a, k, "max_pool2d")
    ho, wo = h // k, w // k
    win = a.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(b, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=4)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def bw(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=4)
        dwin = dflat.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        _accum_owned(a, dwin.reshape(b, c, h, w))

    return _node(out, (a,), bw)


# -- linear and convolution -----------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x[B, Din] @ weight[Dout, Din]^T + bias[Dout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("linear expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear: inner dims disagree, {x.data.shape} vs {weight.data.shape}"
        )
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise DimensionError("linear: bias shape must be [Dout]")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        _accum_owned(x, g @ weight.data)
        _accum_owned(weight, g.T @ x.data)
        if bias is not None:
            _accum_owned(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def _pad_zeros(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix [B*ho*wo, C*k*k] with (channel, row, col) patch order."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, c, k, k),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
    )
    return win.reshape(b * ho * wo, c * k * k)


_scratch: dict[tuple, np.ndarray] = {}


def _scratch_buf(tag: str, shape: tuple) -> np.ndarray:
    """Reusable buffer for results consumed before the next same-tag call.
    Single-threaded use only (matching the one-step-one-thread model)."""
    key = (tag,) + shape
    buf = _scratch.get(key)
    if buf is None:
        buf = np.empty(shape, dtype=np.float64)
        _scratch[key] = buf
    return buf


def _dense_patches(src: np.ndarray, k: int, pad: int, scratch: bool = False,
                   ones_row: bool = False) -> np.ndarray:
    """Stride-1 patch matrix [k*k*C(+1), B*ho*wo], rows ordered
    (kernel row, kernel col, channel).

    Gathers straight from the unpadded source (padding positions come out
    as zeros). With ones_row, a trailing all-ones row lets the matmul carry
    the bias. This is the hot path of every 3x3 convolution.
    """
    b, c, h, w = src.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    rows = k * k * c
    shape = (rows + (1 if ones_row else 0), b * ho * wo)
    if scratch:
        out = _scratch_buf("patches", shape)
    else:
        out = np.empty(shape, dtype=np.float64)
    _k.gather_patches(src, out[:rows], k, pad)
    if ones_row:
        out[rows].fill(1.0)
    return out


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over [B, Cin, H, W] with square kernels.

    Supports zero padding, strides, and channel groups (the depthwise case
    groups == Cin == Cout takes a separate fast path). Differentiable with
    respect to input, kernel, and bias.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    stride = int(stride)
    padding = int(padding)
    groups = int(groups)
    if stride < 1:
        raise ConfigurationError("conv2d: stride must be >= 1")
    if padding < 0:
        raise ConfigurationError("conv2d: padding must be >= 0")
    b, cin, h, w = x.data.shape
    cout, cin_g, kh, kw = kernel.data.shape
    if kh != kw:
        raise DimensionError("conv2d: only square kernels are supported")
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(
            f"conv2d: groups={groups} does not divide Cin={cin} and Cout={cout}"
        )
    if cin_g != cin // groups:
        raise DimensionError(
            f"conv2d: kernel expects {cin_g} input channels per group, input has {cin // groups}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError("conv2d: bias shape must be [Cout]")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {k}x{k} does not fit input {h}x{w} with padding {padding}"
        )

    depthwise = groups == cin == cout
    dense1 = not depthwise and groups == 1 and stride == 1
    xp = None if dense1 else _pad_zeros(x.data, padding)
    fwd_patches = None  # kept for the kernel gradient when one is needed

    if depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=np.float64)
        wk = kernel.data
        for i in range(k):
            for j in range(k):
                sl = xp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride]
                out += sl * wk[:, 0, i, j][None, :, None, None]
    elif dense1:
        withb = bias is not None
        kk = k * k * cin
        patches = _dense_patches(x.data, k, padding,
                                 scratch=not kernel.requires_grad,
                                 ones_row=withb)
        if kernel.requires_grad:
            fwd_patches = patches
        wmat = np.empty((cout, kk + (1 if withb else 0)), dtype=np.float64)
        wmat[:, :kk].reshape(cout, k, k, cin)[...] = kernel.data.transpose(0, 2, 3, 1)
        if withb:
            wmat[:, kk] = bias.data
        out2d = np.matmul(wmat, patches, out=_scratch_buf("out2d", (cout, patches.shape[1])))
        out = np.empty((b, cout, ho, wo), dtype=np.float64)
        _k.rows_to_nchw(out2d, out)
    elif groups == 1:
        patches = _im2col(xp, k, stride, ho, wo)
        out = (patches @ kernel.data.reshape(cout, -1).T)
        out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    else:
        out = np.empty((b, cout, ho, wo), dtype=np.float64)
        cg, cog = cin // groups, cout // groups
        for gi in range(groups):
            patches = _im2col(
                np.ascontiguousarray(xp[:, gi * cg : (gi + 1) * cg]), k, stride, ho, wo
            )
            og = patches @ kernel.data[gi * cog : (gi + 1) * cog].reshape(cog, -1).T
            out[:, gi * cog : (gi + 1) * cog] = og.reshape(b, ho, wo, cog).transpose(0, 3, 1, 2)
    if bias is not None and not dense1:
        out += bias.data[None, :, None, None]

    def bw(g):
        if (bias is not None and bias.requires_grad
                and not (dense1 and kernel.requires_grad)):
            _accum_owned(bias, g.sum(axis=(0, 2, 3)))
        if depthwise:
            if kernel.requires_grad:
                dk = np.zeros_like(kernel.data)
                for i in range(k):
                    for j in range(k):
                        sl = xp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                                j : j + (wo - 1) * stride + 1 : stride]
                        dk[:, 0, i, j] = (g * sl).sum(axis=(0, 2, 3))
                _accum_owned(kernel, dk)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                wk = kernel.data
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                            j : j + (wo - 1) * stride + 1 : stride] += (
                            g * wk[:, 0, i, j][None, :, None, None]
                        )
                _accum_owned(x, dxp[:, :, padding : padding + h, padding : padding + w])
        elif dense1:
            gc = np.ascontiguousarray(g)
            n = b * ho * wo
            g2d = None
            if kernel.requires_grad:
                g2d = _scratch_buf("g2d", (cout, n))
                _k.nchw_to_rows(gc, g2d)
                patches = fwd_patches if fwd_patches is not None else _dense_patches(
                    x.data, k, padding, ones_row=withb
                )
                dwa = np.matmul(g2d, patches.T,
                                out=_scratch_buf("dwa", (cout, patches.shape[0])))
                dw = dwa[:, :kk].reshape(cout, k, k, cin)
                _accum_owned(kernel, np.ascontiguousarray(dw.transpose(0, 3, 1, 2)))
                if withb and bias.requires_grad:
                    _accum_owned(bias, dwa[:, kk].copy())
            if x.requires_grad:
                # one matmul spreads the kernel over the output gradient,
                # then the fold scatters each term onto its input cell
                if g2d is None:
                    g2d = _scratch_buf("g2d", (cout, n))
                    _k.nchw_to_rows(gc, g2d)
                gw = np.matmul(wmat[:, :kk].T, g2d, out=_scratch_buf("gw", (kk, n)))
                dx = np.zeros((b, cin, h, w), dtype=np.float64)
                _k.scatter_dx(gw, k, padding, dx)
                _accum_owned(x, dx)
        elif groups == 1:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            if kernel.requires_grad:
                patches = _im2col(xp, k, stride, ho, wo)
                _accum(kernel, (gmat.T @ patches).reshape(kernel.data.shape))
            if x.requires_grad:
                gw = gmat @ kernel.data.reshape(cout, -1)
                gw = gw.reshape(b, ho, wo, cin, k, k)
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                            j : j + (wo - 1) * stride + 1 : stride] += (
                            gw[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                _accum(x, dxp[:, :, padding : padding + h, padding : padding + w])
        else:
            cg, cog = cin // groups, cout // groups
            dk = np.zeros_like(kernel.data) if kernel.requires_grad else None
            dxp = np.zeros_like(xp) if x.requires_grad else None
            for gi in range(groups):
                gg = np.ascontiguousarray(
                    g[:, gi * cog : (gi + 1) * cog].transpose(0, 2, 3, 1)
                ).reshape(-1, cog)
                wg = kernel.data[gi * cog : (gi + 1) * cog].reshape(cog, -1)
                if dk is not None:
                    patches = _im2col(
                        np.ascontiguousarray(xp[:, gi * cg : (gi + 1) * cg]),
                        k, stride, ho, wo,
                    )
                    dk[gi * cog : (gi + 1) * cog] = (gg.T @ patches).reshape(cog, cg, k, k)
                if dxp is not None:
                    gw = (gg @ wg).reshape(b, ho, wo, cg, k, k)
                    for i in range(k):
                        for j in range(k):
                            dxp[:, gi * cg : (gi + 1) * cg,
                                i : i + (ho - 1) * stride + 1 : stride,
                                j : j + (wo - 1) * stride + 1 : stride] += (
                                gw[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                            )
            if dk is not None:
                _accum_owned(kernel, dk)
            if dxp is not None:
                _accum_owned(x, dxp[:, :, padding : padding + h, padding : padding + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bw)


# -- batch normalization ----------------------------------------------------------

_BN_NO_DX = np.zeros((1, 1, 1, 1))  # placeholder when no input grad is wanted


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over [B, C, H, W].

    Train mode normalizes by batch statistics (biased variance) and updates
    the running stats in place; eval mode normalizes by the running stats.
    """
    b, c, h, w = _require_4d(x, "batch_norm")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batch_norm: gamma/beta must have shape [C]")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError("batch_norm: running stats must have shape [C]")
    n = b * h * w
    out = np.empty_like(x.data)
    mu = np.empty(c, dtype=np.float64)
    ivar = np.empty(c, dtype=np.float64)
    xc = np.ascontiguousarray(x.data)
    if training:
        if n < 2:
            raise DegenerateBatchError("batch_norm: needs B*H*W >= 2 in train mode")
        var = np.empty(c, dtype=np.float64)
        _k.bn_train_forward(xc, gamma.data, beta.data, eps, out, mu, var, ivar)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        _k.bn_eval_forward(xc, gamma.data, beta.data, running_mean, running_var,
                           eps, out, ivar)
        mu[:] = running_mean

    def bw(g):
        want_dx = x.requires_grad
        dx = np.empty_like(xc) if want_dx else _BN_NO_DX
        dgamma = np.empty(c, dtype=np.float64)
        dbeta = np.empty(c, dtype=np.float64)
        gc = np.ascontiguousarray(g)
        if training:
            _k.bn_train_backward(xc, gc, gamma.data, mu, ivar, dx, dgamma, dbeta,
                                 want_dx)
        else:
            _k.bn_eval_backward(xc, gc, gamma.data, mu, ivar, dx, dgamma, dbeta,
                                want_dx)
        _accum_owned(gamma, dgamma)
        _accum_owned(beta, dbeta)
        if want_dx:
            _accum_owned(x, dx)

    return _node(out, (x, gamma, beta), bw)


# -- reflect padding and the Sobel gradient ----------------------------------------


def pad_reflect(x: Tensor, p: int = 1) -> Tensor:
    """Reflect-pad the two spatial axes of [B, C, H, W] by p (no edge repeat)."""
    b, c, h, w = _require_4d(x, "pad_reflect")
    p = int(p)
    if p < 1:
        raise ConfigurationError("pad_reflect: p must be >= 1")
    if h <= p or w <= p:
        raise DimensionError(f"pad_reflect: image {h}x{w} too small for pad {p}")
    data = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")

    def bw(g):
        core = g[:, :, p : p + h, p : p + w].copy()
        for t in range(p):
            # top padded row t mirrors source row p-t; bottom analogously
            core[:, :, p - t, :] += g[:, :, t, p : p + w]
            core[:, :, h - 2 - t, :] += g[:, :, h + p + t, p : p + w]
        for t in range(p):
            core[:, :, :, p - t] += g[:, :, p : p + h, t]
            core[:, :, :, w - 2 - t] += g[:, :, p : p + h, w + p + t]
            for u in range(p):
                # corners reflect in both axes
                core[:, :, p - u, p - t] += g[:, :, u, t]
                core[:, :, p - u, w - 2 - t] += g[:, :, u, w + p + t]
                core[:, :, h - 2 - u, p - t] += g[:, :, h + p + u, t]
                core[:, :, h - 2 - u, w - 2 - t] += g[:, :, h + p + u, w + p + t]
        _accum_owned(x, core)

    return _node(data, (x,), bw)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()
_sobel_kernels: dict[int, tuple[Tensor, Tensor]] = {}


def _sobel_for(c: int) -> tuple[Tensor, Tensor]:
    if c not in _sobel_kernels:
        kx = np.broadcast_to(_SOBEL_X, (c, 1, 3, 3)).copy()
        ky = np.broadcast_to(_SOBEL_Y, (c, 1, 3, 3)).copy()
        _sobel_kernels[c] = (Tensor(kx), Tensor(ky))
    return _sobel_kernels[c]


def spatial_gradient(x: Tensor) -> Tensor:
    """Sobel gradient magnitude |Gx| + |Gy| with reflect padding.

    Shape-preserving on [B, C, H, W]; requires H, W >= 3.
    """
    b, c, h, w = _require_4d(x, "spatial_gradient")
    if h < 3 or w < 3:
        raise DimensionError("spatial_gradient: needs H, W >= 3")
    kx, ky = _sobel_for(c)
    xp = pad_reflect(x, 1)
    gx = conv2d(xp, kx, stride=1, padding=0, groups=c)
    gy = conv2d(xp, ky, stride=1, padding=0, groups=c)
    return add(absolute(gx), absolute(gy))


# -- classification / regression losses ----------------------------------------


def softmax_cross_entropy(logits: Tensor, classes: np.ndarray) -> Tensor:
    """Mean pixelwise cross entropy of [B, K, H, W] logits vs integer classes."""
    if logits.data.ndim != 4:
        raise DimensionError("softmax_cross_entropy expects [B, K, H, W] logits")
    b, kcls, h, w = logits.data.shape
    cls = np.asarray(classes)
    if cls.shape != (b, h, w):
        raise DimensionError(
            f"softmax_cross_entropy: classes shape {cls.shape} != {(b, h, w)}"
        )
    if not np.issubdtype(cls.dtype, np.integer):
        raise InputError("softmax_cross_entropy: classes must be integers")
    if cls.min() < 0 or cls.max() >= kcls:
        raise InputError(f"softmax_cross_entropy: class index outside 0..{kcls - 1}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, cls[:, None, :, :], axis=1)[:, 0]
    n = b * h * w

    def bw(g):
        gs = float(g.reshape(())) / n
        p = np.exp(logp)
        p[np.arange(b)[:, None, None], cls,
          np.arange(h)[None, :, None], np.arange(w)[None, None, :]] -= 1.0
        _accum_owned(logits, gs * p)

    return _node(np.asarray(-picked.mean()), (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy on sigmoid(logits), numerically stable."""
    tgt = np.asarray(targets, dtype=np.float64)
    if logits.data.shape != tgt.shape:
        raise DimensionError(
            f"bce_with_logits: shape mismatch {logits.data.shape} vs {tgt.shape}"
        )
    x = logits.data
    loss = np.maximum(x, 0.0) - x * tgt + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bw(g):
        gs = float(g.reshape(())) / n
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        _accum_owned(logits, gs * (sig - tgt))

    return _node(np.asarray(loss.mean()), (logits,), bw)


# -- Adam --------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_param(param: Tensor, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return AdamState(
            m=np.zeros_like(param.data),
            v=np.zeros_like(param.data),
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on param.data."""
    if lr <= 0:
        raise ConfigurationError("adam_step: lr must be > 0")
    if grad.shape != param.data.shape:
        raise DimensionError(
            f"adam_step: grad shape {grad.shape} != param shape {param.data.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError("adam_step: non-finite gradient")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


class Adam:
    """Adam over a fixed, ordered parameter list (order fixes determinism)."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState.for_param(p, beta1, beta2, eps) for p in self.params]

    def step(self, lr: float) -> None:
        for p, st in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, st, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- finite-difference verification -------------------------------------------------


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    f takes the given tensors and returns a scalar Tensor. Every coordinate
    of every input is perturbed by +-eps. The relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must require gradients")
        t.grad = None
    loss = f(*inputs)
    if loss.data.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    loss.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(f(*inputs).data.reshape(()))
            flat[i] = orig - eps
            lm = float(f(*inputs).data.reshape(()))
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1.0)
            if err > worst:
                worst = err
    return worst
