"""Reverse-mode autodiff over dense row-major numpy arrays.

Tensors record their producing operation and a backward closure; calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients additively into every ``requires_grad`` leaf.

Design constraints:
  - storage is dense and contiguous, float32 by default, float64 for
    gradient checking
  - broadcasting is limited to trailing-axis bias vectors; everything else
    must match shapes exactly so backward rules stay auditable
  - no views: every op materializes its output
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible for the requested op."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericsError(FloatingPointError):
    """A NaN/Inf appeared where finite values are required."""


# When true, every op output is checked for NaN/Inf and the offending op is
# named in the failure. Enabled by the training loop, off for raw speed.
NAN_CHECKS = False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if NAN_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
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
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


# -- elementwise and arithmetic ----------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a vector broadcast over the last axis."""
    if a.shape == b.shape:
        out_data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out_data = a.data + b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
    else:
        raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    return Tensor._from_op(out_data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)
    return Tensor._from_op(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    return Tensor._from_op(a.data * b.data, (a, b), "mul", backward)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """y = scale * x + shift with scalar constants (e.g. 1 - z)."""

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * scale)
    return Tensor._from_op(scale * x.data + shift, (x,), "affine", backward)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * y * (1.0 - y))
    return Tensor._from_op(y, (x,), "sigmoid", backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - y * y))
    return Tensor._from_op(y, (x,), "tanh", backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))
    return Tensor._from_op(y, (x,), "relu", backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return Tensor._from_op(a.data @ b.data, (a, b), "matmul", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W.T (+ b) for W of shape (out, in) and x of shape (n, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear: expected 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[1]} != weight fan-in {weight.shape[1]}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out_data = out_data + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
    return Tensor._from_op(out_data, parents, "linear", backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x (n, d) by the per-row scalar s (n,)."""
    if x.data.ndim != 2 or s.data.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape} incompatible")
    col = s.data[:, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * col)
        if s.requires_grad:
            s._accumulate((g * x.data).sum(axis=1))
    return Tensor._from_op(x.data * col, (x, s), "scale_rows", backward)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old))
    return Tensor._from_op(np.ascontiguousarray(x.data.reshape(shape)), (x,), "reshape", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty tensor list")
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
                t.shape[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            raise ShapeError(f"concat: shapes {base} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tuple(tensors), "concat", backward)


def stack_time(states: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape (n, d) into (n, T, d)."""
    if not states:
        raise ContractError("stack_time: empty sequence")

    def backward(g):
        for t_idx, h in enumerate(states):
            if h.requires_grad:
                h._accumulate(g[:, t_idx, :])
    out = np.stack([h.data for h in states], axis=1)
    return Tensor._from_op(out, tuple(states), "stack_time", backward)


def select_time(h_all: Tensor, t: int) -> Tensor:
    """Select timestep t from (n, T, d) as (n, d)."""
    if h_all.data.ndim != 3:
        raise ShapeError(f"select_time: expected (n, T, d), got {h_all.shape}")

    def backward(g):
        if h_all.requires_grad:
            full = np.zeros_like(h_all.data)
            full[:, t, :] = g
            h_all._accumulate(full)
    return Tensor._from_op(np.ascontiguousarray(h_all.data[:, t, :]), (h_all,), "select_time", backward)


def softmax_lastaxis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - dot))
    return Tensor._from_op(y, (x,), "softmax", backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of (n, C) logits against class indices.

    Numerically stabilized by max-subtraction; backward uses the closed form
    (softmax - onehot) / n.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (n, C) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"cross_entropy: got {labels.shape} labels for {n} samples")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"cross_entropy: label outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)
    probs = np.exp(shifted - logsumexp[:, None])

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            logits._accumulate(grad * (float(g) / n))
    return Tensor._from_op(loss, (logits,), "cross_entropy", backward)


# -- convolution --------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c*kh*kw, oh*ow) for valid windows, stride 1."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :, :] = x[:, :, i:i + oh, j:j + ow]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += cols[:, :, i, j, :, :]
    return dx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation, stride 1, with optional per-channel bias.

    x: (n, in_ch, h, w), kernel: (out_ch, in_ch, kh, kw) -> (n, out_ch, h', w').
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D operands, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if h < kh or w < kw:
        raise ShapeError(f"conv2d: spatial size {h}x{w} smaller than kernel {kh}x{kw}")
    oh, ow = h - kh + 1, w - kw + 1

    cols = _im2col(x.data, kh, kw)                       # (n, cin*kh*kw, oh*ow)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat[None, :, :], cols)              # (n, cout, oh*ow)
    out = out.reshape(n, cout, oh, ow)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gmat = g.reshape(n, cout, oh * ow)
        if kernel.requires_grad:
            dw = np.einsum("nop,ncp->oc", gmat, cols)
            kernel._accumulate(dw.reshape(kernel.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.T[None, :, :], gmat)
            x._accumulate(_col2im(dcols, x.shape, kh, kw))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=(0, 2)))
    return Tensor._from_op(np.ascontiguousarray(out), parents, "conv2d", backward)


# -- stochastic / normalization primitives ------------------------------------


def dropout_with_mask(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout: kept activations scaled by 1/(1-rate)."""
    keep_scale = 1.0 / (1.0 - rate)
    m = mask.astype(x.dtype) * keep_scale

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * m)
    return Tensor._from_op(x.data * m, (x,), "dropout", backward)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel batch normalization of (n, c, h, w) using batch statistics.

    Returns the output plus the batch mean/variance so the layer can update
    its running estimates.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm: expected (n, c, h, w), got {x.shape}")
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            sum_dxhat = dxhat.sum(axis=axes)[None, :, None, None]
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (
                m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            x._accumulate(dx)
    out_t = Tensor._from_op(out, (x, gamma, beta), "batchnorm", backward)
    return out_t, mean, var


def batchnorm_infer(x: Tensor, gamma: Tensor, beta: Tensor,
                    running_mean: np.ndarray, running_var: np.ndarray, eps: float) -> Tensor:
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = gamma.data * inv_std
    shift = beta.data - running_mean * scale
    out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(g):
        axes = (0, 2, 3)
        if gamma.requires_grad:
            xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            x._accumulate(g * scale[None, :, None, None])
    return Tensor._from_op(out, (x, gamma, beta), "batchnorm_infer", backward)


# -- gradient checking --------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float | Sequence[float] = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be scalar-valued and deterministic (use inference mode or a fixed
    dropout mask). Run at float64 for meaningful tolerances. When several
    step sizes are given, each component keeps its best-conditioned one
    (large steps lose to truncation on high-curvature components, small
    steps to roundoff on near-zero gradients).
    """
    steps = (float(h),) if isinstance(h, (int, float)) else tuple(float(v) for v in h)
    if any(s <= 0 for s in steps):
        raise ContractError("finite_diff_check: step h must be positive")
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise ContractError("finite_diff_check: f must be scalar-valued")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    base = float(f(x).data)
    redo = float(f(x).data)
    if base != redo:
        raise ContractError(
            "finite_diff_check: f is not deterministic (did you leave dropout in train mode?)")

    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    max_err = 0.0
    for i in range(flat.size):
        orig = flat[i]
        a = aflat[i]
        best = math.inf
        for step in steps:
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            denom = max(abs(a), abs(numeric), 1e-8)
            best = min(best, abs(a - numeric) / denom)
        if best > max_err:
            max_err = best
    return max_err
