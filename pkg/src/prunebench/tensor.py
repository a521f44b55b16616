"""Dense tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing their gradient contributions.  Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse
topological order.  Arrays are numpy ``ndarray`` objects in C order, so
the flat row-major layout and the shape are both available.

Only the primitives needed by the reference architectures are provided:
affine ``dense``, ``conv2d``, ``relu``, ``maxpool2d``, ``flatten``,
``masked`` (elementwise mask product) and ``softmax_cross_entropy``.
"""

from __future__ import annotations

import enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Precision(str, enum.Enum):
    BITS32 = "bits32"
    BITS64 = "bits64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.BITS32 else np.float64)

    @classmethod
    def from_dtype(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.BITS32
        if dtype == np.float64:
            return cls.BITS64
        raise TypeError(f"unsupported dtype {dtype}")


class DimensionError(ValueError):
    """Shape mismatch between an input and what a primitive expects."""


class GraphStateError(RuntimeError):
    """Backward requested without a recorded forward pass."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf values."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.array(data, dtype=dtype, copy=True, order="C") if dtype is not None else np.array(data, copy=True, order="C")
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.name = ""
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            bad = int((~np.isfinite(self.data)).sum())
            raise NonFiniteError(f"{what} {self.name or ''} has {bad} non-finite value(s)".replace("  ", " "))
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphStateError("tensor does not require grad; nothing was recorded")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        # release the graph so activations can be collected
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{', grad' if self.requires_grad else ''})"


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision in one op: {sorted(str(d) for d in dtypes)}")


def masked(weights: Tensor, mask: np.ndarray) -> Tensor:
    """Effective weights ``mask * weights``.

    The gradient handed back to ``weights`` is the gradient with respect to
    the effective weight, unmasked, so scoring can inspect pruned positions.
    Optimizers zero updates at masked positions themselves.
    """
    if mask.shape != weights.shape:
        raise DimensionError(f"mask shape {mask.shape} != weight shape {weights.shape}")
    out = weights.data * mask.astype(weights.dtype, copy=False)
    return Tensor._from_op(out, (weights,), lambda g: (g,))


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``x`` [batch, in], ``w`` [in, out], ``b`` [out]."""
    _same_dtype(x, w, *(b,) if b is not None else ())
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, backward)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    if k <= 0 or stride <= 0 or pad < 0:
        raise DimensionError(f"invalid window k={k} stride={stride} pad={pad}")
    if k > size + 2 * pad:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view [n, c, oh, ow, kh, kw] over a padded NCHW array."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.  ``x`` is NCHW, ``w`` is [cout, cin, kh, kw]."""
    _same_dtype(x, w, *(b,) if b is not None else ())
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wd, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, kh, kw, stride, oh, ow)
    # [n, oh, ow, cin*kh*kw] @ [cin*kh*kw, cout]
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols2 @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = (g2.T @ cols2).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, oh, ow, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return Tensor._from_op(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * keep,))


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, 0)
    ow = conv_output_size(w, k, stride, 0)
    win = _windows(x.data, k, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    # first maximum wins on ties
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * hit
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    batch, classes = logits.shape
    if batch == 0:
        raise DimensionError("empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise DimensionError(f"labels outside [0, {classes})")
    logp = log_softmax(logits.data)
    rows = np.arange(batch)
    loss = -logp[rows, labels].sum() / batch

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / batch),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def scale(x: Tensor, alpha: float) -> Tensor:
    a = x.dtype.type(alpha)
    return Tensor._from_op(x.data * a, (x,), lambda g: (g * a,))


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar."""
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def dot(x: Tensor, y: Tensor) -> Tensor:
    """Scalar inner product of two same-shape tensors."""
    _same_dtype(x, y)
    if x.shape != y.shape:
        raise DimensionError(f"dot: {x.shape} vs {y.shape}")
    out = np.asarray((x.data * y.data).sum(), dtype=x.dtype)
    return Tensor._from_op(out, (x, y), lambda g: (g * y.data, g * x.data))
