"""Dense tensors with a small reverse-mode autodiff tape.

Each op computes its forward value eagerly with numpy and, when gradient
recording is on and some input requires a gradient, stores a closure that
maps the output cotangent to one cotangent per input. ``Tensor.backward``
walks the resulting DAG once in reverse topological order.

Elementwise ops demand identical shapes. The only implicit broadcast is the
per-channel bias add inside ``conv2d``/``add_bias``; everything else goes
through explicit ``reshape``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import lapack

from .errors import DimensionError, NumericError, SingularMatrixError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "conv2d",
    "avgpool2",
    "relu",
    "matmul",
    "solve_spd",
    "softmax_cross_entropy",
    "concat",
    "scale",
    "add_bias",
    "add_diag",
    "diag_mean",
    "exp",
    "log",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.array(arr, dtype=dtype, copy=True)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    else:
        arr = arr.copy()
    return arr


class Tensor:
    """A numpy buffer plus optional gradient bookkeeping.

    ``stop_gradient`` marks tensors whose gradient must never be populated,
    even if they would otherwise be reached during ``backward``.
    """

    __array_priority__ = 100

    __slots__ = ("data", "requires_grad", "grad", "stop_gradient", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.stop_gradient = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self.name = name

    # -- construction helpers ------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.stop_gradient = False
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad and not p.stop_gradient for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out._op = op
        return out

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.stop_gradient = True
        out._parents = ()
        out._backward = None
        out._op = "detach"
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, Tensor):
            c = float(other)
            return Tensor._from_op(self.data + c, (self,), lambda g: (g,), "add_scalar")
        _same_shape(self, other, "add")
        return Tensor._from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return self + (-float(other))
        _same_shape(self, other, "sub")
        return Tensor._from_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            c = float(other)
            return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,), "mul_scalar")
        _same_shape(self, other, "mul")
        a, b = self.data, other.data
        return Tensor._from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported; use scale() with exp/log")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ---------------------------------------------------------------
    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise DimensionError(f"transpose expects a 2-D tensor, got shape {self.shape}")
        return Tensor._from_op(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {old} into {shape}") from exc
        return Tensor._from_op(data, (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        inv = np.argsort(axes)
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "permute")

    def astype(self, dtype) -> "Tensor":
        src = self.data.dtype
        if src == np.dtype(dtype):
            return self
        return Tensor._from_op(self.data.astype(dtype), (self,), lambda g: (g.astype(src),), "astype")

    # -- reductions ---------------------------------------------------------------
    def sum(self, axis=None) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis)), (self,), back, "sum")

    def mean(self, axis=None) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / float(n))

    # -- autodiff driver ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not recorded on a tape")
        if grad is None:
            if self.size != 1:
                raise UsageError(f"backward() without an explicit seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.stop_gradient:
                    continue
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad or parent.stop_gradient:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed so that parents are visited in declaration order
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.astype(dtype)
    return Tensor(x, dtype=dtype)


# -- elementwise ------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise DimensionError(f"scale factor must have one element, got shape {s.shape}")
    sv = s.data.reshape(()).astype(x.dtype)
    s_shape = s.shape
    xd = x.data

    def back(g):
        return g * sv, np.asarray(np.sum(g * xd), dtype=s.dtype).reshape(s_shape)

    return Tensor._from_op(xd * sv, (x, s), back, "scale")


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias of shape {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return Tensor._from_op(
        x.data + b.data.reshape(view).astype(x.dtype),
        (x, b),
        lambda g: (g, g.sum(axis=other).astype(b.dtype)),
        "add_bias",
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


def add_diag(a: Tensor, s: Tensor) -> Tensor:
    """``a + s * I`` for square ``a`` and single-element ``s``."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"add_diag expects a square matrix, got {a.shape}")
    n = a.shape[0]
    out = a.data.copy()
    out[np.diag_indices(n)] += s.data.reshape(()).astype(a.dtype)
    s_shape = s.shape
    return Tensor._from_op(
        out, (a, s), lambda g: (g, np.asarray(np.trace(g), dtype=s.dtype).reshape(s_shape)), "add_diag"
    )


def diag_mean(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diag_mean expects a square matrix, got {a.shape}")
    n = a.shape[0]

    def back(g):
        out = np.zeros_like(a.data)
        out[np.diag_indices(n)] = g / n
        return (out,)

    return Tensor._from_op(np.asarray(np.trace(a.data) / n, dtype=a.dtype), (a,), back, "diag_mean")


def _cholesky(a64: np.ndarray) -> np.ndarray:
    c, info = lapack.dpotrf(a64, lower=1, clean=1)
    if info > 0:
        raise SingularMatrixError(info - 1)
    if info < 0:
        raise NumericError(f"dpotrf rejected argument {-info}")
    return c


def _cho_solve(c: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    x, info = lapack.dpotrs(c, rhs, lower=1)
    if info != 0:
        raise NumericError(f"dpotrs failed with info={info}")
    return x


def solve_spd(a: Tensor, b: Tensor) -> Tensor:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky.

    Always factorises in float64. The lower triangle of ``a`` is read; the
    gradient w.r.t. ``a`` is returned symmetrised, which is the correct
    cotangent when ``a`` is itself a symmetric function of upstream values.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"solve_spd: coefficient matrix must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"solve_spd: row axis of rhs is {b.shape[0]}, expected {a.shape[0]}")
    a64 = np.asarray(a.data, dtype=np.float64)
    b64 = np.asarray(b.data, dtype=np.float64)
    if not (np.all(np.isfinite(a64)) and np.all(np.isfinite(b64))):
        raise NumericError("solve_spd: non-finite input")
    chol = _cholesky(a64)
    x64 = _cho_solve(chol, b64.reshape(b64.shape[0], -1))
    x64 = x64.reshape(b64.shape)
    out_dtype = np.result_type(a.dtype, b.dtype)

    def back(g):
        g64 = np.asarray(g, dtype=np.float64).reshape(b64.shape[0], -1)
        gb = _cho_solve(chol, g64)
        ga = None
        if a.requires_grad:
            ga = -gb @ x64.reshape(b64.shape[0], -1).T
            ga = 0.5 * (ga + ga.T)
            ga = ga.astype(a.dtype)
        gb = gb.reshape(b64.shape).astype(b.dtype)
        return ga, gb

    return Tensor._from_op(x64.astype(out_dtype), (a, b), back, "solve_spd")


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Batch mean of ``-sum_c targets * log_softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    _same_shape(logits, targets, "softmax_cross_entropy")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    t = targets.data.astype(z.dtype)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(t * logp).sum() / n

    def back(g):
        g = float(g)
        p = np.exp(logp)
        gz = (p * t.sum(axis=1, keepdims=True) - t) * (g / n)
        gt = (-logp * (g / n)).astype(targets.dtype) if targets.requires_grad else None
        return gz, gt

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits, targets), back, "xent")


# -- convolution / pooling -----------------------------------------------------------


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Padded NHWC input -> [B*H*W, 9*C] patches ordered (kh, kw, c)."""
    b, _, _, c = xp.shape
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B, H, W, C, 3, 3
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, 9 * c)


def _conv_nhwc(x: np.ndarray, wmat: np.ndarray, bias: np.ndarray, keep_cols: bool):
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, h, w)
    out = cols @ wmat
    out += bias
    return out.reshape(b, h, w, -1), (cols if keep_cols else None)


def _col2im_grad(dcols: np.ndarray, shape) -> np.ndarray:
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, channels_last: bool = False) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.

    ``weight`` is always [C_out, C_in, 3, 3]. With ``channels_last`` the
    input/output layout is [B, H, W, C]; otherwise [B, C, H, W].
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d kernel axes (2, 3) must be 3x3, got weight shape {weight.shape}")
    c_out, c_in = weight.shape[:2]
    ch_axis = 3 if channels_last else 1
    if x.shape[ch_axis] != c_in:
        raise DimensionError(f"conv2d channel axis {ch_axis} has {x.shape[ch_axis]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias axis 0 has size {bias.shape}, expected ({c_out},)")

    xd = x.data if channels_last else x.data.transpose(0, 2, 3, 1)
    dtype = np.result_type(x.dtype, weight.dtype)
    xd = xd.astype(dtype, copy=False)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(9 * c_in, c_out).astype(dtype, copy=False)
    track = is_grad_enabled() and (x.requires_grad or weight.requires_grad or bias.requires_grad)
    out, cols = _conv_nhwc(xd, wmat, bias.data.astype(dtype, copy=False), keep_cols=track and weight.requires_grad)
    in_shape = xd.shape

    def back(g):
        g = g if channels_last else g.transpose(0, 2, 3, 1)
        gf = np.ascontiguousarray(g).reshape(-1, c_out)
        gw = None
        if weight.requires_grad:
            gw = (cols.T @ gf).reshape(3, 3, c_in, c_out).transpose(3, 2, 0, 1).astype(weight.dtype)
        gb = gf.sum(axis=0).astype(bias.dtype) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im_grad(gf @ wmat.T, in_shape).astype(x.dtype)
            if not channels_last:
                gx = gx.transpose(0, 3, 1, 2)
        return gx, gw, gb

    if not channels_last:
        out = out.transpose(0, 3, 1, 2)
    return Tensor._from_op(out, (x, weight, bias), back, "conv2d")


def avgpool2(x: Tensor, channels_last: bool = False) -> Tensor:
    """Non-overlapping 2x2 mean pool; a trailing odd row/column is dropped."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool2 input must be 4-D, got {x.shape}")
    h_ax, w_ax = (1, 2) if channels_last else (2, 3)
    h, w = x.shape[h_ax], x.shape[w_ax]
    if h < 2 or w < 2:
        raise DimensionError(f"avgpool2 needs spatial axes >= 2, got H={h} (axis {h_ax}), W={w} (axis {w_ax})")
    h2, w2 = h // 2, w // 2
    xd = x.data
    if channels_last:
        b, _, _, c = xd.shape
        out = xd[:, : 2 * h2, : 2 * w2, :].reshape(b, h2, 2, w2, 2, c).mean(axis=(2, 4))
    else:
        b, c = xd.shape[:2]
        out = xd[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))
    shape = xd.shape

    def back(g):
        up = np.repeat(np.repeat(g * 0.25, 2, axis=h_ax), 2, axis=w_ax)
        if up.shape == shape:
            return (up,)
        full = np.zeros(shape, dtype=g.dtype)
        if channels_last:
            full[:, : 2 * h2, : 2 * w2, :] = up
        else:
            full[:, :, : 2 * h2, : 2 * w2] = up
        return (full,)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), back, "avgpool2")
