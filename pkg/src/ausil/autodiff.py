"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and remembers how it was produced; calling
`backward` on a scalar loss walks the graph in reverse topological order and
accumulates gradients into every tensor created with `requires_grad=True`.
Only the operations needed by this package are provided, and shapes are kept
strict: elementwise ops require equal shapes (Python scalars are the one
exception), so silent broadcasting bugs cannot happen.

Tie-breaking and kink conventions, fixed so results are reproducible:
max-style ops route gradient to the first maximum in row-major order,
relu picks slope 0 at exactly 0, and hard_tanh picks slope 0 at exactly +/-1.

The plain-array helpers (`conv2d_forward`, `maxpool2d_forward`, ...) are the
single implementation of each forward rule; inference-only code calls them
directly on float32 batches while the Tensor ops wrap them with backward
closures.
"""

from __future__ import annotations

import numpy as np

# -- Plain-array forward rules ----------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N*oh*ow, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, oh, ow, c, kh, kw), strides=(s[0], s[2], s[3], s[1], s[2], s[3]), writeable=False
    )
    return np.ascontiguousarray(view).reshape(n * oh * ow, c * kh * kw)


def _zero_pad(x: np.ndarray, padding: int) -> np.ndarray:
    # np.pad's generality costs more than these tiny arrays do
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def conv2d_forward(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, padding: int, with_ctx: bool = False
):
    """2-D convolution (cross-correlation), stride 1, symmetric zero padding.

    With `with_ctx` the padded input and patch matrix are returned as well so
    a following backward pass can skip recomputing them.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != c:
        raise ValueError(f"kernel expects {c_in} input channels, got {c}")
    xp = _zero_pad(x, padding) if padding else x
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # keep the batch axis out of the gemm so each sample's result is
    # bit-identical no matter how inputs were batched
    cols = _im2col(xp, kh, kw)
    out = cols.reshape(n, oh * ow, c * kh * kw) @ kernel.reshape(c_out, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    return (out, xp, cols) if with_ctx else out


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    padding: int,
    grad_out: np.ndarray,
    ctx: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dkernel, dbias) for `conv2d_forward`."""
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if ctx is not None:
        xp, cols = ctx
    else:
        xp = _zero_pad(x, padding) if padding else x
        cols = _im2col(xp, kh, kw)
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
    dkernel = (gmat.T @ cols).reshape(kernel.shape)
    dbias = gmat.sum(axis=0)
    dcols = (gmat @ kernel.reshape(c_out, -1)).reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + oh, j : j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    return dx, dkernel, dbias


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Returns the pooled array and the argmax indices needed for backward.
    """
    n, c, h, w = x.shape
    he, we = h - h % 2, w - w % 2
    windows = x[:, :, :he, :we].reshape(n, c, he // 2, 2, we // 2, 2)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, he // 2, we // 2, 4)
    idx = windows.argmax(axis=-1)  # ties resolve to the first position
    return windows.max(axis=-1), idx


def maxpool2d_backward(x_shape: tuple[int, ...], idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    he, we = h - h % 2, w - w % 2
    dwin = np.zeros((n, c, he // 2, we // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(dwin, idx[..., None], grad_out[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    dx[:, :, :he, :we] = dwin.reshape(n, c, he // 2, we // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, he, we)
    return dx


# -- Tensor graph -----------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    # Operator sugar for the scalar arithmetic used in loss expressions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar-vs-array mixing is allowed, so a full sum is the only case.
    if shape == grad.shape:
        return grad
    return np.sum(grad, dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(grad):
        a._accumulate(_reduce_to(grad, a.data.shape))
        b._accumulate(_reduce_to(grad, b.data.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data - b.data, parents=(a, b))

    def backward(grad):
        a._accumulate(_reduce_to(grad, a.data.shape))
        b._accumulate(-_reduce_to(grad, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(grad):
        a._accumulate(_reduce_to(grad * b.data, a.data.shape))
        b._accumulate(_reduce_to(grad * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(grad):
        a._accumulate(grad @ b.data.T)
        b._accumulate(a.data.T @ grad)

    out._backward = backward
    return out


def matvec(m: Tensor, v: Tensor) -> Tensor:
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise ValueError("matvec expects a matrix and a vector")
    out = Tensor(m.data @ v.data, parents=(m, v))

    def backward(grad):
        m._accumulate(np.outer(grad, v.data))
        v._accumulate(m.data.T @ grad)

    out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy(), parents=(a,))
    out._backward = lambda grad: a._accumulate(grad.T)
    return out


def scale_rows(m: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of `m` by `s[i]`."""
    if m.data.ndim != 2 or s.data.ndim != 1 or m.data.shape[0] != s.data.shape[0]:
        raise ValueError("scale_rows expects (X, C) and (X,) operands")
    out = Tensor(m.data * s.data[:, None], parents=(m, s))

    def backward(grad):
        m._accumulate(grad * s.data[:, None])
        s._accumulate(np.sum(grad * m.data, axis=1))

    out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))
    out._backward = lambda grad: a._accumulate(grad * (a.data > 0.0))
    return out


def hard_tanh(a: Tensor) -> Tensor:
    out = Tensor(np.clip(a.data, -1.0, 1.0), parents=(a,))
    out._backward = lambda grad: a._accumulate(grad * ((a.data > -1.0) & (a.data < 1.0)))
    return out


def row_max(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise ValueError("row_max expects a matrix")
    idx = m.data.argmax(axis=1)
    out = Tensor(m.data[np.arange(m.data.shape[0]), idx], parents=(m,))

    def backward(grad):
        dm = np.zeros_like(m.data)
        dm[np.arange(m.data.shape[0]), idx] = grad
        m._accumulate(dm)

    out._backward = backward
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(np.mean(a.data, dtype=np.float64), parents=(a,))
    out._backward = lambda grad: a._accumulate(np.full_like(a.data, float(grad) / a.data.size))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data, dtype=np.float64), parents=(a,))
    out._backward = lambda grad: a._accumulate(np.full_like(a.data, float(grad)))
    return out


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale a vector to unit length; near-zero vectors map to zero."""
    if v.data.ndim != 1:
        raise ValueError("l2_normalize expects a vector")
    norm = float(np.linalg.norm(v.data))
    if norm <= eps:
        out = Tensor(np.zeros_like(v.data), parents=(v,))
        out._backward = lambda grad: v._accumulate(np.zeros_like(v.data))
        return out
    unit = v.data / norm
    out = Tensor(unit, parents=(v,))

    def backward(grad):
        v._accumulate((grad - unit * np.dot(unit, grad)) / norm)

    out._backward = backward
    return out


def pad2d(m: Tensor, bottom: int, right: int, value: float) -> Tensor:
    """Pad a matrix at the bottom/right edges with a constant."""
    if m.data.ndim != 2:
        raise ValueError("pad2d expects a matrix")
    x, y = m.data.shape
    data = np.full((x + bottom, y + right), value, dtype=m.data.dtype)
    data[:x, :y] = m.data
    out = Tensor(data, parents=(m,))
    out._backward = lambda grad: m._accumulate(grad[:x, :y])
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._backward = lambda grad: a._accumulate(grad.reshape(a.data.shape))
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    bias_data = None if bias is None else bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    data, xp, cols = conv2d_forward(x.data, kernel.data, bias_data, padding, with_ctx=True)
    out = Tensor(data, parents=parents)

    def backward(grad):
        dx, dk, db = conv2d_backward(x.data, kernel.data, padding, grad, ctx=(xp, cols))
        x._accumulate(dx)
        kernel._accumulate(dk)
        if bias is not None:
            bias._accumulate(db)

    out._backward = backward
    return out


def maxpool2d(x: Tensor) -> Tensor:
    data, idx = maxpool2d_forward(x.data)
    out = Tensor(data, parents=(x,))
    out._backward = lambda grad: x._accumulate(maxpool2d_backward(x.data.shape, idx, grad))
    return out


# -- Backward pass ----------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: list[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Populate `.grad` through the graph below `loss` (a scalar).

    Returns a name-keyed gradient map for `params`; parameters that do not
    appear in the graph get zero gradients rather than being omitted.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        # nodes off every path to the loss never receive gradient
        if node._backward is not None and node.requires_grad and node.grad is not None:
            node._backward(node.grad)
    result: dict[str, np.ndarray] = {}
    for p in params or []:
        if p.name is None:
            raise ValueError("parameters passed to backward must be named")
        result[p.name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return result
