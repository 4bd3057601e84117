"""Dense arrays with reverse-mode differentiation and the volumetric kernels
used by the segmentation networks.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the adjoint.  Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """An ndarray plus an optional gradient slot and the op that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    # --- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Back-propagate from this node.  ``grad`` defaults to 1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
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
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # --- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_pair(self, other)[1]))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain scalars/arrays adopt the dtype of the Tensor operand
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents: tuple, op: str, backward) -> Tensor:
    out = Tensor(data, _parents=parents, _op=op)
    if out.requires_grad:
        out._backward = backward
    else:
        out._parents = ()
    return out


# --- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b), "div", lambda g: (g / b.data, -g * out / b.data))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _node(out, (a,), "pow", lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient inside ``[lo, hi]`` and zero outside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), "sum", backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), "relu", lambda g: (g * mask,))


# --- volumetric kernels ----------------------------------------------------

def _offsets(kshape: tuple) -> list[tuple[int, int, int]]:
    kd, kh, kw = kshape
    return [(a, b, c) for a in range(kd) for b in range(kh) for c in range(kw)]


def conv3d(x, k, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    x: (N, Cin, D, H, W); k: (Cout, Cin, kd, kh, kw) with odd kernel extents.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 5 or k.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernel, got {x.shape} and {k.shape}")
    n, cin, d, h, w = x.shape
    cout, kcin, kd, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    if not (kd % 2 and kh % 2 and kw % 2):
        raise ShapeError(f"kernel extents must be odd, got {(kd, kh, kw)}")
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    offs = _offsets((kd, kh, kw))
    nk = len(offs)
    vox = d * h * w
    if nk == 1:
        cols = x.data.reshape(n, cin, vox)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        cols = np.empty((n, cin, nk, d, h, w), dtype=x.dtype)
        for i, (a, b, c) in enumerate(offs):
            cols[:, :, i] = xp[:, :, a:a + d, b:b + h, c:c + w]
        cols = cols.reshape(n, cin * nk, vox)
    wmat = k.data.reshape(cout, cin * nk)
    out = np.matmul(wmat, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, d, h, w)

    def backward(g):
        g2 = g.reshape(n, cout, vox)
        gk = None
        if k.requires_grad:
            gk = np.einsum("nov,nkv->ok", g2, cols, optimize=True).reshape(k.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if nk == 1:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, cin, nk, d, h, w)
                gxp = np.zeros((n, cin, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
                for i, (a, b, c) in enumerate(offs):
                    gxp[:, :, a:a + d, b:b + h, c:c + w] += gcols[:, :, i]
                gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2), dtype=np.float64).astype(bias.dtype))
        return tuple(grads)

    parents = (x, k) if bias is None else (x, k, bias)
    return _node(out, parents, "conv3d", backward)


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) over its spatial axes, then apply a
    per-channel affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(2, x.ndim))
    m = int(np.prod([x.shape[a] for a in axes]))
    mean = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
    xc = x.data - mean.astype(x.dtype)
    var = np.mean(np.square(xc, dtype=np.float64), axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    shape = (1, -1) + (1,) * len(axes)
    gam = gamma.data.reshape(shape)
    out = xhat * gam + beta.data.reshape(shape)

    def backward(g):
        red = (0,) + axes
        gg = (g * xhat).sum(axis=red, dtype=np.float64).astype(gamma.dtype)
        gb = g.sum(axis=red, dtype=np.float64).astype(beta.dtype)
        gxhat = g * gam
        s1 = gxhat.sum(axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
        s2 = (gxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
        gx = inv * (gxhat - s1 / m - xhat * s2 / m)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), "instance_norm", backward)


def max_pool(x, window: Sequence[int] = (1, 2, 2)) -> Tensor:
    """Non-overlapping max pooling over (D, H, W).  Ties route the gradient to
    the lowest linear index in the window."""
    x = as_tensor(x)
    n, c, d, h, w = x.shape
    wd, wh, ww = window
    if d % wd or h % wh or w % ww:
        raise ShapeError(f"pool window {tuple(window)} does not divide {(d, h, w)}")
    od, oh, ow = d // wd, h // wh, w // ww
    blocks = x.data.reshape(n, c, od, wd, oh, wh, ow, ww).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, od, oh, ow, wd * wh * ww)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, od, oh, ow, wd, wh, ww).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return _node(out, (x,), "max_pool", backward)


def upsample_nearest(x, factor: Sequence[int] = (1, 2, 2)) -> Tensor:
    x = as_tensor(x)
    fd, fh, fw = factor
    out = x.data.repeat(fd, axis=2).repeat(fh, axis=3).repeat(fw, axis=4)
    n, c, d, h, w = x.shape

    def backward(g):
        g = g.reshape(n, c, d, fd, h, fh, w, fw).sum(axis=(3, 5, 7))
        return (g,)

    return _node(out, (x,), "upsample", backward)


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _node(out, (a, b), "concat", lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), "softmax", backward)


# --- gradient checking -----------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    For each input the largest absolute discrepancy is divided by the largest
    gradient magnitude of that input, floored at 1e-3 of the largest gradient
    over all inputs (parameters whose true gradient vanishes, such as a bias
    feeding instance norm, would otherwise compare rounding noise to itself).
    With ``max_entries`` only a random subset of coordinates per input is probed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    out.backward()
    rng = np.random.default_rng(seed)
    pairs = []
    for leaf, arr in zip(leaves, arrays):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*[Tensor(a) for a in arrays]))
            flat[i] = orig - eps
            fm = float(f(*[Tensor(a) for a in arrays]))
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        pairs.append((analytic.reshape(-1)[idx], numeric))
    top = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs), default=0.0)
    worst = 0.0
    for a, n in pairs:
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-3 * top)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst
