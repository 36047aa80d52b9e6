"""Minimal reverse-mode autodiff over float64 numpy arrays.

Tensors form an implicit DAG through parent links; ``backward`` topologically
sorts the graph and accumulates gradients into every ``requires_grad`` leaf.
Only the operations needed by the rest of the package are provided.
"""

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")
        self.op = op
        self.shapes = shapes


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward is None and not loss._parents:
        raise GraphError("loss is detached from any graph")

    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data))


def mul_scalar(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clip01(a):
    a = as_tensor(a)
    inside = (a.data > 0.0) & (a.data < 1.0)
    return _make(np.clip(a.data, 0.0, 1.0), (a,), lambda g: (g * inside,))


def tsum(a):
    a = as_tensor(a)
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    return _make(np.mean(a.data), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, back)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def linear(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    return _make(x.data @ w.data + b.data, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def conv2d(x, w, b, stride=1, padding=1):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    out = kernels.conv2d_forward(x.data, w.data, b.data, stride, padding)

    def back(g):
        gx, gw, gb = kernels.conv2d_backward(np.ascontiguousarray(g), x.data,
                                             w.data, stride, padding)
        return gx, gw, gb

    return _make(out, (x, w, b), back)


def max_pool2(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2", x.shape)
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = r.max(axis=(3, 5))
    amax = (r == out[:, :, :, None, :, None])
    # break ties toward the first max tap so the backward is a partition
    flat = amax.reshape(n, c, h // 2, w // 2, 4)
    first = np.cumsum(flat, axis=-1) == 1
    sel = (flat & first).reshape(n, c, h // 2, 2, w // 2, 2)

    def back(g):
        gx = sel * g[:, :, :, None, :, None]
        return (gx.reshape(n, c, h, w),)

    return _make(out, (x,), back)


def avg_pool2(x):
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", x.shape)
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(3, 5))

    def back(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / 4.0,
                             (n, c, h // 2, 2, w // 2, 2))
        return (gx.reshape(n, c, h, w).copy(),)

    return _make(out, (x,), back)


def avg_pool_global(x):
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("avg_pool_global", x.shape)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def back(g):
        gx = np.broadcast_to(g / (h * w), (n, c, h, w)).copy()
        return (gx,)

    return _make(out, (x,), back)


def softmax_channel(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), back)


def cross_entropy_logits(logits, labels, class_weights=None):
    """Mean cross-entropy; logits (N,K) with labels (N,) or (N,K,H,W) with
    (N,H,W). ``class_weights`` (K,) reweights each label's contribution; the
    mean is taken with respect to the per-position weights."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    onehot = np.moveaxis(np.eye(k)[labels], -1, 1)
    if onehot.shape != logits.shape:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if class_weights is None:
        weighted = onehot
        count = labels.size
    else:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (k,):
            raise ShapeError("cross_entropy_weights", (k,), class_weights.shape)
        weighted = onehot * class_weights.reshape(1, k, *([1] * (onehot.ndim - 2)))
        count = weighted.sum()
    loss = -(weighted * logp).sum() / count

    def back(g):
        p = np.exp(logp)
        w_pos = weighted.sum(axis=1, keepdims=True)
        return (g * (p * w_pos - weighted) / count,)

    return _make(loss, (logits,), back)


def bilinear_sample(x, grid):
    """Sample ``x`` (N,C,H,W) at normalized grid coords (N,Ho,Wo,2) in [-1,1].

    Returns (output, validity_mask); out-of-bounds taps contribute zero and
    clear the mask. Differentiable w.r.t. ``x`` only.
    """
    x = as_tensor(x)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != x.shape[0]:
        raise ShapeError("bilinear_sample", x.shape, grid.shape)
    out, mask = kernels.bilinear_forward(x.data, grid)
    h, w = x.shape[2], x.shape[3]

    def back(g):
        return (kernels.bilinear_backward(np.ascontiguousarray(g), grid, h, w),)

    return _make(out, (x,), back), mask


def flip_w(x):
    x = as_tensor(x)
    return _make(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),))


_COS_EPS = 1e-8


def cosine_similarity(u, v):
    """Per-position cosine over the channel axis; (N,C,H,W) -> (N,1,H,W).

    Norms are floored at 1e-8, so a zero vector yields cosine 0.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.data.ndim != 4:
        raise ShapeError("cosine_similarity", u.shape, v.shape)
    nu = np.maximum(np.sqrt((u.data ** 2).sum(axis=1, keepdims=True)), _COS_EPS)
    nv = np.maximum(np.sqrt((v.data ** 2).sum(axis=1, keepdims=True)), _COS_EPS)
    dot = (u.data * v.data).sum(axis=1, keepdims=True)
    c = dot / (nu * nv)

    def back(g):
        # d cos/du = v/(|u||v|) - cos * u/|u|^2, with the floor freezing the norm
        u_live = nu > _COS_EPS
        v_live = nv > _COS_EPS
        gu = g * (v.data / (nu * nv) - u_live * c * u.data / nu ** 2)
        gv = g * (u.data / (nu * nv) - v_live * c * v.data / nv ** 2)
        return gu, gv

    return _make(c, (u, v), back)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "mul_scalar": mul_scalar,
    "relu": relu, "clip01": clip01, "sum": tsum, "mean": tmean,
    "concat": concat, "linear": linear, "conv2d": conv2d,
    "max_pool2": max_pool2, "avg_pool2": avg_pool2,
    "avg_pool_global": avg_pool_global, "softmax_channel": softmax_channel,
    "bilinear_sample": bilinear_sample, "cosine_similarity": cosine_similarity,
}


def forward_op(op_kind, *inputs, **kwargs):
    """Dispatch an op by name; unknown kinds raise KeyError."""
    if op_kind not in _OPS:
        raise KeyError(f"unknown op kind: {op_kind}")
    return _OPS[op_kind](*inputs, **kwargs)
