"""Dense tensors with reverse-mode gradients for the ops the model needs.

Values are numpy arrays (float64 by default, float32 opt-in). Every op builds
a node whose backward closure accumulates exact analytic gradients into its
parents, so gradients are additive across uses. `backward()` runs the tape in
reverse topological order from a scalar loss.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch

DEFAULT_DTYPE = np.float64

__all__ = [
    "Tensor",
    "param",
    "constant",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "add_const",
    "scale",
    "mul",
    "affine",
    "relu",
    "hinge",
    "sigmoid",
    "exp",
    "l2_normalize",
    "concat",
    "reshape",
    "transpose",
    "slice_last",
    "broadcast_spatial",
    "space_to_depth",
    "mean_pool",
    "mean_all",
    "sum_all",
    "softmax",
    "softmax_cross_entropy",
    "squared_error",
    "squared_distance",
    "embedding_mean",
    "gather_rows",
    "take_rows",
    "weighted_sum",
    "gradcheck",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeMismatch(f"tensors are limited to 4 dims, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data, dtype=None) -> Tensor:
    """Trainable tensor."""
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=False)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = bwd
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad over the whole graph."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _node(a.data - b.data, (a, b), bwd)


def add_const(a: Tensor, c) -> Tensor:
    def bwd(g):
        a.accumulate(g)

    return _node(a.data + c, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        a.accumulate(g * c)

    return _node(a.data * c, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a Tensor of the same shape or a constant array."""
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")

        def bwd(g):
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return _node(a.data * b.data, (a, b), bwd)

    barr = np.asarray(b, dtype=a.data.dtype)

    def bwd_const(g):
        ga = g * barr
        if barr.shape != a.shape:  # constant was broadcast
            ga = _unbroadcast(ga, a.shape)
        a.accumulate(ga)

    return _node(a.data * barr, (a,), bwd_const)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-location affine map on the last axis: y[..., :] = x[..., :] @ w + b.

    With grid-shaped inputs this is exactly a 1x1 convolution.
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"affine: input width {x.shape} incompatible with weight {w.shape}")
    if w.shape[1] != b.shape[0] or b.data.ndim != 1:
        raise ShapeMismatch(f"affine: weight {w.shape} incompatible with bias {b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data + b.data

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x.accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w.accumulate(x2.T @ g2)
        if b.requires_grad:
            b.accumulate(g2.sum(axis=0))

    return _node(y.reshape(*lead, w.shape[1]), (x, w, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        x.accumulate(g * mask)

    return _node(x.data * mask, (x,), bwd)


def hinge(x: Tensor) -> Tensor:
    """max(0, x); the rectifier applied to a margin expression."""
    return relu(x)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        x.accumulate(g * y * (1.0 - y))

    return _node(y, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        x.accumulate(g * y)

    return _node(y, (x,), bwd)


L2_EPS = 1e-12


def l2_normalize(x: Tensor) -> Tensor:
    """Normalize along the last axis: x / sqrt(sum(x^2) + eps^2), eps = 1e-12.

    The guard keeps the op finite (and differentiable) at the zero vector;
    for inputs with norm > 1e-6 the output norm is 1 within 1e-9.
    """
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + L2_EPS * L2_EPS)
    y = x.data / n

    def bwd(g):
        dot = np.sum(g * x.data, axis=-1, keepdims=True)
        x.accumulate(g / n - x.data * (dot / (n * n * n)))

    return _node(y, (x,), bwd)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ValueError("concat of zero tensors")
    ref = xs[0].shape
    ax = axis if axis >= 0 else len(ref) + axis
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ShapeMismatch(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    widths = [t.shape[ax] for t in xs]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=ax)
        for t, gp in zip(xs, parts):
            if t.requires_grad:
                t.accumulate(gp)

    return _node(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        x.accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        x.accumulate(g.transpose(inv))

    return _node(x.data.transpose(axes), (x,), bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        x.accumulate(gx)

    return _node(np.ascontiguousarray(x.data[..., start:stop]), (x,), bwd)


def broadcast_spatial(v: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Tile per-sample vectors (B, C) over a grid -> (B, H, W, C)."""
    if v.data.ndim != 2:
        raise ShapeMismatch(f"broadcast_spatial expects (B, C), got {v.shape}")
    y = np.broadcast_to(v.data[:, None, None, :], (v.shape[0], grid_h, grid_w, v.shape[1])).copy()

    def bwd(g):
        v.accumulate(g.sum(axis=(1, 2)))

    return _node(y, (v,), bwd)


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """Fold factor x factor patches into channels: (B, H, W, C) -> (B, H/f, W/f, f*f*C)."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"space_to_depth expects (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeMismatch(f"space_to_depth: grid {h}x{w} not divisible by {factor}")
    hh, ww = h // factor, w // factor
    y = (
        x.data.reshape(b, hh, factor, ww, factor, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, hh, ww, factor * factor * c)
    )

    def bwd(g):
        gx = (
            g.reshape(b, hh, ww, factor, factor, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, h, w, c)
        )
        x.accumulate(gx)

    return _node(y, (x,), bwd)


def mean_pool(x: Tensor) -> Tensor:
    """Spatial average: (B, H, W, C) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"mean_pool expects (B, H, W, C), got {x.shape}")
    hw = x.shape[1] * x.shape[2]

    def bwd(g):
        x.accumulate(np.broadcast_to(g[:, None, None, :] / hw, x.shape))

    return _node(x.data.mean(axis=(1, 2)), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        x.accumulate(np.full_like(x.data, float(g) / n))

    return _node(np.asarray(x.data.mean()), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        x.accumulate(np.full_like(x.data, float(g)))

    return _node(np.asarray(x.data.sum()), (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis (log-sum-exp shifted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        x.accumulate(p * (g - dot))

    return _node(p, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of softmax(logits) against one-hot target indices.

    logits: (B, K); targets: (B,) integer indices. Returns (B,).
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (logits.shape[0],):
        raise ShapeMismatch(f"targets {idx.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    rows = np.arange(logits.shape[0])
    loss = lse - z[rows, idx]

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, idx] -= 1.0
        logits.accumulate(p * g[:, None])

    return _node(loss, (logits,), bwd)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (a - b)^2."""
    _same_shape(a, b, "squared_error")
    d = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(2.0 * d * g)
        if b.requires_grad:
            b.accumulate(-2.0 * d * g)

    return _node(d * d, (a, b), bwd)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared L2 distance over the last axis: (..., C) -> (...)."""
    _same_shape(a, b, "squared_distance")
    d = a.data - b.data

    def bwd(g):
        gd = 2.0 * d * np.expand_dims(g, -1)
        if a.requires_grad:
            a.accumulate(gd)
        if b.requires_grad:
            b.accumulate(-gd)

    return _node(np.sum(d * d, axis=-1), (a, b), bwd)


def embedding_mean(table: Tensor, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of embedding rows per sample: table (V, E), ids (B, L), mask (B, L) -> (B, E).

    Masked-out positions (mask 0) are padding; each row must have at least one
    active token.
    """
    ids = np.asarray(ids, dtype=np.int64)
    m = np.asarray(mask, dtype=table.data.dtype)
    counts = m.sum(axis=1)
    if np.any(counts <= 0):
        raise ValueError("embedding_mean: every sample needs at least one token")
    emb = table.data[ids] * m[..., None]
    out = emb.sum(axis=1) / counts[:, None]

    def bwd(g):
        contrib = (g[:, None, :] / counts[:, None, None]) * m[..., None]
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), contrib.reshape(-1, table.shape[1]))
        table.accumulate(gt)

    return _node(out, (table,), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select one row per sample along axis 1: x (B, K, ...) -> (B, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim < 2 or idx.shape != (x.shape[0],):
        raise ShapeMismatch(f"gather_rows: x {x.shape} with idx {idx.shape}")
    rows = np.arange(x.shape[0])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        x.accumulate(gx)

    return _node(x.data[rows, idx].copy(), (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 (duplicates allowed; gradients accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch(f"take_rows: index must be 1-d, got {idx.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.accumulate(gx)

    return _node(x.data[idx].copy(), (x,), bwd)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar combination sum_i w_i * t_i of scalar tensors."""
    if len(terms) != len(weights):
        raise ValueError("weighted_sum: one weight per term")
    for t in terms:
        if t.data.size != 1:
            raise ShapeMismatch(f"weighted_sum expects scalars, got shape {t.shape}")
    total = np.asarray(sum(float(w) * t.data for t, w in zip(terms, weights)))

    def bwd(g):
        for t, w in zip(terms, weights):
            if t.requires_grad:
                t.accumulate(np.asarray(float(g) * float(w)))

    return _node(total, tuple(terms), bwd)


def gradcheck(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` rebuilds a scalar loss from the (float64) tensors in `wrt`. At most
    `max_coords` coordinates are probed per tensor. The relative error uses a
    1e-3 absolute floor in the denominator so coordinates whose true gradient
    is zero compare against finite-difference noise sensibly.
    """
    rng = rng or np.random.default_rng(0)
    zero_grads(wrt)
    out = fn()
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(fn().data)
            flat[c] = orig - h
            f_minus = float(fn().data)
            flat[c] = orig
            num = (f_plus - f_minus) / (2 * h)
            ana = ga.reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-3)
            worst = max(worst, err)
    return worst
