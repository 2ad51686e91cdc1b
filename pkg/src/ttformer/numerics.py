"""Dense float64 algebra and a small tape-based reverse-mode differentiator.

Arrays are plain ``numpy.ndarray`` objects in double precision. A
:class:`DiffGraph` records operations in creation order, so the node list is
already topologically sorted; :func:`backward` walks it in reverse and
:func:`grad_check` replays it forward with perturbed parameters.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np

MASK_FILL = -1e30


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class ContractError(ValueError):
    pass


# -- random streams ---------------------------------------------------------


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """PCG64 stream for ``seed``, optionally split by string/int keys.

    Keys are folded through CRC32 so that the derived stream for, say,
    ``("init", "enc0.attn.wq")`` never depends on which other streams exist.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn)
    return np.random.Generator(np.random.PCG64(ss))


# -- plain matrix ops -------------------------------------------------------


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def _softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        if not np.all(mask.any(axis=-1)):
            raise DegenerateRowError("softmax row has every position masked")
        x = np.where(mask, x, MASK_FILL)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        out = np.where(mask, out, 0.0)
    return out


def softmax_rows(m, mask=None) -> np.ndarray:
    """Row-wise softmax. ``mask`` is boolean, True where a position may be attended."""
    m = as_matrix(m)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match {m.shape}")
    return _softmax(m, mask)


def _layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def layer_norm_rows(m, gain, bias, eps: float = 1e-5) -> np.ndarray:
    m = as_matrix(m)
    gain = np.asarray(gain, dtype=np.float64).reshape(-1)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if gain.shape[0] != m.shape[1] or bias.shape[0] != m.shape[1]:
        raise ShapeError(f"gain/bias lengths {gain.shape[0]}/{bias.shape[0]} do not match {m.shape[1]} columns")
    if eps <= 0:
        raise ContractError("eps must be positive")
    return _layer_norm(m, gain, bias, eps)[0]


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# -- differentiable tape ----------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class Node:
    __slots__ = ("graph", "index", "kind", "parents", "value", "grad", "requires_grad", "fwd", "bwd", "name")

    def __init__(self, graph, index, kind, parents, value, requires_grad, fwd=None, bwd=None, name=None):
        self.graph = graph
        self.index = index
        self.kind = kind
        self.parents = parents
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.fwd = fwd
        self.bwd = bwd
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}#{self.index}, shape={self.value.shape})"

    def _lift(self, other) -> Node:
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __getitem__(self, idx):
        return self.graph.getitem(self, idx)

    def relu(self):
        return self.graph.relu(self)

    def tanh(self):
        return self.graph.tanh(self)

    def sum(self, axis=None):
        return self.graph.sum(self, axis)

    def mean(self, axis=None):
        return self.graph.mean(self, axis)

    def reshape(self, *shape):
        return self.graph.reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return self.graph.transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)

    @property
    def T(self):
        return self.graph.transpose(self, None)


class DiffGraph:
    """Operation tape. Nodes are appended in evaluation order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, parents, value, requires_grad, fwd=None, bwd=None, name=None) -> Node:
        node = Node(self, len(self.nodes), kind, tuple(parents), value, requires_grad, fwd, bwd, name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), False)

    def param(self, value, name: str) -> Node:
        if name in self.params:
            return self.nodes[self.params[name]]
        node = self._push("param", (), np.array(value, dtype=np.float64), True, name=name)
        self.params[name] = node.index
        return node

    def op(self, kind: str, parents: Sequence[Node], fwd: Callable, bwd: Callable) -> Node:
        value = fwd(*(p.value for p in parents))
        return self._push(kind, [p.index for p in parents], value, any(p.requires_grad for p in parents), fwd, bwd)

    # elementwise / linear algebra

    def add(self, a, b):
        return self.op("add", (a, b), np.add,
                       lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))

    def sub(self, a, b):
        return self.op("sub", (a, b), np.subtract,
                       lambda g, out, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))

    def mul(self, a, b):
        return self.op("mul", (a, b), np.multiply,
                       lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    def scale(self, a, c: float):
        return self.op("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))

    def matmul(self, a, b):
        if a.value.shape[-1] != b.value.shape[-2]:
            raise ShapeError(f"cannot multiply {a.value.shape} by {b.value.shape}")

        def bwd(g, out, x, y):
            return _unbroadcast(g @ _swap(y), x.shape), _unbroadcast(_swap(x) @ g, y.shape)

        return self.op("matmul", (a, b), np.matmul, bwd)

    def relu(self, a):
        return self.op("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),))

    def tanh(self, a):
        return self.op("tanh", (a,), np.tanh, lambda g, out, x: (g * (1.0 - out * out),))

    def log(self, a):
        return self.op("log", (a,), np.log, lambda g, out, x: (g / x,))

    def softmax(self, a, mask=None):
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)

        def bwd(g, s, x):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return self.op("softmax", (a,), lambda x: _softmax(x, mask), bwd)

    def layer_norm(self, a, gain, bias, eps: float = 1e-5):
        def fwd(x, gm, bt):
            return _layer_norm(x, gm, bt, eps)[0]

        def bwd(g, out, x, gm, bt):
            _, xhat, inv = _layer_norm(x, gm, bt, eps)
            gx_hat = g * gm
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
            return gx, _unbroadcast(g * xhat, gm.shape), _unbroadcast(g, bt.shape)

        return self.op("layer_norm", (a, gain, bias), fwd, bwd)

    # structural

    def concat(self, parts: Sequence[Node], axis: int = -1):
        sizes = [p.value.shape[axis] for p in parts]
        bounds = np.cumsum([0] + sizes)

        def bwd(g, out, *xs):
            return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

        return self.op("concat", parts, lambda *xs: np.concatenate(xs, axis=axis), bwd)

    def getitem(self, a, idx):
        fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def bwd(g, out, x):
            full = np.zeros_like(x)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return self.op("slice", (a,), lambda x: x[idx], bwd)

    def reshape(self, a, shape):
        return self.op("reshape", (a,), lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(x.shape),))

    def transpose(self, a, axes=None):
        if axes is None:
            nd = a.value.ndim
            axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        inverse = tuple(np.argsort(axes))
        return self.op("transpose", (a,), lambda x: np.transpose(x, axes),
                       lambda g, out, x: (np.transpose(g, inverse),))

    def sum(self, a, axis=None):
        def bwd(g, out, x):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return self.op("sum", (a,), lambda x: np.asarray(x.sum(axis=axis)), bwd)

    def mean(self, a, axis=None):
        def bwd(g, out, x):
            n = x.size if axis is None else x.shape[axis]
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, x.shape).copy(),)

        return self.op("mean", (a,), lambda x: np.asarray(x.mean(axis=axis)), bwd)

    def square(self, a):
        return self.op("square", (a,), np.square, lambda g, out, x: (2.0 * g * x,))

    # bookkeeping

    def param_nodes(self) -> dict[str, Node]:
        return {name: self.nodes[i] for name, i in self.params.items()}

    def replay(self, start: int = 0, only: np.ndarray | None = None) -> None:
        """Recompute node values from ``start`` onward (optionally only flagged nodes)."""
        for node in self.nodes[start:]:
            if node.fwd is None or (only is not None and not only[node.index]):
                continue
            node.value = node.fwd(*(self.nodes[p].value for p in node.parents))

    def downstream(self, index: int) -> np.ndarray:
        flags = np.zeros(len(self.nodes), dtype=bool)
        flags[index] = True
        for node in self.nodes[index + 1:]:
            if any(flags[p] for p in node.parents):
                flags[node.index] = True
        return flags


def _as_node(g: DiffGraph, loss) -> Node:
    return loss if isinstance(loss, Node) else g.nodes[int(loss)]


def backward(g: DiffGraph, loss) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by parameter name.

    Every node's ``grad`` attribute is populated as a side effect (zeros for
    nodes that do not influence the loss).
    """
    loss = _as_node(g, loss)
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * len(g.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for node in reversed(g.nodes[: loss.index + 1]):
        gout = grads[node.index]
        if gout is None or node.bwd is None or not node.requires_grad:
            continue
        parents = [g.nodes[p] for p in node.parents]
        pgrads = node.bwd(gout, node.value, *(p.value for p in parents))
        for p, pg in zip(parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            grads[p.index] = pg if grads[p.index] is None else grads[p.index] + pg
    for node, gr in zip(g.nodes, grads):
        node.grad = np.zeros_like(node.value) if gr is None else gr
    return {name: g.nodes[i].grad for name, i in g.params.items()}


def numerical_gradients(g: DiffGraph, loss, step: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences of ``loss`` w.r.t. every parameter, by replaying the tape."""
    loss = _as_node(g, loss)
    out = {}
    for name, pi in g.params.items():
        pnode = g.nodes[pi]
        flags = g.downstream(pi)
        base = pnode.value.copy()
        num = np.zeros_like(base)
        flat = pnode.value.reshape(-1)
        for j in range(flat.size):
            flat[j] = base.flat[j] + step
            g.replay(pi + 1, flags)
            up = float(loss.value)
            flat[j] = base.flat[j] - step
            g.replay(pi + 1, flags)
            down = float(loss.value)
            flat[j] = base.flat[j]
            num.flat[j] = (up - down) / (2.0 * step)
        g.replay(pi + 1, flags)
        out[name] = num
    return out


def grad_check(g: DiffGraph, loss, step: float = 1e-6) -> float:
    """Max over all parameter entries of |analytic - numeric| / max(1, |analytic|, |numeric|)."""
    if not 1e-7 <= step <= 1e-4:
        raise ContractError("finite-difference step must lie in [1e-7, 1e-4]")
    analytic = backward(g, loss)
    numeric = numerical_gradients(g, loss, step)
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
