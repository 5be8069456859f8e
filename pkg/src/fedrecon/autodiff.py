"""Reverse-mode autodiff over dense float64 arrays, plus Adam.

Design notes:

* A ``Tensor`` wraps a numpy float64 array. Operators (see
  :mod:`fedrecon.ops`) record parent links and a backward closure on the
  result whenever an input is *live* (``requires_grad`` or itself
  recorded), so graphs exist only where gradients can flow.
* ``backward(loss)`` walks the recorded graph once in reverse
  topological order, accumulates ``grad`` on every ``requires_grad``
  tensor, then frees the walked graph. Calling ``backward`` again on new
  graphs without clearing grads accumulates into the same ``grad``
  arrays; a graph itself is single-use.
* Tensors hold no global state, so independent graphs can be built and
  differentiated concurrently (one training context per thread).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# When True every op result is checked for NaN/Inf. Costs a full array
# scan per op, so tests enable it and the experiment loops leave it off.
check_finite = False


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform; names the op and shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def live(self):
        """True when gradients can flow into or through this tensor."""
        return self.requires_grad or self._backward_fn is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        """Same values, cut off from the graph (shares the data array)."""
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.data.shape}")

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        from fedrecon import ops

        return ops.add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from fedrecon import ops

        return ops.add(self, ops.scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        from fedrecon import ops

        return ops.add(_as_tensor(other), ops.scale(self, -1.0))

    def __mul__(self, other):
        from fedrecon import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from fedrecon import ops

        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from fedrecon import ops

        return ops.scale(self, -1.0)

    def sum(self):
        from fedrecon import ops

        return ops.tsum(self)

    def mean(self):
        from fedrecon import ops

        return ops.tmean(self)

    def log(self):
        from fedrecon import ops

        return ops.tlog(self)

    def __getitem__(self, idx):
        from fedrecon import ops

        return ops.index(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op_name, data, parents, backward_fn):
    """Build an op result; records the tape node only if a parent is live.

    ``backward_fn(upstream)`` must return one gradient array (or None)
    per parent, aligned with ``parents``.
    """
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op_name}: non-finite values in forward result")
    out = Tensor(data)
    if any(p.live for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad tensor.

    ``loss`` must be scalar (size 1) and carry a recorded graph. The
    graph is freed afterwards; grads accumulate across calls until the
    caller clears them (adam_step does).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_fn is None:
        raise RuntimeError("backward on a tensor with no recorded tape")
    backward_from(loss, np.ones_like(loss.data))


def backward_from(root, upstream):
    """Reverse-mode sweep from ``root`` seeded with ``upstream``.

    Exists separately from :func:`backward` so a gradient computed
    elsewhere (e.g. a latent gradient shipped between sites) can be
    injected into a locally recorded graph.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != root.data.shape:
        raise ShapeMismatch("backward_from", upstream.shape, root.data.shape)

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.live:
                stack.append((p, False))

    grads = {id(root): upstream}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.live:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    # free the tape: graphs are single-use
    for node in topo:
        node._parents = ()
        node._backward_fn = None


# -- parameter collections --------------------------------------------------

PARAMSET_MAGIC = b"FLMP"
PARAMSET_VERSION = 1


class ParamSet:
    """Ordered, uniquely named collection of parameter tensors."""

    def __init__(self, entries):
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in ParamSet")
        self.entries = [(str(n), t) for n, t in entries]
        self._index = {n: t for n, t in self.entries}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name):
        return name in self._index

    def names(self):
        return [n for n, _ in self.entries]

    def tensors(self):
        return [t for _, t in self.entries]

    def get(self, name):
        return self._index[name]

    def shape_compatible(self, other):
        """Same names, same order, same shapes."""
        if len(self) != len(other):
            return False
        return all(
            a == b and ta.data.shape == tb.data.shape
            for (a, ta), (b, tb) in zip(self.entries, other.entries)
        )

    def clone(self, requires_grad=None):
        return ParamSet(
            [
                (n, Tensor(t.data.copy(), t.requires_grad if requires_grad is None else requires_grad))
                for n, t in self.entries
            ]
        )

    def detached(self):
        """Forward-only copy (fresh arrays, requires_grad off)."""
        return self.clone(requires_grad=False)

    def zero_grads(self):
        for _, t in self.entries:
            t.grad = None

    def subset(self, predicate):
        """ParamSet view of entries whose name satisfies ``predicate``."""
        return ParamSet([(n, t) for n, t in self.entries if predicate(n)])

    # -- binary codec (magic "FLMP") ----------------------------------------

    def to_bytes(self):
        parts = [PARAMSET_MAGIC, struct.pack("<HI", PARAMSET_VERSION, len(self.entries))]
        for name, t in self.entries:
            nb = name.encode("utf-8")
            parts.append(struct.pack("<H", len(nb)))
            parts.append(nb)
            shape = t.data.shape
            parts.append(struct.pack("<I", len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf, requires_grad=True):
        if buf[:4] != PARAMSET_MAGIC:
            raise ValueError(f"bad ParamSet magic {buf[:4]!r}")
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != PARAMSET_VERSION:
            raise ValueError(f"unsupported ParamSet version {version}")
        off = 10
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
            off += 4 * rank
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            entries.append((name, Tensor(data.copy(), requires_grad=requires_grad)))
        return cls(entries)


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-ParamSet Adam moments; belongs to one training context."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for name, t in params:
            state.first_moment[name] = np.zeros_like(t.data)
            state.second_moment[name] = np.zeros_like(t.data)
        return state


def adam_step(params, state, lr):
    """One bias-corrected Adam update over ``params``; clears grads after."""
    for name, t in params:
        if t.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params:
        g = t.grad
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = None
