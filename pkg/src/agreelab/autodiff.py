"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records primitive operations eagerly; :func:`backward`
walks it in reverse to accumulate gradients, and :func:`deeplift_backward`
walks a pair of structurally identical tapes (actual input / reference
input) to produce DeepLIFT multipliers.

Example::

    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = autodiff.sum(x * x)
    grads = backward(tape, y)
    grads[x.id]  # array([6.])
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from agreelab import kernels

RESCALE_EPS = 1e-7
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(RuntimeError):
    """A precondition of a tape-level routine was violated."""


class Node:
    __slots__ = ("kind", "inputs", "value", "saved")

    def __init__(self, kind: str, inputs: tuple, value: np.ndarray, saved):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.saved = saved


class Tape:
    """Ordered record of nodes; inputs always precede the node using them."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> "Var":
        arr = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), arr, None))
        return Var(self, len(self.nodes) - 1)

    def record_op(self, kind: str, inputs: Sequence[int], payload=None) -> int:
        """Append a primitive op; its value is computed immediately."""
        try:
            op = OPS[kind]
        except KeyError:
            raise ContractError(f"unknown op kind {kind!r}") from None
        n = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n:
                raise ContractError(f"{kind}: input node {i} is not on the tape")
        values = [self.nodes[i].value for i in inputs]
        value, saved = op.forward(values, payload)
        self.nodes.append(Node(kind, tuple(inputs), value, saved))
        return n

    def var(self, node_id: int) -> "Var":
        return Var(self, node_id)

    def leaves(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.kind == "leaf"]


class Var:
    """Handle to a node on a tape, with arithmetic sugar."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


# ---------------------------------------------------------------------------
# primitive definitions


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable
    # "linear": the gradient rule is exact for differences.
    # "rescale": elementwise nonlinearity, DeepLIFT uses delta_out / delta_in.
    # "bilinear": product of two operands, DeepLIFT uses averaged operands.
    # "fallback": DeepLIFT uses the local Jacobian, evaluated midway between
    # the actual and reference inputs. Forward must accept its own ``saved``
    # as the payload.
    # "custom": the op provides its own DeepLIFT rule.
    dl_kind: str
    deeplift: Callable | None = None


OPS: dict[str, OpDef] = {}


def _register(kind: str, dl_kind: str, deeplift=None):
    def deco(cls):
        OPS[kind] = OpDef(cls.forward, cls.backward, dl_kind, deeplift or getattr(cls, "deeplift", None))
        return cls

    return deco


def _suffix_broadcastable(a_shape: tuple, b_shape: tuple) -> bool:
    return len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_binary(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape and not _suffix_broadcastable(a.shape, b.shape):
        raise ShapeError(op, [a.shape, b.shape], "second operand must match or be a trailing-dims bias")


def _axis(op: str, ndim: int, axis):
    if axis is None:
        return None
    if not -ndim <= axis < max(ndim, 1):
        raise ShapeError(op, [], f"axis {axis} out of range for {ndim}-d input")
    return axis % max(ndim, 1)


@_register("add", "linear")
class _Add:
    @staticmethod
    def forward(v, p):
        _check_binary("add", v[0], v[1])
        return v[0] + v[1], None

    @staticmethod
    def backward(node, g, v):
        return g, _unbroadcast(g, v[1].shape)


@_register("sub", "linear")
class _Sub:
    @staticmethod
    def forward(v, p):
        _check_binary("sub", v[0], v[1])
        return v[0] - v[1], None

    @staticmethod
    def backward(node, g, v):
        return g, -_unbroadcast(g, v[1].shape)


@_register("scale", "linear")
class _Scale:
    @staticmethod
    def forward(v, c):
        return v[0] * c, c

    @staticmethod
    def backward(node, g, v):
        return (g * node.saved,)


def _mul_grads(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("mul", "bilinear")
class _Mul:
    @staticmethod
    def forward(v, p):
        _check_binary("mul", v[0], v[1])
        return v[0] * v[1], None

    @staticmethod
    def backward(node, g, v):
        return _mul_grads(g, v[0], v[1])


def _matmul_grads(g, a, b):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g * b, g * a


@_register("matmul", "bilinear")
class _Matmul:
    @staticmethod
    def forward(v, p):
        a, b = v
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError("matmul", [a.shape, b.shape], "operands must be 1-d or 2-d")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
        return np.asarray(a @ b, dtype=np.float64), None

    @staticmethod
    def backward(node, g, v):
        return _matmul_grads(np.asarray(g), v[0], v[1])


@_register("tanh", "rescale")
class _Tanh:
    @staticmethod
    def forward(v, p):
        return np.tanh(v[0]), None

    @staticmethod
    def backward(node, g, v):
        return (g * (1.0 - node.value**2),)


@_register("sigmoid", "rescale")
class _Sigmoid:
    @staticmethod
    def forward(v, p):
        x = v[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, None

    @staticmethod
    def backward(node, g, v):
        s = node.value
        return (g * s * (1.0 - s),)


@_register("exp", "rescale")
class _Exp:
    @staticmethod
    def forward(v, p):
        return np.exp(v[0]), None

    @staticmethod
    def backward(node, g, v):
        return (g * node.value,)


@_register("log", "rescale")
class _Log:
    @staticmethod
    def forward(v, p):
        if np.any(v[0] <= 0):
            raise ValueError("log: input must be strictly positive")
        return np.log(v[0]), None

    @staticmethod
    def backward(node, g, v):
        return (g / v[0],)


def _local_derivative(kind: str, node: Node, x: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - node.value**2
    if kind == "sigmoid":
        return node.value * (1.0 - node.value)
    if kind == "exp":
        return node.value
    if kind == "log":
        return 1.0 / x
    raise ContractError(f"no local derivative for {kind}")


@_register("sum", "linear")
class _Sum:
    @staticmethod
    def forward(v, axis):
        x = v[0]
        ax = _axis("sum", x.ndim, axis)
        if x.size == 0 or (ax is not None and x.shape[ax] == 0):
            raise ShapeError("sum", [x.shape], "empty reduction")
        return np.asarray(x.sum(axis=ax), dtype=np.float64), ax

    @staticmethod
    def backward(node, g, v):
        x = v[0]
        ax = node.saved
        if ax is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)


@_register("mean", "linear")
class _Mean:
    @staticmethod
    def forward(v, axis):
        x = v[0]
        ax = _axis("mean", x.ndim, axis)
        if x.size == 0 or (ax is not None and x.shape[ax] == 0):
            raise ShapeError("mean", [x.shape], "empty reduction")
        return np.asarray(x.mean(axis=ax), dtype=np.float64), ax

    @staticmethod
    def backward(node, g, v):
        x = v[0]
        ax = node.saved
        if ax is None:
            return (np.full(x.shape, float(g) / x.size),)
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape) / x.shape[ax],)


def _softmax(x: np.ndarray, ax: int) -> np.ndarray:
    shifted = x - x.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=ax, keepdims=True)


@_register("softmax", "fallback")
class _Softmax:
    @staticmethod
    def forward(v, axis):
        x = v[0]
        ax = _axis("softmax", x.ndim, -1 if axis is None else axis)
        if x.shape[ax] == 0:
            raise ShapeError("softmax", [x.shape], "empty axis")
        return _softmax(x, ax), ax

    @staticmethod
    def backward(node, g, v):
        s = node.value
        ax = node.saved
        return (s * (g - np.sum(g * s, axis=ax, keepdims=True)),)


@_register("log_softmax", "fallback")
class _LogSoftmax:
    @staticmethod
    def forward(v, axis):
        x = v[0]
        ax = _axis("log_softmax", x.ndim, -1 if axis is None else axis)
        if x.shape[ax] == 0:
            raise ShapeError("log_softmax", [x.shape], "empty axis")
        shifted = x - x.max(axis=ax, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
        return out, ax

    @staticmethod
    def backward(node, g, v):
        ax = node.saved
        s = np.exp(node.value)
        return (g - s * np.sum(g, axis=ax, keepdims=True),)


@_register("concat", "linear")
class _Concat:
    @staticmethod
    def forward(v, axis):
        if not v:
            raise ShapeError("concat", [], "no operands")
        ax = _axis("concat", v[0].ndim, axis or 0)
        ref = list(v[0].shape)
        for x in v[1:]:
            other = list(x.shape)
            if x.ndim != len(ref) or other[:ax] + other[ax + 1:] != ref[:ax] + ref[ax + 1:]:
                raise ShapeError("concat", [y.shape for y in v])
        sizes = [x.shape[ax] for x in v]
        return np.concatenate(v, axis=ax), (ax, np.cumsum(sizes)[:-1])

    @staticmethod
    def backward(node, g, v):
        ax, splits = node.saved
        return tuple(np.split(g, splits, axis=ax))


@_register("index_select", "linear")
class _IndexSelect:
    @staticmethod
    def forward(v, indices):
        x = v[0]
        idx = np.asarray(indices, dtype=np.intp)
        if x.ndim == 0:
            raise ShapeError("index_select", [x.shape], "cannot index a scalar")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise IndexError(f"index_select: index out of range for {x.shape[0]} rows")
        return x[idx], idx

    @staticmethod
    def backward(node, g, v):
        out = np.zeros_like(v[0])
        np.add.at(out, node.saved, g)
        return (out,)


@_register("reshape", "linear")
class _Reshape:
    @staticmethod
    def forward(v, shape):
        x = v[0]
        try:
            return x.reshape(shape), None
        except ValueError:
            raise ShapeError("reshape", [x.shape, tuple(shape)]) from None

    @staticmethod
    def backward(node, g, v):
        return (np.reshape(g, v[0].shape),)


@_register("l2_norm_sq", "custom")
class _L2NormSq:
    @staticmethod
    def forward(v, axis):
        x = v[0]
        ax = _axis("l2_norm_sq", x.ndim, axis)
        if x.size == 0:
            raise ShapeError("l2_norm_sq", [x.shape], "empty reduction")
        return np.asarray(np.sum(x * x, axis=ax), dtype=np.float64), ax

    @staticmethod
    def backward(node, g, v):
        ax = node.saved
        gg = g if ax is None else np.expand_dims(g, ax)
        return (2.0 * v[0] * gg,)

    @staticmethod
    def deeplift(node, ref, g, v, rv):
        # delta(x^2) = (x + x') * delta(x): exact
        ax = node.saved
        gg = g if ax is None else np.expand_dims(g, ax)
        return ((v[0] + rv[0]) * gg,)


def _cosine_parts(a, b):
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    dot = np.sum(a * b, axis=-1)
    return dot, na, nb


@_register("cosine_similarity", "fallback")
class _Cosine:
    @staticmethod
    def forward(v, p):
        a, b = v
        if a.ndim == 0 or b.ndim == 0 or (a.shape != b.shape and not (b.ndim == 1 and a.shape[-1] == b.shape[0])):
            raise ShapeError("cosine_similarity", [a.shape, b.shape])
        dot, na, nb = _cosine_parts(a, b)
        ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
        denom = np.where(ok, na * nb, 1.0)
        return np.where(ok, dot / denom, 0.0), None

    @staticmethod
    def backward(node, g, v):
        a, b = v
        dot, na, nb = _cosine_parts(a, b)
        ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
        na_s = np.where(ok, na, 1.0)[..., None]
        nb_s = np.where(ok, nb, 1.0)[..., None]
        cos = node.value[..., None]
        gg = np.where(ok, g, 0.0)[..., None]
        ga = gg * (b / (na_s * nb_s) - cos * a / (na_s**2))
        gb = gg * (a / (na_s * nb_s) - cos * np.broadcast_to(b, a.shape) / (nb_s**2))
        return ga, _unbroadcast(gb, b.shape)


@_register("elman", "custom")
class _Elman:
    """Fused tanh Elman recurrence: H = scan(tanh(X @ Wx + b + h_prev @ Wh))."""

    @staticmethod
    def forward(v, p):
        X, Wx, Wh, b = v
        if X.ndim != 2 or Wx.ndim != 2 or Wh.ndim != 2 or b.ndim != 1:
            raise ShapeError("elman", [x.shape for x in v], "expected X[T,i], Wx[i,d], Wh[d,d], b[d]")
        d = Wh.shape[0]
        if X.shape[1] != Wx.shape[0] or Wx.shape[1] != d or Wh.shape[1] != d or b.shape[0] != d:
            raise ShapeError("elman", [x.shape for x in v])
        if X.shape[0] == 0:
            raise ShapeError("elman", [X.shape], "empty sequence")
        H, Z = kernels.elman_scan(X @ Wx + b, Wh)
        return H, Z

    @staticmethod
    def _grads(node, g, v, slope):
        X, Wx, Wh, b = v
        dZ = kernels.elman_scan_backward(g, slope, Wh)
        H = node.value
        h_prev = np.vstack([np.zeros((1, H.shape[1])), H[:-1]])
        return dZ @ Wx.T, X.T @ dZ, h_prev.T @ dZ, dZ.sum(axis=0)

    @staticmethod
    def backward(node, g, v):
        return _Elman._grads(node, g, v, 1.0 - node.value**2)

    @staticmethod
    def deeplift(node, ref, g, v, rv):
        slope = _rescale(node.saved, ref.saved, node.value, ref.value, 1.0 - node.value**2)
        return _Elman._grads(node, g, v, slope)



# ---------------------------------------------------------------------------
# functional front-end


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.leaf(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("at least one operand must be a Var")


def _binary(kind, a, b):
    tape = _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    return Var(tape, tape.record_op(kind, (a.id, b.id)))


def _unary(kind, a: Var, payload=None):
    return Var(a.tape, a.tape.record_op(kind, (a.id,), payload))


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def matmul(a, b):
    return _binary("matmul", a, b)


def scale(a: Var, c: float) -> Var:
    return _unary("scale", a, float(c))


def tanh(a):
    return _unary("tanh", a)


def sigmoid(a):
    return _unary("sigmoid", a)


def exp(a):
    return _unary("exp", a)


def log(a):
    return _unary("log", a)


def sum(a, axis=None):  # noqa: A001
    return _unary("sum", a, axis)


def mean(a, axis=None):
    return _unary("mean", a, axis)


def softmax(a, axis=-1):
    return _unary("softmax", a, axis)


def log_softmax(a, axis=-1):
    return _unary("log_softmax", a, axis)


def concat(xs: Sequence[Var], axis=0):
    tape = _tape_of(*xs)
    return Var(tape, tape.record_op("concat", tuple(x.id for x in xs), axis))


def index_select(a, indices):
    return _unary("index_select", a, indices)


def reshape(a, shape):
    return _unary("reshape", a, tuple(shape))


def l2_norm_sq(a, axis=None):
    return _unary("l2_norm_sq", a, axis)


def cosine_similarity(a, b):
    return _binary("cosine_similarity", a, b)


def elman(X, Wx, Wh, b):
    tape = _tape_of(X, Wx, Wh, b)
    ids = tuple(_as_var(tape, x).id for x in (X, Wx, Wh, b))
    return Var(tape, tape.record_op("elman", ids))


# ---------------------------------------------------------------------------
# backward passes


def _seed(tape: Tape, output: int) -> np.ndarray:
    if not 0 <= output < len(tape.nodes):
        raise ContractError(f"output node {output} is not on the tape")
    val = tape.nodes[output].value
    if val.size != 1 or val.ndim > 1:
        raise ContractError(f"backward needs a scalar output, got shape {val.shape}")
    return np.ones_like(val)


def _finish(tape: Tape, grads: list) -> dict[int, np.ndarray]:
    out = {}
    for i, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            g = grads[i]
            out[i] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
    return out


def backward(tape: Tape, output) -> dict[int, np.ndarray]:
    """Gradient of a scalar node with respect to every leaf.

    Returns a dict keyed by leaf node id; unreachable leaves get zeros.
    """
    out_id = output.id if isinstance(output, Var) else int(output)
    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    grads[out_id] = _seed(tape, out_id)
    for i in range(out_id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.kind == "leaf":
            continue
        in_vals = [nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, OPS[node.kind].backward(node, g, in_vals)):
            grads[j] = gj if grads[j] is None else grads[j] + gj
    return _finish(tape, grads)


def _rescale(x, x_ref, y, y_ref, local):
    dx = x - x_ref
    small = np.abs(dx) < RESCALE_EPS
    return np.where(small, local, (y - y_ref) / np.where(small, 1.0, dx))


@dataclass(frozen=True)
class DualActivationState:
    actual: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        if self.actual.shape != self.reference.shape:
            raise ContractError(f"dual activations differ in shape: {self.actual.shape} vs {self.reference.shape}")


def dual_states(tape: Tape, ref_tape: Tape) -> list[DualActivationState]:
    _check_same_structure(tape, ref_tape)
    return [DualActivationState(a.value, r.value) for a, r in zip(tape.nodes, ref_tape.nodes)]


def _check_same_structure(tape: Tape, ref_tape: Tape):
    if len(tape.nodes) != len(ref_tape.nodes):
        raise ContractError(f"tapes differ in length: {len(tape.nodes)} vs {len(ref_tape.nodes)}")
    for i, (a, r) in enumerate(zip(tape.nodes, ref_tape.nodes)):
        if a.kind != r.kind or a.inputs != r.inputs or a.value.shape != r.value.shape:
            raise ContractError(f"tapes diverge at node {i}: {a.kind}{a.value.shape} vs {r.kind}{r.value.shape}")
        if a.kind in ("index_select", "scale") and not np.array_equal(a.saved, r.saved):
            raise ContractError(f"tapes diverge at node {i}: different {a.kind} payload")


def deeplift_backward(tape: Tape, ref_tape: Tape, output) -> dict[int, np.ndarray]:
    """DeepLIFT (Rescale) multipliers of a scalar output with respect to each leaf.

    ``tape`` and ``ref_tape`` must record the same computation on the actual
    and reference inputs. Attributions are ``m * (leaf - leaf_ref)``.

    Rules: elementwise nonlinearities use delta_out / delta_in (local
    derivative when |delta_in| < 1e-7); linear ops use their gradient;
    products use the average of actual and reference co-operands, which is
    exact for differences; softmax, log-softmax and cosine use their local
    Jacobian at the midpoint of the actual and reference inputs.
    """
    _check_same_structure(tape, ref_tape)
    out_id = output.id if isinstance(output, Var) else int(output)
    nodes, rnodes = tape.nodes, ref_tape.nodes
    grads: list = [None] * len(nodes)
    grads[out_id] = _seed(tape, out_id)
    for i in range(out_id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.kind == "leaf":
            continue
        op = OPS[node.kind]
        vals = [nodes[j].value for j in node.inputs]
        if op.dl_kind == "linear":
            local = op.backward(node, g, vals)
        elif op.dl_kind == "fallback":
            mid = [(a + rnodes[j].value) * 0.5 for a, j in zip(vals, node.inputs)]
            value, saved = op.forward(mid, node.saved)
            local = op.backward(Node(node.kind, node.inputs, value, saved), g, mid)
        elif op.dl_kind == "rescale":
            ref = rnodes[i]
            x, x_ref = vals[0], rnodes[node.inputs[0]].value
            local = (g * _rescale(x, x_ref, node.value, ref.value, _local_derivative(node.kind, node, x)),)
        elif op.dl_kind == "bilinear":
            rvals = [rnodes[j].value for j in node.inputs]
            avg = [(a + r) * 0.5 for a, r in zip(vals, rvals)]
            local = op.backward(node, g, avg)
        else:
            rvals = [rnodes[j].value for j in node.inputs]
            local = op.deeplift(node, rnodes[i], g, vals, rvals)
        for j, gj in zip(node.inputs, local):
            grads[j] = gj if grads[j] is None else grads[j] + gj
    return _finish(tape, grads)

