"""Reverse-mode automatic differentiation over dense numpy tensors.

A Graph records a topologically ordered list of op nodes as the caller
builds it; values are computed eagerly, so after construction the graph
holds a full forward evaluation. `forward` replays the recorded graph
with new leaf bindings, `backward` accumulates gradients for every
parameter leaf, `adam_step` applies the optimizer, and `grad_check`
compares analytic gradients against 64-bit central differences.

The op vocabulary is a fixed registry (no closures on the tape), which
keeps replay, 64-bit re-evaluation and testing straightforward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError


class Tensor:
    """Dense float array plus a gradient flag.

    Training arithmetic is 32-bit; grad_check builds 64-bit graphs and
    upcasts leaf data at binding time.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def copy(self):
        return Tensor(self.data.copy(), self.requires_grad, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("id", "op", "inputs", "attrs", "value", "name", "needs_grad", "aux")

    def __init__(self, id, op, inputs, attrs, value, name=None, needs_grad=False):
        self.id = id
        self.op = op
        self.inputs = inputs      # ids of predecessor nodes
        self.attrs = attrs        # constant op metadata (never differentiated)
        self.value = value
        self.name = name          # leaf binding name (inputs and params)
        self.needs_grad = needs_grad
        self.aux = None           # forward-pass cache some backward rules reuse

    @property
    def shape(self):
        return self.value.shape


# --- op registry ------------------------------------------------------------
#
# forward(graph, node, xs) -> ndarray            (xs: input values)
# backward(node, xs, g) -> list of grads aligned with node.inputs (None = skip)

_OPS = {}


def _op(name):
    def deco(cls):
        _OPS[name] = cls
        return cls
    return deco


def _sum_to_shape(g, shape):
    """Collapse leading broadcast axes so g matches `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@_op("add")
class _Add:
    @staticmethod
    def forward(node, xs):
        a, b = xs
        if a.shape != b.shape and b.shape != a.shape[-1:]:
            raise ConfigError(
                f"node {node.id} (add): shapes {a.shape} and {b.shape} are neither "
                "equal nor row-bias compatible")
        return a + b

    @staticmethod
    def backward(node, xs, g):
        a, b = xs
        return [g, _sum_to_shape(g, b.shape)]


@_op("mul")
class _Mul:
    @staticmethod
    def forward(node, xs):
        a, b = xs
        if a.shape != b.shape:
            raise ConfigError(f"node {node.id} (mul): shapes {a.shape} != {b.shape}")
        return a * b

    @staticmethod
    def backward(node, xs, g):
        a, b = xs
        return [g * b, g * a]


@_op("matmul")
class _MatMul:
    @staticmethod
    def forward(node, xs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ConfigError(
                f"node {node.id} (matmul): incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    @staticmethod
    def backward(node, xs, g):
        a, b = xs
        ga = _sum_to_shape(g @ b.swapaxes(-1, -2), a.shape)
        gb = _sum_to_shape(a.swapaxes(-1, -2) @ g, b.shape)
        return [ga, gb]


@_op("transpose")
class _Transpose:
    @staticmethod
    def forward(node, xs):
        return np.transpose(xs[0], node.attrs["perm"])

    @staticmethod
    def backward(node, xs, g):
        return [np.transpose(g, np.argsort(node.attrs["perm"]))]


@_op("reshape")
class _Reshape:
    @staticmethod
    def forward(node, xs):
        return xs[0].reshape(node.attrs["shape"])

    @staticmethod
    def backward(node, xs, g):
        return [g.reshape(xs[0].shape)]


@_op("concat")
class _Concat:
    @staticmethod
    def forward(node, xs):
        return np.concatenate(xs, axis=node.attrs["axis"])

    @staticmethod
    def backward(node, xs, g):
        axis = node.attrs["axis"]
        sizes = [x.shape[axis] for x in xs]
        return np.split(g, np.cumsum(sizes)[:-1], axis=axis)


@_op("slice")
class _Slice:
    @staticmethod
    def forward(node, xs):
        return xs[0][node.attrs["slices"]]

    @staticmethod
    def backward(node, xs, g):
        out = np.zeros_like(xs[0])
        out[node.attrs["slices"]] = g
        return [out]


@_op("embedding")
class _Embedding:
    @staticmethod
    def forward(node, xs):
        table = xs[0]
        ids = node.attrs["ids"]
        if ids.min() < 0 or ids.max() >= table.shape[0]:
            raise ContractError(
                f"node {node.id} (embedding): token id out of range 0..{table.shape[0] - 1}")
        return table[ids]

    @staticmethod
    def backward(node, xs, g):
        out = np.zeros_like(xs[0])
        np.add.at(out, node.attrs["ids"], g)
        return [out]


@_op("relu")
class _Relu:
    @staticmethod
    def forward(node, xs):
        return np.maximum(xs[0], 0)

    @staticmethod
    def backward(node, xs, g):
        return [g * (xs[0] > 0)]


@_op("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(node, xs):
        return _stable_sigmoid(xs[0])

    @staticmethod
    def backward(node, xs, g):
        y = node.value
        return [g * y * (1.0 - y)]


@_op("tanh")
class _Tanh:
    @staticmethod
    def forward(node, xs):
        return np.tanh(xs[0])

    @staticmethod
    def backward(node, xs, g):
        y = node.value
        return [g * (1.0 - y * y)]


@_op("softmax")
class _Softmax:
    # over the last axis only
    @staticmethod
    def forward(node, xs):
        x = xs[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @staticmethod
    def backward(node, xs, g):
        y = node.value
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


@_op("layer_norm")
class _LayerNorm:
    @staticmethod
    def forward(node, xs):
        x, gain, bias = xs
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise ConfigError(
                f"node {node.id} (layer_norm): gain/bias must match last axis {x.shape[-1]}")
        eps = node.attrs.get("eps", 1e-5)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        node.aux = (xhat, inv)
        return xhat * gain + bias

    @staticmethod
    def backward(node, xs, g):
        x, gain, bias = xs
        xhat, inv = node.aux
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return [dx, dgain, dbias]


@_op("dropout")
class _Dropout:
    # mask is a constant array of {0, 1/keep} supplied by the trainer RNG
    @staticmethod
    def forward(node, xs):
        mask = node.attrs["mask"]
        if mask.shape != xs[0].shape:
            raise ConfigError(f"node {node.id} (dropout): mask shape {mask.shape} != {xs[0].shape}")
        return xs[0] * mask

    @staticmethod
    def backward(node, xs, g):
        return [g * node.attrs["mask"]]


@_op("masked_fill")
class _MaskedFill:
    @staticmethod
    def forward(node, xs):
        mask = node.attrs["mask"]
        if mask.shape != xs[0].shape:
            raise ConfigError(f"node {node.id} (masked_fill): mask shape {mask.shape} != {xs[0].shape}")
        return np.where(mask, np.asarray(node.attrs["value"], dtype=xs[0].dtype), xs[0])

    @staticmethod
    def backward(node, xs, g):
        return [np.where(node.attrs["mask"], 0.0, g)]


@_op("scale")
class _Scale:
    @staticmethod
    def forward(node, xs):
        return xs[0] * node.attrs["factor"]

    @staticmethod
    def backward(node, xs, g):
        return [g * node.attrs["factor"]]


@_op("sum")
class _Sum:
    @staticmethod
    def forward(node, xs):
        return np.asarray(xs[0].sum(), dtype=xs[0].dtype)

    @staticmethod
    def backward(node, xs, g):
        return [np.full_like(xs[0], g)]


@_op("l1_loss")
class _L1Loss:
    @staticmethod
    def forward(node, xs):
        pred, tgt = xs
        if pred.shape != tgt.shape:
            raise ContractError(f"node {node.id} (l1_loss): shapes {pred.shape} != {tgt.shape}")
        w = node.attrs.get("weight")
        if w is None:
            node.aux = float(pred.size)
            return np.asarray(np.abs(pred - tgt).mean(), dtype=pred.dtype)
        node.aux = float(w.sum())
        return np.asarray((w * np.abs(pred - tgt)).sum() / node.aux, dtype=pred.dtype)

    @staticmethod
    def backward(node, xs, g):
        pred, tgt = xs
        w = node.attrs.get("weight")
        s = np.sign(pred - tgt) * (g / node.aux)
        if w is not None:
            s = s * w
        return [s, -s]


@_op("bce_logits")
class _BceLogits:
    # binary cross-entropy with logits, numerically stable form
    @staticmethod
    def forward(node, xs):
        z, y = xs
        if z.shape != y.shape:
            raise ContractError(f"node {node.id} (bce_logits): shapes {z.shape} != {y.shape}")
        w = node.attrs.get("weight")
        loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        if w is None:
            node.aux = float(z.size)
            return np.asarray(loss.mean(), dtype=z.dtype)
        node.aux = float(w.sum())
        return np.asarray((w * loss).sum() / node.aux, dtype=z.dtype)

    @staticmethod
    def backward(node, xs, g):
        z, y = xs
        w = node.attrs.get("weight")
        gz = (_stable_sigmoid(z) - y) * (g / node.aux)
        gy = -z * (g / node.aux)
        if w is not None:
            gz = gz * w
            gy = gy * w
        return [gz, gy]


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- graph ------------------------------------------------------------------

class Graph:
    """Topologically ordered op records plus named leaf tensors.

    Values are computed eagerly as nodes are recorded; `replay` (via the
    module-level `forward`) re-evaluates the same records with new leaf
    bindings. Single-threaded per instance.
    """

    def __init__(self, dtype=np.float32, check_finite=False):
        self.dtype = dtype
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}
        self.input_names: dict[str, int] = {}
        self.outputs: dict[str, int] = {}

    # leaves ---------------------------------------------------------------

    def input(self, name, value):
        node = self._leaf(value, name=name)
        self.input_names[name] = node.id
        return node

    def constant(self, value):
        return self._leaf(value)

    def param(self, name, tensor: Tensor):
        if name in self.params and self.params[name] is not tensor:
            raise ConfigError(f"parameter name reused with a different tensor: {name}")
        self.params[name] = tensor
        node = self._leaf(tensor.data, name=name, needs_grad=tensor.requires_grad)
        return node

    def _leaf(self, value, name=None, needs_grad=False):
        arr = np.asarray(value, dtype=self.dtype)
        node = Node(len(self.nodes), "leaf", (), {}, arr, name=name, needs_grad=needs_grad)
        self.nodes.append(node)
        return node

    # op recording -----------------------------------------------------------

    def _apply(self, op, inputs, **attrs):
        xs = [n.value for n in inputs]
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), attrs, None,
                    needs_grad=any(n.needs_grad for n in inputs))
        node.value = _OPS[op].forward(node, xs)
        if self.check_finite and not np.isfinite(node.value).all():
            raise NumericError(f"node {node.id} ({op}): non-finite output")
        self.nodes.append(node)
        return node

    def add(self, a, b):
        return self._apply("add", [a, b])

    def mul(self, a, b):
        return self._apply("mul", [a, b])

    def matmul(self, a, b):
        return self._apply("matmul", [a, b])

    def transpose(self, x, perm):
        return self._apply("transpose", [x], perm=tuple(perm))

    def reshape(self, x, shape):
        return self._apply("reshape", [x], shape=tuple(shape))

    def concat(self, xs, axis):
        return self._apply("concat", list(xs), axis=axis)

    def slice(self, x, slices):
        return self._apply("slice", [x], slices=tuple(slices))

    def embedding(self, table, ids):
        return self._apply("embedding", [table], ids=np.asarray(ids, dtype=np.int64))

    def relu(self, x):
        return self._apply("relu", [x])

    def sigmoid(self, x):
        return self._apply("sigmoid", [x])

    def tanh(self, x):
        return self._apply("tanh", [x])

    def softmax(self, x):
        return self._apply("softmax", [x])

    def layer_norm(self, x, gain, bias, eps=1e-5):
        return self._apply("layer_norm", [x, gain, bias], eps=eps)

    def dropout(self, x, mask):
        return self._apply("dropout", [x], mask=np.asarray(mask, dtype=self.dtype))

    def masked_fill(self, x, mask, value):
        return self._apply("masked_fill", [x], mask=np.asarray(mask, dtype=bool), value=value)

    def scale(self, x, factor):
        return self._apply("scale", [x], factor=float(factor))

    def sum(self, x):
        return self._apply("sum", [x])

    def l1_loss(self, pred, target, weight=None):
        w = None if weight is None else np.asarray(weight, dtype=self.dtype)
        return self._apply("l1_loss", [pred, target], weight=w)

    def bce_logits(self, logits, labels, weight=None):
        w = None if weight is None else np.asarray(weight, dtype=self.dtype)
        return self._apply("bce_logits", [logits, labels], weight=w)

    def output(self, name, node):
        self.outputs[name] = node.id
        return node

    # evaluation ---------------------------------------------------------------

    def replay(self, bindings=None):
        """Recompute every node in order with optional new leaf values.

        `bindings` maps leaf names (inputs or parameters) to arrays. Values
        are cast to the graph dtype. Output nodes are checked finite.
        """
        bindings = bindings or {}
        bound = set()
        for node in self.nodes:
            if node.op == "leaf":
                if node.name is not None and node.name in bindings:
                    arr = np.asarray(bindings[node.name], dtype=self.dtype)
                    if arr.shape != node.value.shape:
                        raise ConfigError(
                            f"binding {node.name}: shape {arr.shape} != {node.value.shape}")
                    node.value = arr
                    bound.add(node.name)
            else:
                xs = [self.nodes[i].value for i in node.inputs]
                node.value = _OPS[node.op].forward(node, xs)
                if self.check_finite and not np.isfinite(node.value).all():
                    raise NumericError(f"node {node.id} ({node.op}): non-finite output")
        unknown = set(bindings) - bound
        if unknown:
            raise ConfigError(f"unknown leaf bindings: {sorted(unknown)}")
        for name, nid in self.outputs.items():
            if not np.isfinite(self.nodes[nid].value).all():
                raise NumericError(f"output {name}: non-finite values")
        return {name: self.nodes[nid].value for name, nid in self.outputs.items()}


def forward(graph: Graph, named_inputs=None):
    """Evaluate the graph with the given leaf bindings, returning named outputs."""
    return graph.replay(named_inputs)


def backward(graph: Graph, loss_node: Node):
    """Gradient of a scalar loss w.r.t. every requires-grad parameter leaf.

    Parameters not on a path to the loss get zero gradients. Gradients of
    a parameter bound at several leaves (weight reuse) accumulate.
    """
    if loss_node.value.shape != ():
        raise ContractError(f"loss node {loss_node.id} is not a scalar: shape {loss_node.value.shape}")
    grads_by_id: dict[int, np.ndarray] = {loss_node.id: np.asarray(1.0, dtype=graph.dtype)}
    for node in reversed(graph.nodes[: loss_node.id + 1]):
        if node.op == "leaf" or not node.needs_grad:
            continue
        g = grads_by_id.pop(node.id, None)
        if g is None:
            continue
        xs = [graph.nodes[i].value for i in node.inputs]
        in_grads = _OPS[node.op].backward(node, xs, g)
        for nid, ig in zip(node.inputs, in_grads):
            if ig is None or not graph.nodes[nid].needs_grad:
                continue
            if nid in grads_by_id:
                grads_by_id[nid] += ig
            else:
                grads_by_id[nid] = ig

    out = {name: np.zeros_like(t.data, dtype=graph.dtype)
           for name, t in graph.params.items() if t.requires_grad}
    for node in graph.nodes:
        if node.op == "leaf" and node.name in out and node.id in grads_by_id:
            out[node.name] += grads_by_id[node.id]
    return out


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moment accumulators plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place. Increments state.t by one."""
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ContractError(f"param/grad key mismatch: {sorted(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads[name].astype(tensor.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# --- gradient checking ----------------------------------------------------------

def grad_check(function_spec, point: dict, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    `function_spec(graph, leaves)` must build a scalar loss from the
    supported ops, where `leaves` maps each name in `point` to a parameter
    node. The check runs in 64-bit regardless of training dtype.
    """
    if not (1e-5 <= h <= 1e-2):
        raise ContractError(f"h={h} outside [1e-5, 1e-2]")
    graph = Graph(dtype=np.float64, check_finite=True)
    leaves = {name: graph.param(name, Tensor(val, requires_grad=True, dtype=np.float64))
              for name, val in point.items()}
    loss = function_spec(graph, leaves)
    graph.output("loss", loss)
    analytic = backward(graph, loss)

    max_rel = 0.0
    for name, val in point.items():
        base = np.asarray(val, dtype=np.float64)
        flat = base.reshape(-1).copy()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = graph.replay({name: flat.reshape(base.shape)})["loss"]
            flat[i] = orig - h
            fm = graph.replay({name: flat.reshape(base.shape)})["loss"]
            flat[i] = orig
            numeric = (float(fp) - float(fm)) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a))
            max_rel = max(max_rel, rel)
        graph.replay({name: base})
    return max_rel
