"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records a closure that knows how to push
gradients back to its inputs. Calling backward() on a scalar loss
topologically sorts the recorded graph and runs the closures in reverse.

Broadcasting is deliberately narrow: tensor op tensor requires identical
shapes, except add() which also accepts a 1-D bias over the last axis,
and mul()/add() with a plain Python scalar. Anything else is a ShapeError.
Non-finite values (NaN/Inf) raise NumericError the moment they appear.
"""

from __future__ import annotations

import json

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the computation graph: float64 data plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; every overload routes through the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by '{op}'")


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray, op: str) -> None:
    if not t.requires_grad:
        return
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite gradient in backward of '{op}'")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# primitives

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.isscalar(b):
            data = a.data + float(b)

            def back_scalar(g):
                _accum(a, g, "add")

            return _make(data, "add", (a,), back_scalar)
        raise ShapeError(f"add expects Tensor or scalar, got {type(b)}")
    if a.shape == b.shape:
        def back_same(g):
            _accum(a, g, "add")
            _accum(b, g, "add")

        return _make(a.data + b.data, "add", (a, b), back_same)
    # bias case: 1-D vector broadcast over the last axis
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def back_bias(g):
            _accum(a, g, "add")
            _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0), "add")

        return _make(a.data + b.data, "add", (a, b), back_bias)
    raise ShapeError(f"add shapes {a.shape} and {b.shape} (only equal shapes or last-axis bias)")


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g, "neg")

    return _make(-a.data, "neg", (a,), back)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.isscalar(b):
            c = float(b)

            def back_scalar(g):
                _accum(a, g * c, "mul")

            return _make(a.data * c, "mul", (a,), back_scalar)
        raise ShapeError(f"mul expects Tensor or scalar, got {type(b)}")
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} must match")

    def back(g):
        _accum(a, g * b.data, "mul")
        _accum(b, g * a.data, "mul")

    return _make(a.data * b.data, "mul", (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs ndim >= 2 operands")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def back(g):
        _accum(a, g @ b.data.swapaxes(-1, -2), "matmul")
        _accum(b, a.data.swapaxes(-1, -2) @ g, "matmul")

    return _make(a.data @ b.data, "matmul", (a, b), back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy(), "sum")

    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]

    def back(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape) / count, "mean")

    return _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), back)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def back(g):
        _accum(a, g * data, "exp")

    return _make(data, "exp", (a,), back)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def back(g):
        with np.errstate(divide="ignore", over="ignore"):
            ga = g / a.data
        _accum(a, ga, "log")

    return _make(data, "log", (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - data * data), "tanh")

    return _make(data, "tanh", (a,), back)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def back(g):
        _accum(a, g * (a.data > 0.0), "relu")

    return _make(data, "relu", (a,), back)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes through wherever lo <= x <= hi."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def back(g):
        _accum(a, g * inside, "clip")

    return _make(data, "clip", (a,), back)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to mask-true entries.

    Masked entries get exactly zero weight. Every row must keep at least
    one unmasked entry; the causal-attention builder guarantees this by
    always unmasking the diagonal.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise NumericError("masked_softmax row with no unmasked entry")
    neg = np.where(mask, scores.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(scores, (g - inner) * data, "masked_softmax")

    return _make(data, "masked_softmax", (scores,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a (V, D) table; gradient scatter-adds back."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")
    data = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, gt, "embedding")

    return _make(data, "embedding", (table,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must be (last_dim,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead), "layer_norm")
        _accum(bias, g.sum(axis=lead), "layer_norm")
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, dx, "layer_norm")

    return _make(data, "layer_norm", (x, gain, bias), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        _accum(a, g.reshape(a.shape), "reshape")

    return _make(a.data.reshape(shape), "reshape", (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accum(a, g.transpose(inv), "transpose")

    return _make(a.data.transpose(axes), "transpose", (a,), back)


def stack(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack shapes differ: {sorted(shapes)}")

    def back(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis), "stack")

    return _make(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, back)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing only (slices / ints / tuples thereof); no fancy indexing."""
    def back(g):
        ga = np.zeros_like(a.data)
        ga[idx] += g
        _accum(a, ga, "getitem")

    return _make(a.data[idx], "getitem", (a,), back)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; gradients accumulate into .grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack_.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def forward_backward(loss: Tensor, params: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Run backward and collect gradients for the named parameter set.

    Gradient slots are reset first, so the graph/parameter set is
    immediately reusable for the next step.
    """
    zero_grads(params)
    backward(loss)
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return loss.item(), grads


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def parameter(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Trainable leaf. With rng+scale, data is a shape and values are N(0, scale^2)."""
    if rng is not None:
        shape = tuple(data)
        values = rng.normal(0.0, scale, size=shape) if scale else np.zeros(shape)
        return Tensor(values, requires_grad=True)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# parameter checkpointing

_CHECKPOINT_FORMAT = 1


def save_params(path, params: dict[str, Tensor], extra: dict | None = None) -> None:
    """Write parameters as JSON. Python float repr round-trips float64
    bit-exactly, so load(save(p)) == p to the last bit."""
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_params(path) -> tuple[dict[str, Tensor], dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    params = {}
    for name, rec in payload["params"].items():
        arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        params[name] = Tensor(arr, requires_grad=True)
    return params, payload.get("extra", {})
