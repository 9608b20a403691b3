"""Small reverse-mode autodiff over numpy float64 arrays.

Each kernel returns a ``Tensor`` that remembers its inputs and a closure
propagating the upstream gradient to them. ``Tensor.backward`` walks the
tape in reverse topological order.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

CHECKPOINT_FORMAT = "narpath-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, parents=(a, b), backward=backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes {a.shape} + {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out, parents=(a, b), backward=backward)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting (a scalar tensor scales a matrix)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shapes {a.shape} * {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out, parents=(a, b), backward=backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * c)

    return Tensor(a.data * c, parents=(a,), backward=backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), backward=backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return Tensor(out, parents=(a,), backward=backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.T)

    return Tensor(a.data.T, parents=(a,), backward=backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        a._accumulate(g.reshape(src))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=backward)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax; ``mask`` is a constant added to the scores (use a large negative to block)."""
    a = as_tensor(a)
    x = a.data if mask is None else a.data + mask
    out = _softmax(x)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Tensor(out, parents=(a,), backward=backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under row ``logits``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shapes {logits.shape} vs targets {targets.shape}")
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(logsum - z[rows, targets]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1.0
        logits._accumulate(p * (g / m))

    return Tensor(loss, parents=(logits,), backward=backward)


def embedding(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accumulate(gt)

    return Tensor(table.data[idx], parents=(table,), backward=backward)


def conv2d(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Valid (unpadded) 2-D convolution, ``x`` (B, C, H, W), ``weight`` (O, C, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} * {weight.shape}")
    o, c, k, k2 = weight.shape
    if k != k2 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"conv2d kernel {weight.shape} does not fit input {x.shape}")
    b, _, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, ho, wo, c, k, k)
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            x._accumulate(gx)

    return Tensor(np.ascontiguousarray(out), parents=parents, backward=backward)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- parameters


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named parameter arrays plus Adam moment estimates."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore(self.params)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step_count = self.step_count
        return out

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())


def optimizer_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One Adam update with bias correction, in place. Parameters without a gradient are left alone."""
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {store.params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps named tensors to a scalar tensor. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_coords`` samples that many
    coordinates per parameter instead of all of them.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    out = fn(tensors)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()
    rng = np.random.default_rng(seed)

    def value(name, flat_index, delta):
        arr = base[name].copy()
        arr.reshape(-1)[flat_index] += delta
        feed = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        y = fn(feed).data.item()
        if not math.isfinite(y):
            raise NumericError(f"non-finite value perturbing {name}[{flat_index}]")
        return y

    worst = 0.0
    for name, arr in base.items():
        analytic = tensors[name].grad
        analytic = np.zeros_like(arr) if analytic is None else analytic
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            idx = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for i in idx:
            numeric = (value(name, i, eps) - value(name, i, -eps)) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, store: ParamStore | Mapping[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    params = store.params if isinstance(store, ParamStore) else store
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "params": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
            for name, arr in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path, kind: str | None = None) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    store = ParamStore()
    for name, entry in doc["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != math.prod(shape):
            raise ValueError(f"{path}: parameter {name} has {values.size} values for shape {shape}")
        store.add(name, values.reshape(shape))
    return store, doc.get("meta", {})
