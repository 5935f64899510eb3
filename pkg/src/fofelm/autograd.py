"""Minimal define-by-run reverse-mode autodiff over dense 2-D float64 arrays."""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import DimensionError, NumericalError

_DEBUG = False
_GRAD_ENABLED = True


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise NumericalError whenever an op produces a non-finite value."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph construction; forward values are unchanged."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value in {name or 'tensor'}")
        arr.flags.writeable = True
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.shape != (1, 1):
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones((1, 1))
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __getitem__(self, idx) -> "Tensor":
        return take(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    t = Tensor.__new__(Tensor)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericalError("op produced a non-finite value")
    t.data, t.grad, t.name = data, None, None
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        t.requires_grad, t._parents, t._backward = False, (), None
    else:
        t.requires_grad, t._parents, t._backward = True, tuple(parents), backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a (1, c) or (r, 1) operand broadcasts."""
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def take(a: Tensor, idx) -> Tensor:
    """Basic or fancy indexing that keeps the result 2-D."""
    out = np.asarray(a.data[idx], dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError("indexing must preserve 2-D shape; use slices")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def total(x: Tensor) -> Tensor:
    return _result(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(x.shape, g[0, 0]),))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-probability of ``target`` under row-wise softmax."""
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    rows, cols = logits.shape
    if target.shape[0] != rows:
        raise DimensionError(f"{rows} logit rows but {target.shape[0]} targets")
    if target.size and (target.min() < 0 or target.max() >= cols):
        raise IndexError(f"target id out of range [0, {cols})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp_target = z[np.arange(rows), target] - np.log(s[:, 0])
    loss = -logp_target.mean()

    def backward(g):
        grad = e / s
        grad[np.arange(rows), target] -= 1.0
        return (grad * (g[0, 0] / rows),)

    return _result(np.array([[loss]]), (logits,), backward)


def sparse_rows(table: Tensor, rows: np.ndarray, cols: np.ndarray, weights: np.ndarray,
                n_rows: int) -> Tensor:
    """out[r] = sum of weights[j] * table[cols[j]] over entries j with rows[j] == r.

    Equivalent to a dense (n_rows x table.rows) coefficient matrix times ``table``
    without materializing it.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if cols.size and (cols.min() < 0 or cols.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    coef = sparse.csr_matrix((weights, (rows, cols)), shape=(n_rows, table.shape[0]))
    out = np.asarray(coef @ table.data)

    def backward(g):
        return (np.asarray(coef.T @ g),)

    return _result(out, (table,), backward)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt shape mismatch: {a.shape} @ {b.shape}^T")

    def backward(g):
        return (g @ b.data if a.requires_grad else None,
                g.T @ a.data if b.requires_grad else None)

    return _result(a.data @ b.data.T, (a, b), backward)


@dataclass
class ParamGroup:
    """Named set of parameters that freeze and update together.

    ``role`` classifies the group (shared, subnet, head, adapter, ...);
    ``dialect``/``application`` are None when the group serves every key.
    """

    name: str
    tensors: list[Tensor]
    trainable: bool = True
    role: str = "shared"
    dialect: str | None = None
    application: str | None = None

    def set_trainable(self, flag: bool) -> None:
        # frozen tensors drop out of the graph, so their accumulators stay zero
        self.trainable = flag
        for t in self.tensors:
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data)

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors)


class SGD:
    def __init__(self, lr: float = 0.1):
        self.lr = lr

    def step(self, groups: Iterable[ParamGroup]) -> None:
        for group in groups:
            if not group.trainable:
                continue
            for t in group.tensors:
                if t.grad is not None:
                    t.data -= self.lr * t.grad
                    t.grad[...] = 0.0

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Bias-corrected Adam with a per-tensor step count.

    Tensors skipped in a step (inactive sub-networks) keep their moments and
    step count untouched, so routed updates behave like independent runs.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t: dict[str, int] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, groups: Iterable[ParamGroup]) -> None:
        for group in groups:
            if not group.trainable:
                continue
            for t in group.tensors:
                if t.grad is None:
                    continue
                key = t.name
                step = self.t[key] = self.t.get(key, 0) + 1
                m = self.m.setdefault(key, np.zeros_like(t.data))
                v = self.v.setdefault(key, np.zeros_like(t.data))
                m *= self.beta1
                m += (1.0 - self.beta1) * t.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * t.grad * t.grad
                m_hat = m / (1.0 - self.beta1 ** step)
                v_hat = v / (1.0 - self.beta2 ** step)
                t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                t.grad[...] = 0.0

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {}
        for k in sorted(self.m):
            state[f"adam.t.{k}"] = np.array([[float(self.t[k])]])
            state[f"adam.m.{k}"] = self.m[k]
            state[f"adam.v.{k}"] = self.v[k]
        return state

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        def pick(prefix):
            return {k[len(prefix):]: v.copy() for k, v in state.items() if k.startswith(prefix)}
        self.t = {k: int(v[0, 0]) for k, v in pick("adam.t.").items()}
        self.m = pick("adam.m.")
        self.v = pick("adam.v.")


def make_optimizer(name: str, **hyper):
    name = name.lower()
    if name == "sgd":
        return SGD(lr=hyper.get("lr", 0.1))
    if name == "adam":
        return Adam(**{k: v for k, v in hyper.items() if k in ("lr", "beta1", "beta2", "eps")})
    from .errors import ConfigError
    raise ConfigError(f"unknown optimizer {name!r}")


# tensor container: magic, u64 manifest length, JSON manifest, float64 LE payloads
MAGIC = b"FOFETNSR"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    from .errors import DataError
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a tensor container")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen].decode())
    base = 16 + mlen
    out = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        out[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out, manifest["meta"]


def tensor_bytes(tensors: Iterable[Tensor]) -> bytes:
    return b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in tensors)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    @property
    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]
