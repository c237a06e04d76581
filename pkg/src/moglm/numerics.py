"""Dense tensor algebra, seeded randomness and reverse-mode differentiation.

Everything trainable in this package runs on the small op set below: affine
maps, five elementwise primitives, embedding lookup and a fused softmax
cross-entropy. Each op validates shapes and finiteness, then (when a tape is
active and an operand requires gradients) records a closure that computes
vector-Jacobian products. ``Tape.backward`` replays the recording in exact
reverse order and sums gradient contributions, so a parameter used at every
time step of an unrolled window accumulates one gradient per use.

Arrays are numpy, row-major, float32 or float64. Ops never mix precisions
and never broadcast beyond the single documented pattern (a bias row added
to every row of a batch). Outputs of ops are treated as immutable; only leaf
tensors (parameters) are ever written in place, and only by the optimizer or
the finite-difference checker between tapes.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, UsageError

DTYPES = {"32": np.float32, "64": np.float64}

# Open-interval bounds for sigmoid/tanh outputs, per dtype. Saturated
# activations are clipped to the largest representable value strictly inside
# the interval so downstream strict-sign/range invariants hold.
_SIG_HI = {np.dtype(np.float32): np.nextafter(np.float32(1), np.float32(0)),
           np.dtype(np.float64): np.nextafter(np.float64(1), np.float64(0))}
_TANH_HI = _SIG_HI


class Tensor:
    """Dense 0/1/2-d real array. ``requires_grad`` marks tape participation."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-d, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor that collects gradients."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    """Leaf tensor outside differentiation (inputs, dropout masks, carried state)."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape


_ACTIVE_TAPES: list["Tape"] = []


class Gradients:
    """Gradient map produced by ``backward``, keyed by tensor identity."""

    def __init__(self, by_id: dict[int, np.ndarray], refs: list[Tensor]):
        self._by_id = by_id
        self._refs = refs  # keeps id() keys stable

    def get(self, t: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. ``t`` (zeros if ``t`` was never used)."""
        g = self._by_id.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id


class Tape:
    """Ordered record of ops; replayed strictly backward by ``backward``."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: Callable) -> None:
        self._nodes.append((output, inputs, backward_fn))

    def backward(self, loss: Tensor, seed: float = 1.0) -> Gradients:
        """Accumulated ``d(seed * loss)/d(leaf)`` for every leaf on the tape."""
        if not self._nodes:
            raise UsageError("backward on an empty tape")
        if loss.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            id(loss): np.full_like(loss.data, seed)
        }
        refs: list[Tensor] = [loss]
        for out, inputs, backward_fn in reversed(self._nodes):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                if acc is None:
                    grads[id(inp)] = g_in
                    refs.append(inp)
                else:
                    acc += g_in
        return Gradients(grads, refs)


def backward(tape: Tape, loss: Tensor, seed: float = 1.0) -> Gradients:
    return tape.backward(loss, seed)


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by '{op}'")


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise NumericError(f"'{op}' mixes precisions {dt} and {t.dtype}")


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    _check_finite(out_data, op)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Primitive ops


def affine(w: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """``W x + b`` for a vector x, or row-batched ``x W^T + b`` for a matrix x.

    ``w`` is (m, n). A 1-d ``x`` of length n gives a length-m vector; a 2-d
    ``x`` of shape (B, n) gives (B, m) with the bias row added to every row.
    """
    if w.ndim != 2:
        raise DimensionError(f"affine weight must be 2-d, got {w.shape}")
    m, n = w.shape
    if x.ndim == 1:
        if x.shape[0] != n:
            raise DimensionError(f"affine: weight {w.shape} incompatible with input {x.shape}")
    elif x.ndim == 2:
        if x.shape[1] != n:
            raise DimensionError(f"affine: weight {w.shape} incompatible with input {x.shape}")
    else:
        raise DimensionError(f"affine input must be 1-d or 2-d, got {x.shape}")
    if b is not None:
        if b.shape != (m,):
            raise DimensionError(f"affine bias {b.shape} must be ({m},)")
        _check_dtypes("affine", w, x, b)
    else:
        _check_dtypes("affine", w, x)
    # Weights are kept finite by the optimizer's post-update check, so only
    # the activation operand is scanned here; the output scan in _emit catches
    # anything that slips through.
    _check_finite(x.data, "affine(input)")

    if x.ndim == 1:
        out = w.data @ x.data
        if b is not None:
            out = out + b.data

        def bwd_vec(g):
            gw = np.outer(g, x.data)
            gx = w.data.T @ g
            gb = g if b is not None else None
            return gw, gx, gb

        return _emit("affine", (w, x) if b is None else (w, x, b), out,
                     (lambda g: bwd_vec(g)[:2]) if b is None else bwd_vec)

    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bwd_mat(g):
        gw = g.T @ x.data
        gx = g @ w.data
        gb = g.sum(axis=0) if b is not None else None
        return gw, gx, gb

    return _emit("affine", (w, x) if b is None else (w, x, b), out,
                 (lambda g: bwd_mat(g)[:2]) if b is None else bwd_mat)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain matrix product for 2-d operands (used to compose factored gates)."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _check_dtypes("matmul", a, b)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, bwd)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"'{op}' operand shapes differ: {a.shape} vs {b.shape}")
    _check_dtypes(op, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    return _emit("hadamard", (a, b), a.data * b.data,
                 lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * a.dtype.type(s), lambda g: (g * a.dtype.type(s),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic sigmoid, clipped strictly inside (0, 1)."""
    d = x.data
    ez = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(d.dtype, copy=False)
    np.clip(out, np.finfo(d.dtype).tiny, _SIG_HI[d.dtype], out=out)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent, clipped strictly inside (-1, 1)."""
    out = np.tanh(x.data)
    hi = _TANH_HI[x.dtype]
    np.clip(out, -hi, hi, out=out)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (x,), out, bwd)


_ELEMENTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_ELEMENTWISE_BINARY = {"hadamard": hadamard, "add": add}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: sigmoid/tanh (unary), hadamard/add (binary), scale."""
    if op in _ELEMENTWISE_UNARY:
        (x,) = operands
        return _ELEMENTWISE_UNARY[op](x)
    if op in _ELEMENTWISE_BINARY:
        a, b = operands
        return _ELEMENTWISE_BINARY[op](a, b)
    if op == "scale":
        a, s = operands
        return scale(a, s)
    raise UsageError(f"unknown elementwise op '{op}'")


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(x.data, g),)

    return _emit("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def bwd(g):
        return (np.full_like(x.data, g / n),)

    return _emit("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-d, got {ids.shape}")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"token id out of range [0, {table.shape[0]}): {int(ids.min())}..{int(ids.max())}")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding_lookup", (table,), table.data[ids], bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean cross-entropy in nats of ``softmax(logits / temperature)`` vs targets.

    ``logits`` is (B, V), ``targets`` a length-B id vector.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got {logits.shape}")
    targets = np.asarray(targets)
    nrows, vocab = logits.shape
    if targets.shape != (nrows,):
        raise DimensionError(f"targets {targets.shape} must be ({nrows},)")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise DataError(f"target id out of range [0, {vocab})")

    z = logits.data / logits.dtype.type(temperature)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(nrows)
    log_p = (z[rows, targets] - zmax[:, 0]) - np.log(denom[:, 0])
    out = np.asarray(-log_p.mean(), dtype=logits.dtype)

    def bwd(g):
        grad = ez / denom
        grad[rows, targets] -= 1.0
        grad *= g / (nrows * temperature)
        return (grad.astype(logits.dtype, copy=False),)

    return _emit("cross_entropy", (logits,), out, bwd)


def log_probs(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise log-softmax of a raw (B, V) array. Not differentiated."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = logits / temperature
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    return (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Parameters


class ParameterSet:
    """Ordered, named registry of trainable tensors."""

    def __init__(self):
        self._order: list[str] = []
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._tensors:
            raise UsageError(f"duplicate parameter name '{name}'")
        t.requires_grad = True
        self._order.append(name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._order)

    def names(self) -> list[str]:
        return list(self._order)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self._order:
            yield name, self._tensors[name]

    def total_size(self) -> int:
        return sum(t.size for _, t in self.items())

    def grads(self, g: Gradients) -> dict[str, np.ndarray]:
        """One accumulated gradient array per parameter (zeros if unused)."""
        return {name: g.get(t) for name, t in self.items()}

    def clone(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        return out

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.items():
            src = values[name]
            if src.shape != t.shape:
                raise DimensionError(f"parameter '{name}': expected {t.shape}, got {src.shape}")
            t.data[...] = src


# ---------------------------------------------------------------------------
# Randomness


class Rng:
    """Philox-keyed generator with named, independently-seeded substreams.

    The substream key is a BLAKE2b digest of the root seed and the path of
    labels, so draws in one component (say dropout) never shift draws in
    another (initialization, data order), and identical seeds reproduce
    identical sequences on any platform.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.blake2b(
            ("%d/%s" % (self.seed, "/".join(self.path))).encode(), digest_size=16
        ).digest()
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(digest, "little")))

    def substream(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def uniform(self, low: float, high: float, shape=None, dtype=np.float64) -> np.ndarray:
        return np.asarray(self._gen.uniform(low, high, size=shape)).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def random(self, shape=None, dtype=np.float64) -> np.ndarray:
        return np.asarray(self._gen.random(size=shape)).astype(dtype, copy=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        st = rng._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        rng._gen.bit_generator.state = st
        return rng


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_difference_check(f: Callable[[ParameterSet], Tensor],
                            params: ParameterSet,
                            step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    Perturbs every coordinate of every parameter; meant for toy sizes in
    64-bit mode. The difference quotient never touches the tape, so the two
    sides are independent.
    """
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_difference_check: non-finite loss")
    if len(tape) == 0:  # f ignores the parameters; analytic gradient is zero
        analytic = {name: np.zeros_like(t.data) for name, t in params.items()}
    else:
        analytic = params.grads(tape.backward(loss))

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(params).item()
            flat[i] = orig - step
            f_minus = f(params).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("finite_difference_check: non-finite perturbed loss")
            cd = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[i] - cd) / max(abs(gflat[i]), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
