"""Reverse-mode automatic differentiation on a flat tape of array-valued nodes.

Every loss in this package is a scalar built from numpy arrays through the
operations below.  A ``Tape`` records each operation in execution order
(the order is already topological because the graph is define-by-run), and
``backward`` walks it once in reverse, accumulating adjoints.

All arithmetic is double precision: the gradient checks in the test suite
rely on f64 central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Value",
    "ParamStore",
    "NonFiniteValueError",
    "forward_eval",
    "backward",
    "check_gradients",
    "GradCheckReport",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "relu",
    "reciprocal",
    "absolute",
    "softplus",
    "sigmoid",
    "matmul",
    "vsum",
    "vmean",
    "concat",
    "cumsum",
    "reshape",
    "take",
]


class NonFiniteValueError(RuntimeError):
    """A recorded node produced a NaN or infinity."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of operations, walked backwards for gradients.

    ``nodes[i]`` is ``(op_name, parent_indices, backward_fn)`` where the
    backward closure maps the node adjoint to one adjoint per parent.
    ``check_finite=True`` validates every intermediate (slow; meant for
    tests and gradcheck), otherwise only callers' final values get checked.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None]] = []
        self.outputs: list[int] = []
        self.check_finite = check_finite
        # (node index, offset, size, shape) per parameter leaf, for backward()
        self.param_leaves: list[tuple[int, int, int, tuple[int, ...]]] = []

    def emit(
        self,
        op: str,
        parents: tuple[int, ...],
        data: np.ndarray,
        backward_fn: Callable | None,
    ) -> "Value":
        index = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteValueError(f"non-finite value at node {index} (op '{op}')")
        self.nodes.append((op, parents, backward_fn))
        return Value(data, self, index)

    def leaf(self, data: np.ndarray, name: str = "leaf") -> "Value":
        return self.emit(name, (), data, None)

    def release(self) -> None:
        """Drop node closures (and the arrays they capture)."""
        self.nodes.clear()
        self.outputs.clear()
        self.param_leaves.clear()


class Value:
    """Handle to one tape node; supports numpy-style arithmetic.

    Operands that are plain scalars or ndarrays are treated as constants:
    they join the computation but receive no gradient.
    """

    __slots__ = ("data", "tape", "index")
    # Keep numpy from hijacking `ndarray <op> Value` into an object array.
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape, index: int):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Value(node={self.index}, shape={self.shape})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b, lambda a, b, out: (1.0, 1.0))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b, lambda a, b, out: (1.0, -1.0))

    def __rsub__(self, other):
        return _binary("sub", other, self, lambda a, b: a - b, lambda a, b, out: (1.0, -1.0))

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b, lambda a, b, out: (b, a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            "div",
            self,
            other,
            lambda a, b: a / b,
            lambda a, b, out: (1.0 / b, -out / b),
        )

    def __rtruediv__(self, other):
        return _binary(
            "div",
            other,
            self,
            lambda a, b: a / b,
            lambda a, b, out: (1.0 / b, -out / b),
        )

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda a, out: -1.0)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("Value exponent must be a python number")
        p = float(exponent)
        return _unary("pow", self, lambda a: a**p, lambda a, out: p * a ** (p - 1.0))

    def __getitem__(self, key):
        data = self.data[key]
        shape = self.data.shape

        def backward_fn(grad):
            out = np.zeros(shape)
            np.add.at(out, key, grad)
            return (out,)

        return self.tape.emit("getitem", (self.index,), data, backward_fn)


def _as_data(x) -> np.ndarray:
    if isinstance(x, Value):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unary(op: str, x: Value, fwd: Callable, dfd: Callable) -> Value:
    out = fwd(x.data)

    def backward_fn(grad, _x=x.data, _out=out):
        return (grad * dfd(_x, _out),)

    return x.tape.emit(op, (x.index,), out, backward_fn)


def _binary(op: str, a, b, fwd: Callable, partials: Callable):
    """Elementwise binary op; either operand may be a constant."""
    if isinstance(a, Value) and isinstance(b, Value):
        if a.tape is not b.tape:
            raise ValueError("operands recorded on different tapes")
        out = fwd(a.data, b.data)

        def backward_fn(grad, _a=a.data, _b=b.data, _out=out):
            da, db = partials(_a, _b, _out)
            return (
                _unbroadcast(grad * da, _a.shape),
                _unbroadcast(grad * db, _b.shape),
            )

        return a.tape.emit(op, (a.index, b.index), out, backward_fn)
    if isinstance(a, Value):
        bc = _as_data(b)
        out = fwd(a.data, bc)

        def backward_fn(grad, _a=a.data, _b=bc, _out=out):
            da, _ = partials(_a, _b, _out)
            return (_unbroadcast(grad * da, _a.shape),)

        return a.tape.emit(op, (a.index,), out, backward_fn)
    if isinstance(b, Value):
        ac = _as_data(a)
        out = fwd(ac, b.data)

        def backward_fn(grad, _a=ac, _b=b.data, _out=out):
            _, db = partials(_a, _b, _out)
            return (_unbroadcast(grad * db, _b.shape),)

        return b.tape.emit(op, (b.index,), out, backward_fn)
    return fwd(_as_data(a), _as_data(b))


# -- transcendental / shape ops; all dispatch to numpy on plain arrays ----


def exp(x):
    if not isinstance(x, Value):
        return np.exp(x)
    return _unary("exp", x, np.exp, lambda a, out: out)


def log(x):
    if not isinstance(x, Value):
        return np.log(x)
    return _unary("log", x, np.log, lambda a, out: 1.0 / a)


def sin(x):
    if not isinstance(x, Value):
        return np.sin(x)
    return _unary("sin", x, np.sin, lambda a, out: np.cos(a))


def cos(x):
    if not isinstance(x, Value):
        return np.cos(x)
    return _unary("cos", x, np.cos, lambda a, out: -np.sin(a))


def sqrt(x):
    if not isinstance(x, Value):
        return np.sqrt(x)
    return _unary("sqrt", x, np.sqrt, lambda a, out: 0.5 / out)


def reciprocal(x):
    if not isinstance(x, Value):
        return 1.0 / np.asarray(x, dtype=np.float64)
    return _unary("reciprocal", x, lambda a: 1.0 / a, lambda a, out: -out * out)


def relu(x):
    # Subgradient at 0 is 0.
    if not isinstance(x, Value):
        return np.maximum(x, 0.0)
    return _unary("relu", x, lambda a: np.maximum(a, 0.0), lambda a, out: (a > 0.0).astype(np.float64))


def absolute(x):
    # Subgradient at 0 is 0 (sign(0) = 0).
    if not isinstance(x, Value):
        return np.abs(x)
    return _unary("abs", x, np.abs, lambda a, out: np.sign(a))


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softplus(x):
    if not isinstance(x, Value):
        return _softplus(np.asarray(x, dtype=np.float64))
    return _unary("softplus", x, _softplus, lambda a, out: _sigmoid(a))


def sigmoid(x):
    if not isinstance(x, Value):
        return _sigmoid(np.asarray(x, dtype=np.float64))
    return _unary("sigmoid", x, _sigmoid, lambda a, out: out * (1.0 - out))


def matmul(a, b):
    """2-D matrix product; either side may be a constant array."""
    if not isinstance(a, Value) and not isinstance(b, Value):
        return np.asarray(a) @ np.asarray(b)
    if isinstance(a, Value) and isinstance(b, Value):
        out = a.data @ b.data

        def backward_fn(grad, _a=a.data, _b=b.data):
            return (grad @ _b.T, _a.T @ grad)

        return a.tape.emit("matmul", (a.index, b.index), out, backward_fn)
    if isinstance(a, Value):
        bc = _as_data(b)
        out = a.data @ bc

        def backward_fn(grad, _b=bc):
            return (grad @ _b.T,)

        return a.tape.emit("matmul", (a.index,), out, backward_fn)
    ac = _as_data(a)
    out = ac @ b.data

    def backward_fn(grad, _a=ac):
        return (_a.T @ grad,)

    return b.tape.emit("matmul", (b.index,), out, backward_fn)


def vsum(x, axis=None, keepdims: bool = False):
    if not isinstance(x, Value):
        return np.sum(x, axis=axis, keepdims=keepdims)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def backward_fn(grad, _axis=axis, _keep=keepdims, _shape=shape):
        g = np.asarray(grad)
        if _axis is not None and not _keep:
            g = np.expand_dims(g, _axis)
        return (np.broadcast_to(g, _shape).copy(),)

    return x.tape.emit("sum", (x.index,), out, backward_fn)


def vmean(x, axis=None, keepdims: bool = False):
    if not isinstance(x, Value):
        return np.mean(x, axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return vsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def concat(parts: Sequence, axis: int = 0):
    if not any(isinstance(p, Value) for p in parts):
        return np.concatenate([np.asarray(p) for p in parts], axis=axis)
    tape = next(p.tape for p in parts if isinstance(p, Value))
    vals = [p if isinstance(p, Value) else tape.leaf(_as_data(p), "const") for p in parts]
    out = np.concatenate([v.data for v in vals], axis=axis)
    sizes = [v.data.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(grad, _splits=splits, _axis=axis):
        return tuple(np.array_split(grad, _splits, axis=_axis))

    return tape.emit("concat", tuple(v.index for v in vals), out, backward_fn)


def cumsum(x, axis: int = -1):
    if not isinstance(x, Value):
        return np.cumsum(x, axis=axis)
    out = np.cumsum(x.data, axis=axis)

    def backward_fn(grad, _axis=axis):
        g = np.flip(np.cumsum(np.flip(grad, _axis), axis=_axis), _axis)
        return (g,)

    return x.tape.emit("cumsum", (x.index,), out, backward_fn)


def reshape(x, shape):
    if not isinstance(x, Value):
        return np.reshape(x, shape)
    old = x.data.shape
    out = x.data.reshape(shape)

    def backward_fn(grad, _old=old):
        return (np.asarray(grad).reshape(_old),)

    return x.tape.emit("reshape", (x.index,), out, backward_fn)


def take(x, indices, axis: int = 0):
    """Gather rows by integer index (duplicates allowed)."""
    idx = np.asarray(indices)
    if not isinstance(x, Value):
        return np.take(x, idx, axis=axis)
    out = np.take(x.data, idx, axis=axis)
    shape = x.data.shape

    def backward_fn(grad, _idx=idx, _axis=axis, _shape=shape):
        g = np.zeros(_shape)
        np.add.at(g, (slice(None),) * _axis + (_idx,), grad)
        return (g,)

    return x.tape.emit("take", (x.index,), out, backward_fn)


# -- parameter store ------------------------------------------------------


class ParamStore:
    """Flat f64 parameter vector with named, shaped slices.

    The slice table is ordered; gradients returned by :func:`backward`
    align with :attr:`values` elementwise.
    """

    MAGIC = b"NKPARAMS"
    VERSION = 1

    def __init__(self, shapes: Mapping[str, tuple[int, ...]], values: np.ndarray | None = None):
        self._slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape)) if shape else 1
            self._slices[name] = (offset, size, tuple(shape))
            offset += size
        self.values = np.zeros(offset) if values is None else np.asarray(values, dtype=np.float64).copy()
        if self.values.shape != (offset,):
            raise ValueError(f"expected {offset} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    @property
    def size(self) -> int:
        return self.values.size

    def names(self) -> Iterator[str]:
        return iter(self._slices)

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._slices[name][2]

    def get(self, name: str) -> np.ndarray:
        offset, size, shape = self._slices[name]
        return self.values[offset : offset + size].reshape(shape)

    def set(self, name: str, array: np.ndarray) -> None:
        offset, size, shape = self._slices[name]
        arr = np.asarray(array, dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"slice '{name}' expects shape {shape}, got {arr.shape}")
        self.values[offset : offset + size] = arr.ravel()

    def copy(self) -> "ParamStore":
        return ParamStore({n: s for n, (_, _, s) in self._slices.items()}, self.values)

    def arrays(self) -> dict[str, np.ndarray]:
        """Read-only views, for gradient-free evaluation."""
        return {name: self.get(name) for name in self._slices}

    def leaves(self, tape: Tape) -> dict[str, Value]:
        """One leaf node per slice; registers alignment info on the tape."""
        out = {}
        for name, (offset, size, shape) in self._slices.items():
            v = tape.leaf(self.get(name), f"param:{name}")
            tape.param_leaves.append((v.index, offset, size, shape))
            out[name] = v
        return out

    # -- serialization: versioned little-endian binary --------------------
    #
    #   magic   8 bytes  b"NKPARAMS"
    #   version u32
    #   nslices u32
    #   per slice: name_len u16, name utf-8, ndim u32, dims u32...
    #   payload: all values as little-endian f64, in slice-table order

    def save(self, path) -> None:
        import struct

        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<II", self.VERSION, len(self._slices)))
            for name, (_, _, shape) in self._slices.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", len(shape)))
                for d in shape:
                    f.write(struct.pack("<I", d))
            f.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        import struct

        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != cls.MAGIC:
                raise ValueError(f"bad magic {magic!r}")
            version, nslices = struct.unpack("<II", f.read(8))
            if version != cls.VERSION:
                raise ValueError(f"unsupported version {version}")
            shapes: dict[str, tuple[int, ...]] = {}
            for _ in range(nslices):
                (name_len,) = struct.unpack("<H", f.read(2))
                name = f.read(name_len).decode("utf-8")
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
                shapes[name] = shape
            total = sum(int(np.prod(s)) if s else 1 for s in shapes.values())
            payload = f.read(total * 8)
            values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls(shapes, values)


def forward_eval(closure: Callable, params: ParamStore, check_finite: bool = True):
    """Run ``closure(leaves)`` on a fresh tape; return (scalar value, tape).

    The closure receives a mapping name -> leaf Value and must build its
    result exclusively from those leaves, constants and tape operations.
    """
    tape = Tape(check_finite=check_finite)
    leaves = params.leaves(tape)
    result = closure(leaves)
    if not isinstance(result, Value):
        raise TypeError("closure must return a Value recorded on the tape")
    if result.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {result.data.shape}")
    if not np.all(np.isfinite(result.data)):
        raise NonFiniteValueError(f"non-finite loss at node {result.index}")
    tape.outputs = [result.index]
    return float(result.data), tape


def backward(tape: Tape, params: ParamStore) -> np.ndarray:
    """Reverse-accumulate d(output)/d(theta), aligned with ``params.values``."""
    if len(tape.outputs) != 1:
        raise ValueError(f"expected exactly one scalar output, got {len(tape.outputs)}")
    out_index = tape.outputs[0]
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[out_index] = np.ones(())
    for index in range(out_index, -1, -1):
        g = grads[index]
        if g is None:
            continue
        _, parents, backward_fn = tape.nodes[index]
        if backward_fn is None or not parents:
            continue
        parent_grads = backward_fn(g)
        for p, pg in zip(parents, parent_grads):
            if grads[p] is None:
                # backward closures always return fresh arrays; take ownership
                grads[p] = np.asarray(pg, dtype=np.float64)
            else:
                grads[p] += pg
        grads[index] = None  # free as we go
    flat = np.zeros(params.size)
    for node_index, offset, size, shape in tape.param_leaves:
        g = grads[node_index]
        if g is not None:
            flat[offset : offset + size] = np.asarray(g).ravel()
    return flat


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coord: int
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def check_gradients(
    closure: Callable,
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_coords: int = 100,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Checks a random subset of parameter coordinates. The relative error
    denominator is floored at 1e-6 so near-zero gradients are compared
    absolutely.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    _, tape = forward_eval(closure, params)
    grad = backward(tape, params)
    tape.release()
    coords = (
        np.arange(params.size)
        if params.size <= n_coords
        else rng.choice(params.size, size=n_coords, replace=False)
    )
    work = params.copy()
    max_rel, worst = 0.0, -1
    for i in coords:
        saved = work.values[i]
        work.values[i] = saved + step
        f_plus, t = forward_eval(closure, work, check_finite=False)
        t.release()
        work.values[i] = saved - step
        f_minus, t = forward_eval(closure, work, check_finite=False)
        t.release()
        work.values[i] = saved
        fd = (f_plus - f_minus) / (2.0 * step)
        rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-6)
        if rel > max_rel:
            max_rel, worst = rel, int(i)
    return GradCheckReport(max_rel, worst, len(coords), tolerance)
