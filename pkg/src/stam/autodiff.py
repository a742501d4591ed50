"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that depends on a tensor with
``requires_grad=True`` records a closure mapping the output gradient to the
gradients of its inputs.  :meth:`Tensor.backward` walks that graph in reverse
topological order and accumulates gradients into the leaf tensors.

The module also holds the pieces that only make sense next to the graph:
a seeded parameter store, an Adam optimizer and a central-difference
gradient checker.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, DomainError, GradientError

_grad_enabled = True
# working precision for freshly built tensors; only the gradient checker widens it
_dtype = np.float64


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (inference, finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def _extended_precision(params: "ParamStore") -> Iterator[None]:
    """Evaluate with long-double parameters so finite differences are not drowned by rounding."""
    global _dtype
    previous, saved = _dtype, {name: t.values for name, t in params.items()}
    _dtype = np.longdouble
    try:
        for name, t in params.items():
            t.values = saved[name].astype(np.longdouble)
        yield
    finally:
        _dtype = previous
        for name, t in params.items():
            t.values = saved[name]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(values: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self.values, other.values
        return Tensor._result(
            a + b,
            (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.values, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self.values, other.values
        return Tensor._result(
            a - b,
            (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self.values, other.values
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.values, other.values
        return Tensor._result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.values
        return Tensor._result(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def exp(self) -> "Tensor":
        out = np.exp(self.values)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.values
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.values)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        # tanh form never overflows, unlike 1 / (1 + exp(-x)) for very negative x
        out = 0.5 + 0.5 * np.tanh(0.5 * self.values)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),))

    # -- reductions -------------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(self.values.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.values.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = -1) -> "Tensor":
        """Maximum along ``axis``; the subgradient goes to the first maximal entry."""
        a = self.values
        idx = np.expand_dims(np.argmax(a, axis=axis), axis)
        out = np.take_along_axis(a, idx, axis=axis).squeeze(axis)

        def backward(g):
            grad = np.zeros_like(a)
            np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
            return (grad,)

        return Tensor._result(out, (self,), backward)

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.values.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor._result(
            self.values.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    @property
    def T(self) -> "Tensor":
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, key) -> "Tensor":
        a = self.values

        def backward(g):
            grad = np.zeros_like(a)
            np.add.at(grad, key, g)
            return (grad,)

        return Tensor._result(a[key], (self,), backward)

    # -- backward pass ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.values.size != 1:
            raise DomainError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Tensor._result(av @ bv, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.values.size == 0 or x.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.values.size == 0 or x.shape[axis] == 0:
        raise DomainError("log_softmax of an empty vector")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.values for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(np.stack([t.values for t in tensors], axis=axis), tensors, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [..., in] and weight [out, in]."""
    x = as_tensor(x)
    xv, wv = x.values, weight.values
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[-1]:
        raise DimensionError(
            f"linear: input feature size {xv.shape[-1]} does not match weight shape {wv.shape}"
        )
    out = xv @ wv.T
    if bias is not None:
        out = out + bias.values

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        grads = (g @ wv, flat_g.T @ xv.reshape(-1, xv.shape[-1]))
        return grads if bias is None else grads + (flat_g.sum(axis=0),)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward)


# -- parameters ---------------------------------------------------------------------


def _label_key(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def derive_rng(seed: int, *labels: str) -> np.random.Generator:
    """Independent generator for ``(seed, labels)``; distinct labels give distinct streams."""
    spawn_key: tuple[int, ...] = ()
    for label in labels:
        spawn_key += _label_key(label)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


class ParamStore:
    """Named trainable tensors.

    Each parameter is initialised from its own stream derived from
    ``(rng_seed, name)``, so values depend on the name alone and not on the
    order in which parameters are registered.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._params: dict[str, Tensor] = {}

    def param(
        self,
        name: str,
        shape: Sequence[int],
        init: str = "uniform",
        fan_in: int | None = None,
    ) -> Tensor:
        """Return parameter ``name``, creating it on first use.

        ``init`` is ``"uniform"`` (U[-1/sqrt(fan_in), 1/sqrt(fan_in)], with
        ``fan_in`` defaulting to the last extent), ``"zeros"`` or ``"ones"``.
        """
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise DimensionError(f"parameter {name!r}: extents must be positive, got {shape}")
        existing = self._params.get(name)
        if existing is not None:
            if existing.shape != shape:
                raise DimensionError(
                    f"parameter {name!r} exists with shape {existing.shape}, requested {shape}"
                )
            return existing
        if init == "uniform":
            fan = fan_in if fan_in is not None else shape[-1]
            bound = 1.0 / np.sqrt(fan)
            values = derive_rng(self.rng_seed, "param", name).uniform(-bound, bound, size=shape)
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        tensor = Tensor(values, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = np.zeros_like(tensor.values)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, array in values.items():
            target = self._params[name]
            if target.shape != np.shape(array):
                raise DimensionError(f"{name}: expected {target.shape}, got {np.shape(array)}")
            target.values[...] = array


# -- optimizer -----------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    for name, tensor in params.items():
        if tensor.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, tensor in params.items():
        g = tensor.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(tensor.values)
            state.second_moment[name] = np.zeros_like(tensor.values)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


# -- gradient checking -----------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Max relative error per parameter, with the offending flat index."""

    max_relative_error: dict[str, float]
    worst_index: dict[str, int]
    step: float

    @property
    def overall(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.overall <= tolerance


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def _central_differences(
    build: Callable[[ParamStore], Tensor], params: ParamStore, name: str, indices, h: float
) -> np.ndarray:
    flat = params[name].values.reshape(-1)
    numeric = np.empty(len(indices))
    for k, i in enumerate(indices):
        original = flat[i]
        flat[i] = original + h
        plus = build(params).values.reshape(-1)[0]
        step = flat[i]
        flat[i] = original - h
        minus = build(params).values.reshape(-1)[0]
        # divide by the step actually taken, not the nominal one
        step = step - flat[i]
        flat[i] = original
        numeric[k] = float((plus - minus) / step)
    return numeric


def check_gradients(
    build: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-6,
    names: Sequence[str] | None = None,
    extended: bool = True,
    refine_above: float = 1e-6,
) -> GradCheckReport:
    """Compare backward gradients of ``build(params)`` with central differences.

    ``build`` must be a pure function of the parameter values; a builder that
    returns different losses for identical parameters raises
    :class:`GradientError`.

    At ``h=1e-6`` a float64 difference quotient carries an absolute error
    near ``eps * |loss| / h``, which swamps coordinates whose gradient is
    tiny.  With ``extended``, every coordinate whose float64 relative error
    exceeds ``refine_above`` is differenced again with the loss evaluated in
    long double.  The backward pass is always float64.
    """
    params.zero_grad()
    loss = build(params)
    loss.backward()
    analytic = {name: t.grad.reshape(-1).copy() for name, t in params.items()}
    base = loss.item()
    with no_grad():
        again = build(params).item()
    if again != base:
        raise GradientError(
            f"loss builder is not deterministic: {base!r} then {again!r} for identical parameters"
        )

    selected = list(params) if names is None else list(names)
    numeric: dict[str, np.ndarray] = {}
    with no_grad():
        for name in selected:
            numeric[name] = _central_differences(build, params, name, range(analytic[name].size), h)
    if extended:
        suspects = {
            name: np.flatnonzero(relative_error(analytic[name], numeric[name]) > refine_above)
            for name in selected
        }
        with no_grad(), _extended_precision(params):
            for name, idx in suspects.items():
                if idx.size:
                    numeric[name][idx] = _central_differences(build, params, name, idx, h)

    errors: dict[str, float] = {}
    worst: dict[str, int] = {}
    for name in selected:
        rel = relative_error(analytic[name], numeric[name])
        worst[name] = int(np.argmax(rel))
        errors[name] = float(rel[worst[name]])
    return GradCheckReport(errors, worst, h)
