"""
Dense float64 tensors with reverse-mode gradients.

Every learned operation of the flow model (MLP, GRU, attention, KL loss) is
built from the primitives in this module. Each primitive records a backward
closure on its output; ComputationTape collects the recorded ops reachable from
a root and replays them in reverse execution order.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigurationError, DimensionError, DomainError, InvalidInputError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Execution counter; orders recorded ops on the tape.
_EXECUTION_ORDER = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An immutable float64 array that may take part in a computation tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._order = next(_EXECUTION_ORDER)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        array = np.asarray(data, dtype=np.float64)
        array.flags.writeable = False
        out.data = array
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._order = next(_EXECUTION_ORDER)
        return out

    # ----- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise InvalidInputError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ----- elementwise arithmetic ------------------------------------------

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), "add", backward)

    def __radd__(self, other):
        return as_tensor(other) + self

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), "sub", backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), "mul", backward)

    def __rmul__(self, other):
        return as_tensor(other) * self

    def __truediv__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), "div", backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), "neg", lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise InvalidInputError("only scalar exponents are supported")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._from_op(a**exponent, (self,), f"pow{exponent}", backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # ----- unary functions --------------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), "exp", lambda g: (g * y,))

    def log(self) -> "Tensor":
        a = self.data
        if np.any(a <= 0):
            raise DomainError("log of a nonpositive value")
        return Tensor._from_op(np.log(a), (self,), "log", lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._from_op(y, (self,), "tanh", lambda g: (g * (1.0 - y * y),))

    def sigmoid(self) -> "Tensor":
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._from_op(y, (self,), "sigmoid", lambda g: (g * y * (1.0 - y),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(self.data * mask, (self,), "relu", lambda g: (g * mask,))

    # ----- reductions and reshaping ----------------------------------------

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axes, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[ax] for ax in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), "reshape", lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), "transpose", lambda g: (g.transpose(inverse),))

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        original = self.shape
        data = np.broadcast_to(self.data, shape)
        return Tensor._from_op(data, (self,), "broadcast", lambda g: (_unbroadcast(g, original),))

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        injective = _is_injective(index)

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            if injective:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), "index", backward)

    # ----- autograd ---------------------------------------------------------

    def backward(self, seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """Run reverse mode from this tensor; reachable leaf tensors receive `.grad`."""
        return ComputationTape(self).backward(seed)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _is_injective(index) -> bool:
    """True when no element is selected twice, so scatter can assign instead of accumulate."""
    parts = index if isinstance(index, tuple) else (index,)
    arrays = [np.asarray(p) for p in parts if isinstance(p, (list, np.ndarray))]
    if not arrays:
        return True
    if len(arrays) > 1:
        return False
    array = arrays[0]
    if array.dtype == bool:
        return True
    return np.unique(array).size == array.size


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    """One executed differentiable operation."""

    output: Tensor
    inputs: Tuple[Tensor, ...]
    op: str


class ComputationTape:
    """Ordered record of the ops that produced a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.entries: List[TapeEntry] = []
        self.leaves: List[Tensor] = []
        seen = set()
        stack = [root]
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._order)
        for node in nodes:
            if node._backward is not None:
                self.entries.append(TapeEntry(node, node._parents, node._op))
            elif node.requires_grad:
                self.leaves.append(node)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """Replay entries in reverse execution order, each exactly once."""
        if seed is None:
            if self.root.size != 1:
                raise InvalidInputError(f"backward needs a scalar root or an explicit seed, got shape {self.root.shape}")
            seed = np.ones(self.root.shape)
        grads: Dict[int, np.ndarray] = {id(self.root): np.asarray(seed, dtype=np.float64)}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            parent_grads = entry.output._backward(g)
            for parent, pg in zip(entry.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for leaf in self.leaves:
            leaf.grad = grads.get(id(leaf), np.zeros(leaf.shape))
        return grads


# ----- composite tensor functions ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions of `a` batch over a shared or batched `b`."""
    if a.ndim == 1:
        out = matmul(a.reshape((1, a.shape[0])), b)
        return out.reshape(out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(b_data, -1, -2)
        gb = np.swapaxes(a_data, -1, -2) @ g
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return Tensor._from_op(a_data @ b_data, (a, b), "matmul", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidInputError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from e
    return Tensor._from_op(data, tuple(tensors), "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidInputError("stack of an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack shape mismatch: {[t.shape for t in tensors]}")
    ndim = tensors[0].ndim + 1
    axis = axis % ndim

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack", backward)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Shift-invariant softmax; masked-out entries get exactly zero weight."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), "softmax", backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None, return_weights: bool = False):
    """
    Single-head scaled dot-product attention.

    Args:
        q: queries, shape (..., Tq, C)
        k: keys, shape (..., Tk, C)
        v: values, shape (..., Tk, C)
        mask: optional boolean (..., Tq, Tk); False entries are ignored

    Returns:
        (..., Tq, C) output, plus the weight rows when return_weights is set
    """
    if k.shape[-2] == 0:
        raise InvalidInputError("attention over an empty key set")
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]):
        raise DimensionError(f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys and values differ in count: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    weights = softmax(scores, axis=-1, mask=mask)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear input width {x.shape[-1]} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return out if bias is None else out + bias


def mlp(x: Tensor, layers: "ParamSet", prefix: str = "mlp", activation: Callable[[Tensor], Tensor] = Tensor.tanh) -> Tensor:
    """Affine + activation stack over the last axis; the last layer is affine only."""
    count = 0
    while f"{prefix}.{count}.weight" in layers:
        count += 1
    if count == 0:
        raise ConfigurationError(f"no MLP layers under '{prefix}'")
    for i in range(count):
        weight = layers[f"{prefix}.{i}.weight"]
        bias = layers.get(f"{prefix}.{i}.bias")
        if x.shape[-1] != weight.shape[0]:
            raise DimensionError(f"MLP '{prefix}' layer {i} expects width {weight.shape[0]}, got {x.shape[-1]}")
        x = linear(x, weight, bias)
        if i < count - 1:
            x = activation(x)
    return x


def gru_cell(x: Tensor, h: Tensor, params: "ParamSet", prefix: str = "gru") -> Tensor:
    """
    Gated recurrent update h' = (1 - z) * h + z * n.

    r = sigmoid(x W_xr + h W_hr + b_r)
    z = sigmoid(x W_xz + h W_hz + b_z)
    n = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
    """
    if x.shape[-1] != h.shape[-1]:
        raise DimensionError(f"GRU input width {x.shape[-1]} differs from state width {h.shape[-1]}")

    def p(name: str) -> Tensor:
        return params[f"{prefix}.{name}"]

    if p("w_xr").shape != (x.shape[-1], h.shape[-1]):
        raise DimensionError(f"GRU '{prefix}' weights {p('w_xr').shape} do not fit width {x.shape[-1]}")
    r = (linear(x, p("w_xr")) + linear(h, p("w_hr")) + p("b_r")).sigmoid()
    z = (linear(x, p("w_xz")) + linear(h, p("w_hz")) + p("b_z")).sigmoid()
    n = (linear(x, p("w_xn"), p("b_xn")) + r * linear(h, p("w_hn"), p("b_hn"))).tanh()
    return (1.0 - z) * h + z * n


def attention_block(
    x_q: Tensor,
    x_kv: Tensor,
    params: "ParamSet",
    prefix: str,
    residual: bool = False,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Projected attention: softmax(xq Wq (xkv Wk)^T / sqrt(C)) xkv Wv Wo, optionally plus xq."""
    q = linear(x_q, params[f"{prefix}.wq"])
    k = linear(x_kv, params[f"{prefix}.wk"])
    v = linear(x_kv, params[f"{prefix}.wv"])
    out = linear(attention(q, k, v, mask=mask), params[f"{prefix}.wo"])
    return x_q + out if residual else out


def kl_from_log_sigma(mu_p: Tensor, log_sigma_p: Tensor, mu_q: Tensor, log_sigma_q: Tensor) -> Tensor:
    """Mean elementwise KL(p || q) of diagonal Gaussians given log sigmas."""
    shapes = {mu_p.shape, log_sigma_p.shape, mu_q.shape, log_sigma_q.shape}
    if len(shapes) != 1:
        raise DimensionError(f"KL operands differ in shape: {sorted(shapes)}")
    var_p = (log_sigma_p * 2.0).exp()
    var_q = (log_sigma_q * 2.0).exp()
    diff = mu_p - mu_q
    per_element = (log_sigma_q - log_sigma_p) + (var_p + diff * diff) / (var_q * 2.0) - 0.5
    return per_element.mean()


def kl_diag_gaussian(mu_p: Tensor, sigma_p: Tensor, mu_q: Tensor, sigma_q: Tensor) -> Tensor:
    """Mean elementwise KL(p || q) of diagonal Gaussians."""
    for name, sigma in (("sigma_p", sigma_p), ("sigma_q", sigma_q)):
        if np.any(sigma.data <= 0):
            raise DomainError(f"{name} must be strictly positive")
    return kl_from_log_sigma(mu_p, sigma_p.log(), mu_q, sigma_q.log())


# ----- parameters -------------------------------------------------------------


class ParamSet(Mapping[str, Tensor]):
    """Named learnable tensors, iterated in sorted name order."""

    def __init__(self, tensors: Optional[Mapping[str, Union[Tensor, np.ndarray]]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name in sorted(tensors or {}):
            value = tensors[name]
            self._tensors[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ConfigurationError(f"parameter '{name}' is missing") from None

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def get(self, name: str, default=None):
        return self._tensors.get(name, default)

    @property
    def num_values(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def as_leaves(self) -> "ParamSet":
        """Fresh gradient-tracking leaves over the same values, for one tape."""
        return ParamSet({k: Tensor(v.data, requires_grad=True) for k, v in self._tensors.items()})

    def detached(self, prefix: str) -> "ParamSet":
        """Same set with every tensor under `prefix` cut from the tape."""
        return ParamSet({k: (v.detach() if k.startswith(prefix) else v) for k, v in self._tensors.items()})

    def gradients(self) -> Dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros(v.shape)) for k, v in self._tensors.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}

    def replaced(self, updates: Mapping[str, Union[Tensor, np.ndarray]]) -> "ParamSet":
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise ConfigurationError(f"unknown parameters: {sorted(unknown)}")
        combined = dict(self._tensors)
        combined.update(updates)
        return ParamSet(combined)


class ParamInitializer:
    """Seeded builder for a ParamSet; uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) by default."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self._arrays: Dict[str, np.ndarray] = {}

    def _register(self, name: str, array: np.ndarray) -> None:
        if name in self._arrays:
            raise ConfigurationError(f"parameter '{name}' registered twice")
        self._arrays[name] = array

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: Optional[int] = None) -> None:
        fan_in = fan_in or shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        self._register(name, self.rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape: Tuple[int, ...], value: float = 0.0) -> None:
        self._register(name, np.full(shape, float(value)))

    def linear(self, prefix: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        self.uniform(f"{prefix}.weight", (fan_in, fan_out), fan_in)
        if bias:
            self.uniform(f"{prefix}.bias", (fan_out,), fan_in)

    def mlp(self, prefix: str, widths: Sequence[int]) -> None:
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.linear(f"{prefix}.{i}", fan_in, fan_out)

    def gru(self, prefix: str, width: int) -> None:
        for gate in ("r", "z", "n"):
            self.uniform(f"{prefix}.w_x{gate}", (width, width), width)
            self.uniform(f"{prefix}.w_h{gate}", (width, width), width)
        self.uniform(f"{prefix}.b_r", (width,), width)
        self.uniform(f"{prefix}.b_z", (width,), width)
        self.uniform(f"{prefix}.b_xn", (width,), width)
        self.uniform(f"{prefix}.b_hn", (width,), width)

    def attention(self, prefix: str, width: int) -> None:
        for name in ("wq", "wk", "wv", "wo"):
            self.uniform(f"{prefix}.{name}", (width, width), width)

    def build(self) -> ParamSet:
        return ParamSet(self._arrays)


# ----- optimization -------------------------------------------------------------


def _check_keys(params: ParamSet, grads: Mapping[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise ConfigurationError(f"gradient keys do not match parameters (missing {missing}, extra {extra})")


def optimizer_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """Plain SGD: p <- p - lr * g."""
    _check_keys(params, grads)
    return ParamSet({name: params[name].data - lr * np.asarray(grads[name]) for name in params})


@dataclass
class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: Dict[str, np.ndarray] = field(default_factory=dict)
    _v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        _check_keys(params, grads)
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        updated = {}
        for name in params:
            g = np.asarray(grads[name])
            m = self.beta1 * self._m.get(name, np.zeros_like(g)) + (1.0 - self.beta1) * g
            v = self.beta2 * self._v.get(name, np.zeros_like(g)) + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            updated[name] = params[name].data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return ParamSet(updated)


# ----- gradient oracle -----------------------------------------------------------


@dataclass
class GradientReport:
    """Tape gradients against central differences, one entry per input."""

    analytic: List[np.ndarray]
    numeric: List[np.ndarray]
    relative_errors: List[float]

    @property
    def max_relative_error(self) -> float:
        return max(self.relative_errors) if self.relative_errors else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, 1e-8))


def finite_diff_grad(fn: Callable[..., Tensor], inputs: Sequence[ArrayLike], eps: float = 1e-5) -> GradientReport:
    """
    Compare tape gradients of a scalar function with central differences.

    Args:
        fn: takes one Tensor per input and returns a single-element Tensor
        inputs: input values
        eps: central-difference step, within [1e-7, 1e-4]
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ConfigurationError(f"finite-difference step {eps} outside [1e-7, 1e-4]")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.size != 1:
        raise InvalidInputError(f"finite_diff_grad needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]

    def evaluate(values: List[np.ndarray]) -> float:
        return fn(*[Tensor(v) for v in values]).item()

    numeric = []
    for i, base in enumerate(arrays):
        grad = np.zeros_like(base)
        for pos in np.ndindex(base.shape):
            plus = [a if j != i else a.copy() for j, a in enumerate(arrays)]
            minus = [a if j != i else a.copy() for j, a in enumerate(arrays)]
            plus[i][pos] += eps
            minus[i][pos] -= eps
            grad[pos] = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
        numeric.append(grad)

    errors = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    logger.debug(f"finite-difference check over {len(arrays)} inputs, max relative error {max(errors, default=0.0):.3e}")
    return GradientReport(analytic, numeric, errors)
