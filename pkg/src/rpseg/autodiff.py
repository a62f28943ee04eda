"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the primitives the segmentation network needs are implemented: a fused
dense layer, batched matrix products, gathers, concatenation, a few
elementwise nonlinearities and a full-mean reduction.  Every operation
carries an exact analytic backward; a central finite-difference checker
doubles as the gradient oracle.  Training runs in single precision by
default, gradient checks in double.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class NumericalError(RuntimeError):
    """Raised when a computation produces NaN/Inf or a gradient goes non-finite."""


def _require_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """Node in the computation graph wrapping one ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data)
        _require_finite(self.data, "tensor data")
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1; the node must be scalar."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # parents pushed in reverse so the sweep order is deterministic
            for parent in reversed(node._parents):
                stack.append((parent, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient buffer."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# primitives


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis of a 2-d input."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x: (B, I), w: (I, O), b: (O,)")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"dense shape mismatch: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    out = Tensor(x.data @ w.data + b.data, parents=(x, w, b))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T)
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over stacked matrices, e.g. (M,K,K) @ (M,K,C)."""
    if a.data.shape[-1] != b.data.shape[-2] or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b.accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    out._backward = backward
    return out


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; the backward splits the gradient."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ValueError(f"concat shape mismatch: {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g[..., :split])
        if b.requires_grad:
            b.accumulate(g[..., split:])

    out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    out._backward = backward
    return out


def _scatter_rows(n_rows: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # deterministic segment-sum replacement for np.add.at (which is slow)
    out = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.dtype)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_rows = rows[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(sorted_rows, starts, axis=0)
    return out


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a (N, C) tensor; output shape = indices.shape + (C,)."""
    if x.data.ndim != 2:
        raise ValueError("take_rows expects a 2-d tensor")
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[indices], parents=(x,))

    def backward(g):
        if x.requires_grad:
            flat_idx = indices.reshape(-1)
            flat_g = g.reshape(-1, x.data.shape[1])
            x.accumulate(_scatter_rows(x.data.shape[0], flat_idx, flat_g))

    out._backward = backward
    return out


def _unary(x: Tensor, value: np.ndarray, local_grad) -> Tensor:
    out = Tensor(value, parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * local_grad())

    out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    data = x.data
    y = np.empty_like(data)
    pos = data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    exp_x = np.exp(data[~pos])
    y[~pos] = exp_x / (1.0 + exp_x)
    return _unary(x, y, lambda: y * (1.0 - y))


def relu(x: Tensor) -> Tensor:
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(x.data.dtype))


def elu(x: Tensor) -> Tensor:
    data = x.data
    expm = np.where(data < 0, np.exp(np.minimum(data, 0.0)), 1.0)
    value = np.where(data < 0, expm - 1.0, data)
    return _unary(x, value.astype(data.dtype, copy=False),
                  lambda: np.where(data < 0, expm, 1.0).astype(data.dtype, copy=False))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log of non-positive value")
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a fixed non-negative exponent."""
    if exponent < 0:
        raise ValueError("negative exponents are not supported")
    if exponent == 0:
        return _unary(x, np.ones_like(x.data), lambda: np.zeros_like(x.data))
    value = x.data ** exponent
    return _unary(x, value, lambda: exponent * x.data ** (exponent - 1.0))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda: inside.astype(x.data.dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    out._backward = backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    return _unary(x, x.data * factor, lambda: np.full_like(x.data, factor))


def shift(x: Tensor, offset: float) -> Tensor:
    return _unary(x, x.data + offset, lambda: np.ones_like(x.data))


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean()), parents=(x,))

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, g / x.data.size))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# shared MLPs


ACTIVATIONS = {"elu": elu, "relu": relu, "none": None}


@dataclass(frozen=True)
class MlpSpec:
    """Widths of a dense stack; ``widths[0]`` is the input width."""

    widths: tuple[int, ...]
    activation: str = "elu"
    final_activation: bool = True

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs an input and at least one layer width")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def shared_mlp(x: Tensor, layers, spec: MlpSpec) -> Tensor:
    """Apply the same dense stack to every row of the trailing axis.

    ``x`` may be (B, I) or (B, K, I); higher-rank inputs are flattened to rows,
    so permuting rows permutes outputs bit-exactly.

    ``layers`` is the list of (weight, bias) tensors, one pair per layer.
    """
    lead = x.data.shape[:-1]
    h = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    act = ACTIVATIONS[spec.activation]
    for i, (w, b) in enumerate(layers):
        h = dense(h, w, b)
        last = i == len(layers) - 1
        if act is not None and (not last or spec.final_activation):
            h = act(h)
    if x.data.ndim != 2:
        h = reshape(h, lead + (h.data.shape[-1],))
    return h


# ---------------------------------------------------------------------------
# parameter store and optimizer


GLOROT_SCALE = 6.0


def glorot_uniform(shape, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    s = np.sqrt(GLOROT_SCALE / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


class ParamStore:
    """Named trainable arrays plus their Adam state.

    Entry order is insertion order and fixed, which keeps optimizer updates
    and checkpoint layouts deterministic.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(np.asarray(value, dtype=self.dtype))
        self._params[name] = p
        self._m[name] = np.zeros_like(p.data)
        self._v[name] = np.zeros_like(p.data)
        return p

    def add_dense(self, name: str, fan_in: int, fan_out: int,
                  rng: np.random.Generator) -> tuple[Parameter, Parameter]:
        w = self.add(name + ".w", glorot_uniform((fan_in, fan_out), rng, self.dtype))
        b = self.add(name + ".b", np.zeros(fan_out, dtype=self.dtype))
        return w, b

    def mlp_layers(self, prefix: str, n_layers: int) -> list[tuple[Parameter, Parameter]]:
        return [(self[f"{prefix}.{i}.w"], self[f"{prefix}.{i}.b"]) for i in range(n_layers)]

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_scalars(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise ValueError("parameter names do not match this store")
        for name, value in state.items():
            p = self._params[name]
            if p.data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.data[...] = value.astype(self.dtype)

    def clone(self) -> "ParamStore":
        other = ParamStore(self.dtype)
        for name, p in self._params.items():
            other.add(name, p.data.copy())
        return other


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    store.step_count += 1
    t = store.step_count
    for name, p in store.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
        p.zero_grad()


def finite_diff_check(f, store: ParamStore, h: float = 1e-5,
                      param_names=None) -> float:
    """Max relative error between analytic gradients of ``f()`` and central differences.

    ``f`` must be a pure function of the store's current values returning a
    scalar Tensor.  Relative error uses max(|analytic|, |numeric|, 1e-8) as
    the denominator.
    """
    store.zero_grads()
    loss = f()
    loss.backward()
    names = list(param_names) if param_names is not None else store.names()
    analytic = {name: store[name].grad.copy() for name in names}
    worst = 0.0
    for name in names:
        p = store[name]
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    store.zero_grads()
    return worst
