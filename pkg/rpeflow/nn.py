"""
Named parameters, initializers, small layer helpers and the Adam optimizer.
"""
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from rpeflow.errors import ContractError, ShapeError
from rpeflow.tensor import Tensor, conv2d, get_default_dtype, leaky_relu, matmul, reshape


class ParameterStore:
    """
    Ordered mapping of dotted names to trainable tensors.

    Scopes (``store.scope("level1.fs")``) share the underlying storage and
    prefix every name they create or look up.
    """

    def __init__(self, _params: Optional["OrderedDict[str, Tensor]"] = None, _prefix: str = ""):
        self._params: "OrderedDict[str, Tensor]" = _params if _params is not None else OrderedDict()
        self._prefix = _prefix

    def _full(self, name: str) -> str:
        return f"{self._prefix}{name}"

    def scope(self, prefix: str) -> "ParameterStore":
        return ParameterStore(self._params, f"{self._full(prefix)}.")

    def add(self, name: str, values: np.ndarray) -> Tensor:
        full = self._full(name)
        if full in self._params:
            raise ContractError(f"parameter {full} already exists")
        t = Tensor(values, requires_grad=True, name=full)
        self._params[full] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        full = self._full(name)
        try:
            return self._params[full]
        except KeyError:
            raise ContractError(f"unknown parameter {full}")

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self._params

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name, t in self._params.items():
            if name.startswith(self._prefix):
                yield name, t

    def names(self) -> List[str]:
        return [name for name, _ in self.items()]

    def tensors(self) -> List[Tensor]:
        return [t for _, t in self.items()]

    def as_dict(self) -> Dict[str, Tensor]:
        return dict(self.items())

    def num_values(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.names()) - set(state)
        extra = set(state) - set(self.names())
        if missing or extra:
            raise ContractError(
                f"checkpoint does not match model: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}"
            )
        for name, t in self.items():
            if state[name].shape != t.shape:
                raise ContractError(f"parameter {name} has shape {t.shape}, checkpoint has {state[name].shape}")
            t.assign(state[name].astype(t.dtype))


# -- initializers ----------------------------------------------------------


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(get_default_dtype())


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(shape, dtype=get_default_dtype())


def add_linear(store: ParameterStore, name: str, cin: int, cout: int, rng: np.random.Generator,
               gain: float = 1.0) -> None:
    store.add(f"{name}.w", he_normal(rng, (cin, cout), cin, gain))
    store.add(f"{name}.b", zeros((cout,)))


def add_conv(store: ParameterStore, name: str, k: int, cin: int, cout: int, rng: np.random.Generator,
             gain: float = 1.0) -> None:
    store.add(f"{name}.w", he_normal(rng, (k, k, cin, cout), k * k * cin, gain))
    store.add(f"{name}.b", zeros((cout,)))


# -- layers ----------------------------------------------------------------


def linear(x: Tensor, store: ParameterStore, name: str) -> Tensor:
    """Shared perceptron over the last axis: x·W + b for rows of any leading shape."""
    w, b = store[f"{name}.w"], store[f"{name}.b"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{name}: input has {x.shape[-1]} channels, weights expect {w.shape[0]}")
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
    out = matmul(flat, w) + b
    return reshape(out, lead + (w.shape[1],))


def conv(x: Tensor, store: ParameterStore, name: str, stride: int = 1) -> Tensor:
    w, b = store[f"{name}.w"], store[f"{name}.b"]
    return conv2d(x, w, stride=stride, padding=w.shape[0] // 2) + b


def conv_act(x: Tensor, store: ParameterStore, name: str, stride: int = 1) -> Tensor:
    return leaky_relu(conv(x, store, name, stride=stride))


def linear_act(x: Tensor, store: ParameterStore, name: str) -> Tensor:
    return leaky_relu(linear(x, store, name))


# -- optimizer -------------------------------------------------------------


class Adam:
    """
    Adaptive-moment optimizer with L2 weight decay added to the gradient.

    Args:
        params: Parameter store to update in place
        lr: Step size
        weight_decay: L2 coefficient
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard
    """

    def __init__(self, params: ParameterStore, lr: float = 1e-3, weight_decay: float = 1e-6,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(t.values) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.values) for name, t in params.items()}
        self.t = 0

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
        """
        Apply one update.

        Args:
            grads: Gradients by parameter name; defaults to each tensor's ``.grad``
        """
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            g = g + self.weight_decay * p.values
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.assign(p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, state: Dict[str, np.ndarray], step: int) -> None:
        for name in self.m:
            self.m[name] = np.array(state[f"optim.m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(state[f"optim.v.{name}"], dtype=self.v[name].dtype)
        self.t = int(step)
