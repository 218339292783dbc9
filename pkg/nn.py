"""
Parameter storage, initialization and optimizers shared by every network.
"""

import math
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from autodiff import BatchNormStats, Tensor
from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from errors import ConfigError, ShapeError

# =============================================================================
# Parameter Store
# =============================================================================


class ParamTensor:
    """Ordered, named differentiable parameters with paired gradient buffers."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"Duplicate parameter name '{name}'")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; parameters that received none report zeros."""
        return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in self._params.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self._params.items():
            if name not in arrays:
                if strict:
                    raise ConfigError(f"Missing parameter '{name}' in checkpoint")
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"Parameter '{name}': checkpoint shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self._params.values()]) \
            if self._params else np.zeros(0)


# =============================================================================
# Initialization
# =============================================================================


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_fans(c_in: int, c_out: int, nd: int) -> Tuple[int, int]:
    taps = 3 ** nd
    return c_in * taps, c_out * taps


# =============================================================================
# Optimizers
# =============================================================================


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam update. Returns (new_value, new_m, new_v)."""
    if t < 1:
        raise ConfigError(f"Adam step index must be >= 1, got {t}")
    if grad.shape != value.shape or m.shape != value.shape or v.shape != value.shape:
        raise ShapeError(f"Adam buffers do not match parameter shape {value.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """
    Adam over named parameters. Moments and step counts are kept per name,
    so parameters that are touched rarely (per-sample latents) get their own
    bias correction.
    """

    def __init__(self, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, params: Mapping[str, Tensor], lr: float,
             grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        for name, param in params.items():
            grad = grads.get(name) if grads is not None else param.grad
            if grad is None:
                continue
            m = self.m.get(name, np.zeros_like(param.data))
            v = self.v.get(name, np.zeros_like(param.data))
            t = self.t.get(name, 0) + 1
            param.data, self.m[name], self.v[name] = adam_step(
                param.data, np.asarray(grad, dtype=np.float64), m, v, t, lr,
                self.beta1, self.beta2, self.eps)
            self.t[name] = t

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for name in self.m:
            arrays[f"{prefix}.m.{name}"] = self.m[name]
            arrays[f"{prefix}.v.{name}"] = self.v[name]
            arrays[f"{prefix}.t.{name}"] = np.array(float(self.t[name]))
        return arrays

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
        self.m, self.v, self.t = {}, {}, {}
        head = f"{prefix}.m."
        for key in arrays:
            if key.startswith(head):
                name = key[len(head):]
                self.m[name] = np.array(arrays[key])
                self.v[name] = np.array(arrays[f"{prefix}.v.{name}"])
                self.t[name] = int(arrays[f"{prefix}.t.{name}"])


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
    for name, param in params.items():
        if name in grads:
            param.data = param.data - lr * grads[name]


# =============================================================================
# Batchnorm Running Statistics
# =============================================================================


def stats_state_dict(stats: Mapping[str, BatchNormStats]) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for name, s in stats.items():
        arrays[f"{name}.running_mean"] = s.mean.copy()
        arrays[f"{name}.running_var"] = s.var.copy()
    return arrays


def load_stats(stats: Mapping[str, BatchNormStats], arrays: Mapping[str, np.ndarray]) -> None:
    for name, s in stats.items():
        key = f"{name}.running_mean"
        if key in arrays:
            s.mean = np.array(arrays[key])
            s.var = np.array(arrays[f"{name}.running_var"])
