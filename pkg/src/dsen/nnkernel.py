"""Dense layers, activations and the Adam update used by the DSEN heads.

Matrices are plain ``numpy.ndarray`` objects in float64. Gradients are
hand-derived for the fixed set of graphs the model needs; each forward
returns a small cache object which the matching backward consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COS_EPS = 1e-12


class KernelError(ValueError):
    """Base class for kernel-level errors."""


class DimensionError(KernelError):
    pass


class BackwardError(KernelError):
    """Raised when a backward pass is requested without a recorded forward."""


class NonFiniteError(KernelError):
    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


def as_matrix(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def msra_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Zero-mean Gaussian weights with std sqrt(2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"inconsistent layer: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "LinearLayer":
        return cls(msra_init(rng, out_dim, in_dim), np.zeros(out_dim))

    @classmethod
    def identity(cls, dim: int) -> "LinearLayer":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weight.copy(), self.bias.copy())


def linear_forward(layer: LinearLayer, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match layer weight shape {layer.weight.shape}"
        )
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``y = x W^T + b``."""
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ layer.weight
    return grad_x, grad_w, grad_b


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(pre_activation: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (pre_activation > 0)


def softmax_rows(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cosine_distance(v1, v2) -> float:
    """Negative cosine similarity of two vectors, in [-1, 1].

    Raises:
        DimensionError: on a length mismatch or a zero-norm argument.
    """
    a = np.asarray(v1, dtype=np.float64).ravel()
    b = np.asarray(v2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DimensionError("cosine distance is undefined for a zero-norm vector")
    return float(-np.dot(a, b) / (na * nb))


def rowwise_cosine_distance(u: np.ndarray, v: np.ndarray, eps: float = COS_EPS):
    """Row-paired negative cosine with clamped norms and its gradients.

    Returns ``(d, grad_u, grad_v)`` where ``d[i] = -<u_i, v_i> / (|u_i| |v_i|)``
    and the gradients are those of ``d.sum()``.
    """
    nu = np.maximum(np.linalg.norm(u, axis=1), eps)[:, None]
    nv = np.maximum(np.linalg.norm(v, axis=1), eps)[:, None]
    dot = np.sum(u * v, axis=1, keepdims=True)
    d = -(dot / (nu * nv))[:, 0]
    grad_u = -(v / (nu * nv) - dot * u / (nu**3 * nv))
    grad_v = -(u / (nu * nv) - dot * v / (nu * nv**3))
    return d, grad_u, grad_v


@dataclass
class AdamState:
    """Moment buffers and hyper-parameters for :func:`adam_step`.

    ``t`` counts update calls. Bias correction uses ``steps[name]``, the number
    of updates a block has actually received, so a block that joins training
    late (e.g. the unseen head after warm start) begins with a normal first step.
    """

    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5
    decay_biases: bool = False
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)


def _is_bias(name: str) -> bool:
    return name.endswith("bias")


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Apply one Adam update in place to every block named in ``grads``.

    Blocks present in ``params`` but absent from ``grads`` are left untouched
    (no moment update and no weight decay). Decay is decoupled: each updated
    weight is first scaled by ``1 - lr * weight_decay``.
    """
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter block {name!r}")
        if params[name].shape != g.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in block {name!r}", block=name)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        state.steps[name] += 1
        k = state.steps[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if state.weight_decay and (state.decay_biases or not _is_bias(name)):
            p *= 1.0 - state.lr * state.weight_decay
        m_hat = m / (1.0 - b1**k)
        v_hat = v / (1.0 - b2**k)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
