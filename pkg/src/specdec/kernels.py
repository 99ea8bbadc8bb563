"""Dense float32 numeric kernels shared by the model, speculator and trainer.

Two matmul variants are exposed. `matmul` accumulates strictly left-to-right
over the contraction axis, so a row's result depends only on that row and the
right operand -- never on how many other rows share the call. Decode paths use
it exclusively; that is what makes greedy speculative decoding reproduce the
plain greedy token stream bit for bit. `matmul_fast` delegates to BLAS for
training throughput, where results only need to be stable run-to-run.
"""

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or degenerate shapes."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order over k.

    Each output element is accumulated sequentially over the contraction
    axis, so results are bit-identical regardless of how rows are batched
    and regardless of exact-zero entries appended to a weight row.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.einsum("ik,kn->in", a, b, optimize=False)


def matmul3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stacked matmul over a leading axis, same summation order as `matmul`."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"matmul3 expects 3-D operands, got {a.shape} x {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"incompatible stacked shapes: {a.shape} x {b.shape}")
    return np.einsum("hik,hkn->hin", a, b, optimize=False)


def matmul_fast(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """BLAS-backed matrix product for training hot paths."""
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; rows sum to 1 and argmax is preserved."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
              eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layernorm over an empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean(np.square(x - mu), axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + bias


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(x: np.ndarray) -> np.ndarray:
    """Gaussian error linear unit, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of the tanh-approximated GeLU, for backprop."""
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def embedding(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Gather rows of an embedding table by token id."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]")
    return table[ids]
