"""Small deterministic linear-algebra and initialization helpers.

Everything is dense float64 numpy. Matrices are 2-D ``np.ndarray`` in row-major
order, vectors are 1-D. Randomness comes from ``numpy.random.Generator`` seeded
through :func:`make_rng`; the generator (PCG64) and its normal sampler
(ziggurat) are deterministic for a fixed seed, which is the reproducibility
contract everything downstream relies on.
"""

import numpy as np

FLOAT = np.float64


class DimensionError(ValueError):
    """Raised when an operand's shape does not match the operation."""


def make_rng(seed, *stream) -> np.random.Generator:
    """Deterministic generator for ``seed``; extra ints select substreams."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def as_vector(data) -> np.ndarray:
    v = np.asarray(data, dtype=FLOAT)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def as_matrix(data) -> np.ndarray:
    m = np.asarray(data, dtype=FLOAT)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with explicit shape checking."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise DimensionError(
            f"matvec: matrix has {m.shape[1]} columns but vector has length {v.shape[0]}"
        )
    return m @ v


def outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Outer product a b^T of two non-empty vectors."""
    a = as_vector(a)
    b = as_vector(b)
    if a.size == 0 or b.size == 0:
        raise DimensionError("outer: vectors must be non-empty")
    return np.outer(a, b)


def softmax(v: np.ndarray) -> np.ndarray:
    """Probability vector via the max-subtraction form; sums to 1."""
    v = np.asarray(v, dtype=FLOAT)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v, dtype=FLOAT)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


_ACTIVATIONS = {
    "tanh": np.tanh,
    "sigmoid": sigmoid,
    "relu": lambda v: np.maximum(v, 0.0),
    "softmax": softmax,
}


def activate(kind: str, v: np.ndarray) -> np.ndarray:
    """Apply a named activation (tanh, sigmoid, relu, softmax) elementwise."""
    v = as_vector(v)
    if v.size == 0:
        raise DimensionError("activate: vector must be non-empty")
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(v)


def init_kaiming(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> np.ndarray:
    """Zero-mean normal entries with std sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(rows, cols)).astype(FLOAT, copy=False)


def init_kaiming_vec(rng: np.random.Generator, n: int, fan_in: int) -> np.ndarray:
    """1-D variant of :func:`init_kaiming`, used for bias terms."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=n).astype(FLOAT, copy=False)
