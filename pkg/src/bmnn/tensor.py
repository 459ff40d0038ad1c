"""Dense float64 array helpers used by the layers and the least-squares oracle.

Arrays are plain ``numpy.ndarray`` values in float64. Activations keep the
batch axis right after the feature axis: ``(features, batch)`` for vectors
and ``(channels, batch, height, width)`` for images.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ShapeError(ValueError):
    """A geometry does not produce an integral output size."""


class SingularSystemError(ArithmeticError):
    """A linear system has no (numerically) unique solution."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared in a value that must stay finite."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _as_matrix(x, name: str) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be rank 2, got shape {x.shape}")
    return x


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def gauss_solve(M: np.ndarray, R: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Solve ``M X = R`` by Gaussian elimination with partial pivoting.

    Raises SingularSystemError when a pivot falls below ``rel_tol`` times the
    largest absolute entry of ``M``.
    """
    M = np.array(M, dtype=np.float64)
    R = np.array(R, dtype=np.float64)
    vector_rhs = R.ndim == 1
    if vector_rhs:
        R = R[:, None]
    n = M.shape[0]
    if M.shape != (n, n) or R.shape[0] != n:
        raise DimensionError(f"bad system shapes {M.shape} and {R.shape}")
    scale = np.abs(M).max() if M.size else 0.0
    if scale == 0.0:
        raise SingularSystemError("system matrix is all zeros")
    threshold = rel_tol * scale

    for col in range(n):
        p = col + int(np.argmax(np.abs(M[col:, col])))
        if abs(M[p, col]) < threshold:
            raise SingularSystemError(
                f"pivot {abs(M[p, col]):.3e} in column {col} is below {threshold:.3e}"
            )
        if p != col:
            M[[col, p]] = M[[p, col]]
            R[[col, p]] = R[[p, col]]
        factors = M[col + 1 :, col] / M[col, col]
        M[col + 1 :, col:] -= np.outer(factors, M[col, col:])
        R[col + 1 :] -= np.outer(factors, R[col])

    X = np.empty_like(R)
    for row in range(n - 1, -1, -1):
        X[row] = (R[row] - M[row, row + 1 :] @ X[row + 1 :]) / M[row, row]
    return X[:, 0] if vector_rhs else X


def solve_least_squares(A, B, ridge: float = 0.0) -> np.ndarray:
    """Minimize ``||A X - B||_F^2 + ridge * ||X||_F^2`` through the normal equations."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f"A has {A.shape[0]} rows but B has {B.shape[0]}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    gram = A.T @ A
    if ridge:
        gram = gram + ridge * np.eye(gram.shape[0])
    return gauss_solve(gram, A.T @ B)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"input size {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} does not give an integral output size"
        )
    return span // stride + 1


def _pair(k) -> tuple[int, int]:
    if isinstance(k, int):
        return k, k
    kh, kw = k
    return int(kh), int(kw)


def im2col(x, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Rearrange convolution patches into columns.

    ``x`` is ``(C, H, W)`` or ``(C, N, H, W)``. The result has shape
    ``(C*kh*kw, N*q1*q2)``; rows follow ``(channel, ky, kx)`` and columns
    follow ``(sample, oy, ox)``, so a weight of shape ``(n, C, kh, kw)``
    reshaped to ``(n, C*kh*kw)`` multiplies it directly.
    """
    x = as_tensor(x)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise DimensionError(f"im2col expects a 3-d or 4-d input, got {x.shape}")
    kh, kw = _pair(kernel)
    c, n, h, w = x.shape
    q1 = conv_output_size(h, kh, stride, padding)
    q2 = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: (C, N, q1, q2, kh, kw)
    return windows.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * q1 * q2)


def col2im(cols, input_shape, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col`; ``input_shape`` is ``(C, H, W)`` or ``(C, N, H, W)``."""
    cols = as_tensor(cols)
    single = len(input_shape) == 3
    c, n, h, w = (input_shape[0], 1, *input_shape[1:]) if single else tuple(input_shape)
    kh, kw = _pair(kernel)
    q1 = conv_output_size(h, kh, stride, padding)
    q2 = conv_output_size(w, kw, stride, padding)
    expected = (c * kh * kw, n * q1 * q2)
    if cols.shape != expected:
        raise DimensionError(f"cols has shape {cols.shape}, expected {expected}")
    patches = cols.reshape(c, kh, kw, n, q1, q2)
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * q1 : stride, j : j + stride * q2 : stride] += patches[
                :, i, j
            ]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out[:, 0] if single else out


def mean_outer(A) -> np.ndarray:
    """Return ``(1/batch) A A^T`` for ``A`` of shape ``(dim, batch)``."""
    A = _as_matrix(A, "A")
    if A.shape[1] < 1:
        raise DimensionError("mean_outer needs at least one column")
    M = (A @ A.T) / A.shape[1]
    # exact symmetry regardless of BLAS summation order
    return np.triu(M) + np.triu(M, 1).T
