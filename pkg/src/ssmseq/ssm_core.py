"""Linear state-space systems: bilinear discretization, recurrence, kernels.

Everything here is plain double-precision numpy and serves both as the
runtime convolution path and as the oracle against which the structured
fast path is checked.  All functions are pure; the dataclasses are frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidStep,
    Overflow,
    SingularDiscretization,
)

PIVOT_RTOL = 1e-12


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a.real)) or not np.all(np.isfinite(np.imag(a))):
        raise ValueError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True)
class ContinuousSSM:
    """Continuous-time system z'(t) = A z + B u, y(t) = C z + D u."""

    A: np.ndarray  # (M, M), real or complex
    B: np.ndarray  # (M, 1)
    C: np.ndarray  # (1, M)
    D: float | complex = 0.0

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        M = A.shape[0]
        if A.shape != (M, M):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        if B.shape != (M, 1):
            raise DimensionMismatch(f"B must be ({M}, 1), got {B.shape}")
        if C.shape != (1, M):
            raise DimensionMismatch(f"C must be (1, {M}), got {C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def M(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSSM:
    """Discrete system z_k = A_bar z_{k-1} + B_bar u_k, y_k = C_bar z_k + D_bar u_k."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D_bar: float | complex = 0.0
    delta: float = 1.0

    def __post_init__(self):
        A = _as_matrix(self.A_bar, "A_bar")
        B = _as_matrix(self.B_bar, "B_bar")
        C = _as_matrix(self.C_bar, "C_bar")
        M = A.shape[0]
        if A.shape != (M, M) or B.shape != (M, 1) or C.shape != (1, M):
            raise DimensionMismatch(
                f"inconsistent shapes A_bar {A.shape}, B_bar {B.shape}, C_bar {C.shape}"
            )
        if self.delta <= 0:
            raise InvalidStep(f"delta must be positive, got {self.delta}")
        object.__setattr__(self, "A_bar", A)
        object.__setattr__(self, "B_bar", B)
        object.__setattr__(self, "C_bar", C)

    @property
    def M(self) -> int:
        return self.A_bar.shape[0]


@dataclass(frozen=True)
class Kernel:
    """Impulse response of a discrete SSM, values[i] = C_bar A_bar^i B_bar."""

    values: np.ndarray = field()

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1 or v.size < 1:
            raise ValueError(f"kernel must be a non-empty 1-D sequence, got {v.shape}")
        if not np.all(np.isfinite(v.real)) or not np.all(np.isfinite(np.imag(v))):
            raise Overflow("kernel has non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


def _lu_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve mat @ X = rhs by in-place LU with partial pivoting.

    Rejects the system when any pivot falls below PIVOT_RTOL times the
    largest row norm of ``mat``, which is how near-singular resolvents
    are detected deterministically.
    """
    n = mat.shape[0]
    dtype = np.result_type(mat.dtype, rhs.dtype, np.float64)
    a = np.concatenate([mat.astype(dtype), rhs.astype(dtype)], axis=1)
    tol = PIVOT_RTOL * float(np.max(np.sum(np.abs(mat), axis=1)))
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if np.abs(a[piv, col]) < tol:
            raise SingularDiscretization(
                f"resolvent pivot {np.abs(a[piv, col]):.3e} below threshold {tol:.3e}"
            )
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= factors[:, None] * a[col, col:]
    x = np.empty((n, rhs.shape[1]), dtype=dtype)
    for row in range(n - 1, -1, -1):
        x[row] = (a[row, n:] - a[row, row + 1: n] @ x[row + 1:]) / a[row, row]
    return x


def discretize_bilinear(sys: ContinuousSSM, delta: float) -> DiscreteSSM:
    """Bilinear (Tustin) map of a continuous system onto step size delta.

    A_bar = (I - delta/2 A)^-1 (I + delta/2 A),  B_bar = (I - delta/2 A)^-1 delta B.
    """
    if not np.isfinite(delta) or delta <= 0:
        raise InvalidStep(f"delta must be a positive real, got {delta}")
    A, B = sys.A, sys.B
    eye = np.eye(sys.M, dtype=A.dtype)
    left = eye - (delta / 2.0) * A
    rhs = np.concatenate([eye + (delta / 2.0) * A, delta * B], axis=1)
    sol = _lu_solve(left, rhs)
    return DiscreteSSM(
        A_bar=sol[:, : sys.M],
        B_bar=sol[:, sys.M:],
        C_bar=sys.C.astype(sol.dtype),
        D_bar=sys.D,
        delta=float(delta),
    )


def step(sys: DiscreteSSM, z_prev: np.ndarray, u_k) -> tuple[np.ndarray, complex]:
    """One recurrence step; returns (z_k, y_k)."""
    z_prev = np.asarray(z_prev).reshape(-1)
    if z_prev.shape[0] != sys.M:
        raise DimensionMismatch(
            f"state has dimension {z_prev.shape[0]}, system expects {sys.M}"
        )
    z_k = sys.A_bar @ z_prev + sys.B_bar[:, 0] * u_k
    y_k = sys.C_bar[0] @ z_k + sys.D_bar * u_k
    return z_k, y_k


def scan(sys: DiscreteSSM, u: np.ndarray) -> np.ndarray:
    """Run the recurrence from the zero state over an input sequence."""
    u = np.asarray(u).reshape(-1)
    if u.shape[0] < 1:
        raise DimensionMismatch("input sequence must have length >= 1")
    dtype = np.result_type(sys.A_bar.dtype, u.dtype, np.float64)
    z = np.zeros(sys.M, dtype=dtype)
    y = np.empty(u.shape[0], dtype=dtype)
    for k in range(u.shape[0]):
        z, y[k] = step(sys, z, u[k])
    return y


def unroll_kernel(sys: DiscreteSSM, L: int) -> Kernel:
    """Impulse response of length L via iterated matrix-vector products.

    Never forms explicit matrix powers; the running state v_{i+1} = A_bar v_i
    starts at v_0 = B_bar.
    """
    if L < 1:
        raise DimensionMismatch(f"kernel length must be >= 1, got {L}")
    dtype = np.result_type(sys.A_bar.dtype, np.float64)
    v = sys.B_bar[:, 0].astype(dtype)
    c = sys.C_bar[0].astype(dtype)
    values = np.empty(L, dtype=dtype)
    for i in range(L):
        values[i] = c @ v
        v = sys.A_bar @ v
    if not np.all(np.isfinite(values.real)) or not np.all(np.isfinite(values.imag)):
        raise Overflow(f"kernel diverged before length {L}; system unstable")
    if not np.iscomplexobj(sys.A_bar) and not np.iscomplexobj(sys.C_bar):
        values = values.real
    return Kernel(values)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1)).bit_length()


def causal_convolve(kernel: Kernel | np.ndarray, u: np.ndarray, d=0.0) -> np.ndarray:
    """Causal convolution y_k = sum_i kernel[i] u[k-i] + d u_k via FFT.

    The transform length is the next power of two >= 2L - 1; a kernel
    shorter or longer than the input is zero-padded or truncated to L.
    """
    k = kernel.values if isinstance(kernel, Kernel) else np.asarray(kernel)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if np.iscomplexobj(k):
        raise ValueError("causal_convolve expects a real kernel")
    L = u.shape[0]
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if k.shape[0] < L:
        k = np.pad(k, (0, L - k.shape[0]))
    elif k.shape[0] > L:
        k = k[:L]
    n = next_pow2(2 * L - 1)
    y = np.fft.irfft(np.fft.rfft(k, n) * np.fft.rfft(u, n), n)[:L]
    return y + d * u
