"""Structured kernel machinery: HiPPO init, DPLR fast path, naive oracle.

A channel is a diagonal-plus-low-rank complex system of m states holding
one member of each conjugate pair; real kernels are recovered by doubling
the real part.  The fast path evaluates the truncated generating function
at the roots of unity through Cauchy sums; the naive path materializes the
dense matrix and unrolls the recurrence through :mod:`ssm_core`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Complex, Tensor
from .errors import (
    EigenFailure,
    InvalidDimension,
    InvalidRange,
    PoleError,
    ResonanceFailure,
)
from .ssm_core import ContinuousSSM, Kernel, discretize_bilinear, next_pow2, unroll_kernel

POLE_TOL = 1e-12


@dataclass(frozen=True)
class DPLRParams:
    """One channel: state matrix diag(lam) - p p*, projections b (in), c (out).

    Vectors have length m = M/2 (one entry per conjugate pair of the
    underlying real system of dimension M); ``d`` is the skip gain and
    ``log_delta`` the log step size.
    """

    lam: np.ndarray
    p: np.ndarray
    b: np.ndarray
    c: np.ndarray
    log_delta: float
    d: float

    def __post_init__(self):
        for name in ("lam", "p", "b", "c"):
            v = np.asarray(getattr(self, name), dtype=np.complex128).reshape(-1)
            object.__setattr__(self, name, v)
        m = self.lam.shape[0]
        if not (self.p.shape[0] == self.b.shape[0] == self.c.shape[0] == m):
            raise InvalidDimension("lam, p, b, c must share one length")

    @property
    def m(self) -> int:
        return self.lam.shape[0]

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))


@dataclass(frozen=True)
class S4LayerParams:
    """H independent channel copies sharing one state size."""

    channels: tuple[DPLRParams, ...]

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) < 1:
            raise InvalidDimension("need at least one channel")
        m = channels[0].m
        if any(ch.m != m for ch in channels):
            raise InvalidDimension("all channels must share the state size")
        object.__setattr__(self, "channels", channels)

    @property
    def H(self) -> int:
        return len(self.channels)

    @property
    def m(self) -> int:
        return self.channels[0].m


def hippo_legs(M: int) -> np.ndarray:
    """The scaled-Legendre memory transition matrix (M x M, real).

    Entry (n, k): -sqrt(2n+1) sqrt(2k+1) below the diagonal, -(n+1) on it,
    zero above.
    """
    if M < 2 or M % 2 != 0:
        raise InvalidDimension(f"state dimension must be even and >= 2, got {M}")
    n = np.arange(M, dtype=np.float64)
    root = np.sqrt(2.0 * n + 1.0)
    A = -np.tril(np.outer(root, root), -1)
    A -= np.diag(n + 1.0)
    return A


def nplr_decompose(M: int, return_basis: bool = False):
    """Normal-plus-low-rank split of hippo_legs(M), reduced to M/2 modes.

    Adding the rank-1 term p p^T makes the matrix normal (skew plus -1/2 I),
    so a Hermitian eigen-solve of the skew part yields a unitary basis; one
    eigenvalue of each conjugate pair is kept (positive imaginary part).
    Returns (lam, p, b) and optionally the retained basis columns.
    """
    A = hippo_legs(M)
    n = np.arange(M, dtype=np.float64)
    p = np.sqrt(n + 0.5)
    b = np.sqrt(2.0 * n + 1.0)
    S = A + np.outer(p, p)
    re = float(np.mean(np.diag(S)))  # exactly -1/2 for this construction
    skew = S - re * np.eye(M)
    try:
        w_im, V = np.linalg.eigh(-1j * skew)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(f"eigen-solve failed for M={M}") from exc
    idx = np.where(w_im > 0)[0]
    if idx.shape[0] != M // 2:
        raise EigenFailure(f"expected {M // 2} conjugate pairs, found {idx.shape[0]}")
    lam = re + 1j * w_im[idx]
    basis = V[:, idx]
    p_half = basis.conj().T @ p
    b_half = basis.conj().T @ b
    if return_basis:
        return lam, p_half, b_half, basis
    return lam, p_half, b_half


def reconstruct_dense(lam: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Materialize diag(lam) - p p* as a dense complex matrix."""
    lam = np.asarray(lam, dtype=np.complex128).reshape(-1)
    p = np.asarray(p, dtype=np.complex128).reshape(-1)
    if lam.shape != p.shape:
        raise InvalidDimension(f"lengths differ: {lam.shape[0]} vs {p.shape[0]}")
    return np.diag(lam) - np.outer(p, p.conj())


def init_s4_params(
    H: int,
    M: int,
    delta_min: float = 1e-3,
    delta_max: float = 1e-1,
    seed: int = 0,
) -> S4LayerParams:
    """H channels sharing the memory init, with sampled c, step size and skip.

    lam, p, b come from nplr_decompose(M) and are copied to every channel;
    c is i.i.d. standard complex normal, log step sizes are log-uniform over
    [delta_min, delta_max], d is standard normal.  Deterministic given seed.
    """
    if H < 1:
        raise InvalidDimension(f"need H >= 1 channels, got {H}")
    if not (0 < delta_min < delta_max):
        raise InvalidRange(f"need 0 < delta_min < delta_max, got [{delta_min}, {delta_max}]")
    lam, p, b = nplr_decompose(M)
    rng = np.random.default_rng(seed)
    m = lam.shape[0]
    channels = []
    for _ in range(H):
        c = np.sqrt(0.5) * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
        log_delta = float(rng.uniform(np.log(delta_min), np.log(delta_max)))
        d = float(rng.standard_normal())
        channels.append(DPLRParams(lam, p, b, c, log_delta, d))
    return S4LayerParams(tuple(channels))


def cauchy_dot(v: np.ndarray, omega: complex, lam: np.ndarray) -> complex:
    """Weighted pole sum sum_m v_m / (omega - lam_m)."""
    v = np.asarray(v, dtype=np.complex128).reshape(-1)
    lam = np.asarray(lam, dtype=np.complex128).reshape(-1)
    if v.shape != lam.shape:
        raise InvalidDimension(f"lengths differ: {v.shape[0]} vs {lam.shape[0]}")
    den = omega - lam
    closest = float(np.min(np.abs(den)))
    if closest < POLE_TOL:
        raise PoleError(f"evaluation point within {closest:.3e} of a pole")
    return complex(np.sum(v / den))


def dplr_kernel_naive(params: DPLRParams, L: int) -> Kernel:
    """Oracle kernel: materialize, discretize, unroll, double the real part."""
    A = reconstruct_dense(params.lam, params.p)
    sys = ContinuousSSM(A, params.b[:, None], params.c[None, :], D=0.0)
    disc = discretize_bilinear(sys, params.delta)
    complex_kernel = unroll_kernel(disc, L)
    return Kernel(2.0 * np.real(complex_kernel.values))


def _khat_tensors(
    lam: Complex, p: Complex, b: Complex, c: Complex, log_delta: Tensor, Lp: int
) -> Complex:
    """Truncated generating function of each channel at the Lp-th roots of unity.

    Parameters are stacked (H, m); the result is (H, Lp).  The rank-1
    resolvent correction is applied with the Woodbury identity, reducing
    the evaluation to four Cauchy sums per channel; the length-Lp
    truncation is folded into a rescaled output projection.
    """
    H, m = lam.shape
    f64 = np.float64
    lam = Complex(ad.cast(lam.re, f64), ad.cast(lam.im, f64))
    p = Complex(ad.cast(p.re, f64), ad.cast(p.im, f64))
    b = Complex(ad.cast(b.re, f64), ad.cast(b.im, f64))
    c = Complex(ad.cast(c.re, f64), ad.cast(c.im, f64))
    log_delta = ad.cast(log_delta, f64)

    delta = ad.texp(log_delta)
    two_over_delta = ad.reshape(ad.div(2.0, delta), (H, 1))

    # bilinear-discretized state matrix via the rank-1 structure
    d0 = Complex(two_over_delta + lam.re, lam.im)
    pcol = p.reshape((H, m, 1))
    prow_c = p.conj().reshape((H, 1, m))
    outer_pp = ad.cmatmul(pcol, prow_c)
    A0 = Complex(ad.diag_embed(d0.re), ad.diag_embed(d0.im)) - outer_pp
    d1 = Complex(two_over_delta - lam.re, ad.neg(lam.im)).reciprocal()
    dp = d1 * p
    pd = p.conj() * d1
    wden = (p.conj() * d1 * p).sum(axis=-1, keepdims=True) + 1.0
    corr = ad.cmatmul(dp.reshape((H, m, 1)), pd.reshape((H, 1, m))) * wden.reciprocal().reshape((H, 1, 1))
    A1 = Complex(ad.diag_embed(d1.re), ad.diag_embed(d1.im)) - corr
    a_bar = ad.cmatmul(A1, A0)

    # fold the truncation into the output projection: ct = c (I - A_bar^Lp)
    a_pow = ad.cmatpow(a_bar, Lp)
    crow = c.reshape((H, 1, m))
    ct = (crow - ad.cmatmul(crow, a_pow)).reshape((H, m))

    # frequency grid (constants) and the bilinear fold g(z)
    w = np.exp(-2j * np.pi * np.arange(Lp) / Lp)
    ratio = (1.0 - w) / (1.0 + w)
    g = Complex(
        ad.mul(two_over_delta, ratio.real[None, :]),
        ad.mul(two_over_delta, ratio.imag[None, :]),
    )

    den = Complex(
        ad.reshape(g.re, (H, Lp, 1)) - ad.reshape(lam.re, (H, 1, m)),
        ad.reshape(g.im, (H, Lp, 1)) - ad.reshape(lam.im, (H, 1, m)),
    )
    closest = float(np.min(den.abs2().value))
    if closest < POLE_TOL**2:
        raise ResonanceFailure(
            f"a state pole lies within {np.sqrt(closest):.3e} of the evaluation grid"
        )
    r = den.reciprocal()

    def csum(v: Complex) -> Complex:
        return (v.reshape((H, 1, m)) * r).sum(axis=-1)

    k00 = csum(ct * b)
    k01 = csum(ct * p)
    k10 = csum(p.conj() * b)
    k11 = csum(p.conj() * p)
    woodbury = k00 - k01 * k10 * (k11 + 1.0).reciprocal()
    cfac = 2.0 / (1.0 + w)
    return woodbury * cfac[None, :]


def dplr_kernel_tensors(
    lam: Complex, p: Complex, b: Complex, c: Complex, log_delta: Tensor, L: int
) -> Tensor:
    """Differentiable fast kernels for stacked channels: (H, m) -> (H, L) real.

    The evaluation length is padded to the next power of two and the
    result truncated, which is exact because the generating function is
    length-corrected.  Internal arithmetic is double precision; the output
    is cast back to the dtype of c.
    """
    if L < 1:
        raise InvalidDimension(f"kernel length must be >= 1, got {L}")
    out_dtype = c.re.dtype
    Lp = next_pow2(L)
    khat = _khat_tensors(lam, p, b, c, log_delta, Lp)
    kern = ad.ifft_real_sym(khat.re, khat.im)
    if Lp != L:
        kern = ad.slice_last(kern, 0, L)
    return ad.cast(kern, out_dtype)


def _stack_constant(params: DPLRParams) -> tuple[Complex, Complex, Complex, Complex, Tensor]:
    to_c = lambda z: Complex.from_numpy(np.asarray(z, dtype=np.complex128)[None, :])
    return (
        to_c(params.lam),
        to_c(params.p),
        to_c(params.b),
        to_c(params.c),
        Tensor(np.asarray([params.log_delta], dtype=np.float64)),
    )


def dplr_kernel_fast(params: DPLRParams, L: int) -> Kernel:
    """Fast kernel via the frequency-domain path; matches the naive oracle."""
    lam, p, b, c, log_delta = _stack_constant(params)
    kern = dplr_kernel_tensors(lam, p, b, c, log_delta, L)
    return Kernel(kern.value[0])


def dplr_kernel_freq(params: DPLRParams, L: int) -> np.ndarray:
    """Hermitian-symmetrized frequency samples of the fast kernel (length padded
    to a power of two); their plain inverse FFT is the kernel, so the imaginary
    residue of that transform measures conjugate-pair consistency."""
    lam, p, b, c, log_delta = _stack_constant(params)
    Lp = next_pow2(L)
    khat = _khat_tensors(lam, p, b, c, log_delta, Lp)
    z = khat.numpy()[0]
    j = np.arange(Lp)
    return z + np.conj(z[(-j) % Lp])
