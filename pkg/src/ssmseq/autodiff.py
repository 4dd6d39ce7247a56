"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors wrap ndarrays and record a backward closure per op; calling
``backward()`` on a scalar walks the graph in reverse topological order.
Broadcasting follows numpy semantics, with gradients summed back to the
operand shapes.  Complex quantities are carried as (re, im) pairs of real
tensors so the chain rule never needs Wirtinger calculus.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from .ssm_core import next_pow2


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph holding an ndarray value."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjps = ()

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if parent.requires_grad:
                    parent._accumulate(vjp(g))

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(value, parents, vjps) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjps = vjps
    return out


def add(a, b) -> Tensor:
    # constants are captured by value, not turned into graph nodes
    if not isinstance(b, Tensor):
        a = _wrap(a)
        return _node(a.value + b, (a,), (lambda g: _unbroadcast(g, a.shape),))
    if not isinstance(a, Tensor):
        return add(b, a)
    return _node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.value, (a,), (lambda g: -g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _wrap(a)
        return _node(a.value * b, (a,), (lambda g: _unbroadcast(g * b, a.shape),))
    if not isinstance(a, Tensor):
        return mul(b, a)
    return _node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b if np.isscalar(b) else 1.0 / np.asarray(b))
    bb = b.value
    if not isinstance(a, Tensor):
        return _node(
            a / bb,
            (b,),
            (lambda g: _unbroadcast(-g * a / (bb * bb), b.shape),),
        )
    return _node(
        a.value / bb,
        (a, b),
        (
            lambda g: _unbroadcast(g / bb, a.shape),
            lambda g: _unbroadcast(-g * a.value / (bb * bb), b.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    return _node(
        a.value ** exponent,
        (a,),
        (lambda g: g * exponent * a.value ** (exponent - 1),),
    )


def texp(a) -> Tensor:
    a = _wrap(a)
    out_val = np.exp(a.value)
    return _node(out_val, (a,), (lambda g: g * out_val,))


def tlog(a) -> Tensor:
    a = _wrap(a)
    return _node(np.log(a.value), (a,), (lambda g: g / a.value,))


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    out_val = np.sqrt(a.value)
    return _node(out_val, (a,), (lambda g: g * (0.5 / out_val),))


def relu(a) -> Tensor:
    a = _wrap(a)
    keep = a.value > 0
    return _node(np.where(keep, a.value, 0.0).astype(a.dtype), (a,), (lambda g: g * keep,))


def terf(a) -> Tensor:
    a = _wrap(a)
    scale = np.asarray(2.0 / np.sqrt(np.pi), dtype=a.dtype)
    return _node(
        _erf(a.value),
        (a,),
        (lambda g: g * scale * np.exp(-a.value * a.value),),
    )


def gelu(a) -> Tensor:
    a = _wrap(a)
    inv_sqrt2 = np.asarray(1.0 / np.sqrt(2.0), dtype=a.dtype)
    return mul(mul(a, 0.5), add(1.0, terf(mul(a, inv_sqrt2))))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return _node(
        a.value @ b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape),
            lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape),
        ),
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _node(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _node(
        np.swapaxes(a.value, ax1, ax2),
        (a,),
        (lambda g: np.swapaxes(g, ax1, ax2),),
    )


def pad_last(a, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    a = _wrap(a)
    if left == 0 and right == 0:
        return a
    width = [(0, 0)] * (a.value.ndim - 1) + [(left, right)]
    T = a.shape[-1]
    return _node(
        np.pad(a.value, width),
        (a,),
        (lambda g: g[..., left: left + T],),
    )


def slice_last(a, start: int, stop: int) -> Tensor:
    """Slice the last axis; gradient scatters back into a zero array."""
    a = _wrap(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[..., start:stop] = g
        return out

    return _node(a.value[..., start:stop], (a,), (vjp,))


def diag_embed(v) -> Tensor:
    """(..., m) -> (..., m, m) with v on the diagonal."""
    v = _wrap(v)
    m = v.shape[-1]
    out = np.zeros(v.shape + (m,), dtype=v.dtype)
    np.einsum("...ii->...i", out)[...] = v.value
    return _node(out, (v,), (lambda g: np.einsum("...ii->...i", g).copy(),))


def cast(a, dtype) -> Tensor:
    a = _wrap(a)
    if a.value.dtype == dtype:
        return a
    return _node(
        a.value.astype(dtype),
        (a,),
        (lambda g: g.astype(a.dtype),),
    )


def fft_causal_conv(k, u) -> Tensor:
    """Causal convolution along the last axis, y_t = sum_{i<=t} k_i u_{t-i}.

    Kernel and input must share the last-axis length L; leading axes
    broadcast (e.g. per-channel kernels (H, L) against a batch (B, H, L)).
    """
    k, u = _wrap(k), _wrap(u)
    L = u.shape[-1]
    if k.shape[-1] != L:
        raise ValueError(f"kernel length {k.shape[-1]} != input length {L}")
    n = next_pow2(2 * L - 1)
    kf = np.fft.rfft(k.value, n)
    uf = np.fft.rfft(u.value, n)
    out = np.fft.irfft(kf * uf, n)[..., :L].astype(u.dtype)

    def vjp_k(g):
        gf = np.fft.rfft(g, n)
        full = np.fft.irfft(gf * np.conj(uf), n)[..., :L]
        return _unbroadcast(full, k.shape).astype(k.dtype)

    def vjp_u(g):
        gf = np.fft.rfft(g, n)
        full = np.fft.irfft(gf * np.conj(kf), n)[..., :L]
        return _unbroadcast(full, u.shape).astype(u.dtype)

    return _node(out, (k, u), (vjp_k, vjp_u))


def ifft_real_sym(fre, fim) -> Tensor:
    """Real inverse DFT of a Hermitian-symmetrized spectrum.

    Treats (fre, fim) as one half of a conjugate-paired spectrum and
    returns 2 Re(ifft(fre + i fim)) along the last axis.
    """
    fre, fim = _wrap(fre), _wrap(fim)
    L = fre.shape[-1]
    z = fre.value + 1j * fim.value
    out = (2.0 * np.fft.ifft(z).real).astype(fre.dtype)

    def vjp_re(g):
        return ((2.0 / L) * np.fft.fft(g).real).astype(fre.dtype)

    def vjp_im(g):
        return ((2.0 / L) * np.fft.fft(g).imag).astype(fim.dtype)

    return _node(out, (fre, fim), (vjp_re, vjp_im))


class Complex:
    """Complex tensor as a (re, im) pair of real tensors."""

    __slots__ = ("re", "im")

    def __init__(self, re: Tensor, im: Tensor):
        self.re = _wrap(re)
        self.im = _wrap(im)

    @staticmethod
    def from_numpy(z: np.ndarray, requires_grad: bool = False) -> "Complex":
        z = np.asarray(z)
        return Complex(
            Tensor(np.ascontiguousarray(z.real), requires_grad),
            Tensor(np.ascontiguousarray(z.imag), requires_grad),
        )

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.value + 1j * self.im.value

    def conj(self) -> "Complex":
        return Complex(self.re, neg(self.im))

    def __add__(self, other):
        other = _as_complex(other)
        return Complex(add(self.re, other.re), add(self.im, other.im))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_complex(other)
        return Complex(self.re - other.re, self.im - other.im)

    def __rsub__(self, other):
        return _as_complex(other) - self

    def __mul__(self, other):
        other = _as_complex(other)
        return Complex(
            mul(self.re, other.re) - mul(self.im, other.im),
            mul(self.re, other.im) + mul(self.im, other.re),
        )

    __rmul__ = __mul__

    def reciprocal(self) -> "Complex":
        d = mul(self.re, self.re) + mul(self.im, self.im)
        return Complex(div(self.re, d), neg(div(self.im, d)))

    def __truediv__(self, other):
        return self * _as_complex(other).reciprocal()

    def abs2(self) -> Tensor:
        return mul(self.re, self.re) + mul(self.im, self.im)

    def sum(self, axis=None, keepdims=False) -> "Complex":
        return Complex(
            tsum(self.re, axis=axis, keepdims=keepdims),
            tsum(self.im, axis=axis, keepdims=keepdims),
        )

    def reshape(self, shape) -> "Complex":
        return Complex(reshape(self.re, shape), reshape(self.im, shape))


def _as_complex(x) -> Complex:
    if isinstance(x, Complex):
        return x
    if isinstance(x, Tensor):
        return Complex(x, Tensor(np.zeros_like(x.value)))
    z = np.asarray(x)
    if np.iscomplexobj(z):
        return Complex.from_numpy(z)
    return Complex(Tensor(z), Tensor(np.zeros_like(z)))


def cmatmul(a: Complex, b: Complex) -> Complex:
    """Complex matrix product via four real matmuls."""
    return Complex(
        matmul(a.re, b.re) - matmul(a.im, b.im),
        matmul(a.re, b.im) + matmul(a.im, b.re),
    )


def cmatpow(a: Complex, n: int) -> Complex:
    """Integer matrix power by square-and-multiply (differentiable)."""
    if n < 1:
        raise ValueError("cmatpow requires n >= 1")
    result = None
    base = a
    while n:
        if n & 1:
            result = base if result is None else cmatmul(result, base)
        n >>= 1
        if n:
            base = cmatmul(base, base)
    return result
