"""Differentiable building blocks and the assembled sequence classifier.

Architecture: a 1D conv encoder over ROI channels (conv + batchnorm + relu
per block), a cascade of structured state-space blocks (per-channel causal
convolution with a learned kernel, GELU, layer norm over channels,
position-wise mixing, residual), then masked temporal average pooling,
dropout and a linear head.

All forwards are internally batched over (B, C, T) tensors; the public
single-sample helpers wrap a batch of one.  Masks mark valid timepoints
and padded positions are re-zeroed after every block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Complex, Tensor
from .errors import CheckpointError, EmptyMask, ShapeMismatch
from .s4_kernel import dplr_kernel_tensors, init_s4_params

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"SSQ1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the fixed baseline."""

    n_rois: int
    d_model: int = 256
    k: int = 5
    K_conv: int = 1
    K_S4: int = 2
    d_state: int = 256
    dropout: float = 0.3
    n_classes: int = 2

    def __post_init__(self):
        for name in ("n_rois", "d_model", "k", "d_state", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.K_conv < 0 or self.K_S4 < 0 or self.K_conv + self.K_S4 < 1:
            raise ValueError("need at least one conv or state-space block")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


class Conv1dBlock:
    """Same-length 1D convolution + masked batch norm + relu."""

    def __init__(self, d_in: int, d_out: int, k: int, rng: np.random.Generator, dtype):
        self.d_in, self.d_out, self.k = d_in, d_out, k
        scale = np.sqrt(2.0 / (d_in * k))
        self.weight = Tensor(
            (scale * rng.standard_normal((d_out, d_in, k))).astype(dtype), True
        )
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), True)
        self.bn_gamma = Tensor(np.ones(d_out, dtype=dtype), True)
        self.bn_beta = Tensor(np.zeros(d_out, dtype=dtype), True)
        self.bn_mean = np.zeros(d_out, dtype=dtype)
        self.bn_var = np.ones(d_out, dtype=dtype)

    def apply(self, x: Tensor, mask: np.ndarray, mode: str) -> Tensor:
        B, d_in, T = x.shape
        if d_in != self.d_in:
            raise ShapeMismatch(f"block expects {self.d_in} input channels, got {d_in}")
        left = (self.k - 1) // 2
        xp = ad.pad_last(x, left, self.k - 1 - left)
        y = None
        for tap in range(self.k):
            w_tap = ad.reshape(
                ad.slice_last(self.weight, tap, tap + 1), (self.d_out, self.d_in)
            )
            term = ad.matmul(w_tap, ad.slice_last(xp, tap, tap + T))
            y = term if y is None else y + term
        y = y + ad.reshape(self.bias, (self.d_out, 1))

        if mode == "train":
            cnt = float(mask.sum())
            ym = ad.mul(y, mask)
            mean = ad.mul(ad.tsum(ym, axis=(0, 2), keepdims=True), 1.0 / cnt)
            ex2 = ad.mul(ad.tsum(ad.mul(ad.mul(y, y), mask), axis=(0, 2), keepdims=True), 1.0 / cnt)
            var = ex2 - mean * mean
            bessel = cnt / (cnt - 1.0) if cnt > 1 else 1.0
            self.bn_mean = (
                (1.0 - BN_MOMENTUM) * self.bn_mean + BN_MOMENTUM * mean.value.reshape(-1)
            ).astype(self.bn_mean.dtype)
            self.bn_var = (
                (1.0 - BN_MOMENTUM) * self.bn_var
                + BN_MOMENTUM * bessel * var.value.reshape(-1)
            ).astype(self.bn_var.dtype)
        else:
            mean = Tensor(self.bn_mean.reshape(1, self.d_out, 1))
            var = Tensor(self.bn_var.reshape(1, self.d_out, 1))
        xn = (y - mean) / ad.tsqrt(var + BN_EPS)
        xh = ad.reshape(self.bn_gamma, (self.d_out, 1)) * xn + ad.reshape(
            self.bn_beta, (self.d_out, 1)
        )
        return ad.mul(ad.relu(xh), mask)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.bn_gamma", self.bn_gamma
        yield f"{prefix}.bn_beta", self.bn_beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.bn_mean", lambda v=None: self._buffer("bn_mean", v)
        yield f"{prefix}.bn_var", lambda v=None: self._buffer("bn_var", v)

    def _buffer(self, name, value):
        if value is not None:
            setattr(self, name, value.astype(getattr(self, name).dtype))
        return getattr(self, name)


class S4Block:
    """H state-space channel copies + GELU + layer norm + mixing + residual."""

    def __init__(self, H: int, d_state: int, rng: np.random.Generator, dtype):
        self.H, self.m = H, d_state
        layer = init_s4_params(H, 2 * d_state, seed=int(rng.integers(2**31)))
        stack = lambda attr: np.stack([getattr(ch, attr) for ch in layer.channels])
        as_pair = lambda z: Complex(
            Tensor(np.ascontiguousarray(z.real).astype(dtype), True),
            Tensor(np.ascontiguousarray(z.imag).astype(dtype), True),
        )
        self.lam = as_pair(stack("lam"))
        self.p = as_pair(stack("p"))
        self.b = as_pair(stack("b"))
        self.c = as_pair(stack("c"))
        self.log_delta = Tensor(
            np.array([ch.log_delta for ch in layer.channels], dtype=dtype), True
        )
        self.d = Tensor(np.array([ch.d for ch in layer.channels], dtype=dtype), True)
        scale = np.sqrt(1.0 / H)
        self.mix_w = Tensor((scale * rng.standard_normal((H, H))).astype(dtype), True)
        self.mix_b = Tensor(np.zeros(H, dtype=dtype), True)
        self.ln_gamma = Tensor(np.ones(H, dtype=dtype), True)
        self.ln_beta = Tensor(np.zeros(H, dtype=dtype), True)

    def kernels(self, T: int) -> Tensor:
        return dplr_kernel_tensors(self.lam, self.p, self.b, self.c, self.log_delta, T)

    def apply(self, x: Tensor, mask: np.ndarray, mode: str) -> Tensor:
        B, H, T = x.shape
        if H != self.H:
            raise ShapeMismatch(f"block expects {self.H} channels, got {H}")
        kern = self.kernels(T)
        y = ad.fft_causal_conv(kern, x) + ad.reshape(self.d, (H, 1)) * x
        y = ad.gelu(y)
        mu = ad.tmean(y, axis=1, keepdims=True)
        yc = y - mu
        var = ad.tmean(ad.mul(yc, yc), axis=1, keepdims=True)
        yn = yc / ad.tsqrt(ad.add(var, LN_EPS))
        yn = ad.reshape(self.ln_gamma, (H, 1)) * yn + ad.reshape(self.ln_beta, (H, 1))
        z = ad.matmul(self.mix_w, yn) + ad.reshape(self.mix_b, (H, 1))
        return ad.mul(z + x, mask)

    def named_params(self, prefix: str):
        yield f"{prefix}.lam_re", self.lam.re
        yield f"{prefix}.lam_im", self.lam.im
        yield f"{prefix}.p_re", self.p.re
        yield f"{prefix}.p_im", self.p.im
        yield f"{prefix}.b_re", self.b.re
        yield f"{prefix}.b_im", self.b.im
        yield f"{prefix}.c_re", self.c.re
        yield f"{prefix}.c_im", self.c.im
        yield f"{prefix}.log_delta", self.log_delta
        yield f"{prefix}.d", self.d
        yield f"{prefix}.mix_w", self.mix_w
        yield f"{prefix}.mix_b", self.mix_b
        yield f"{prefix}.ln_gamma", self.ln_gamma
        yield f"{prefix}.ln_beta", self.ln_beta


class Model:
    """The full classifier; construction is deterministic given the seed."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        cfg = config
        self.conv_blocks: list[Conv1dBlock] = []
        d_in = cfg.n_rois
        for _ in range(cfg.K_conv):
            self.conv_blocks.append(Conv1dBlock(d_in, cfg.d_model, cfg.k, rng, self.dtype))
            d_in = cfg.d_model
        if cfg.K_conv == 0:
            # width-matching pointwise projection so the state-space stack
            # keeps d_model channels when the encoder is ablated
            scale = np.sqrt(1.0 / cfg.n_rois)
            self.proj_w = Tensor(
                (scale * rng.standard_normal((cfg.d_model, cfg.n_rois))).astype(self.dtype), True
            )
            self.proj_b = Tensor(np.zeros(cfg.d_model, dtype=self.dtype), True)
        else:
            self.proj_w = self.proj_b = None
        self.s4_blocks = [
            S4Block(cfg.d_model, cfg.d_state, rng, self.dtype) for _ in range(cfg.K_S4)
        ]
        scale = np.sqrt(1.0 / cfg.d_model)
        self.head_w = Tensor(
            (scale * rng.standard_normal((cfg.d_model, cfg.n_classes))).astype(self.dtype), True
        )
        self.head_b = Tensor(np.zeros(cfg.n_classes, dtype=self.dtype), True)

    def named_parameters(self):
        for i, blk in enumerate(self.conv_blocks):
            yield from blk.named_params(f"conv{i}")
        if self.proj_w is not None:
            yield "proj.weight", self.proj_w
            yield "proj.bias", self.proj_b
        for i, blk in enumerate(self.s4_blocks):
            yield from blk.named_params(f"s4_{i}")
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_buffers(self):
        for i, blk in enumerate(self.conv_blocks):
            for name, accessor in blk.named_buffers(f"conv{i}"):
                yield name, accessor

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def forward(
        self,
        x: np.ndarray,
        mask: np.ndarray | None = None,
        mode: str = "eval",
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Batched forward: x (B, n_rois, T), mask (B, T) -> logits (B, n_classes)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1] != self.config.n_rois:
            raise ShapeMismatch(
                f"expected input (B, {self.config.n_rois}, T), got {x.shape}"
            )
        B, _, T = x.shape
        if mask is None:
            mask = np.ones((B, T))
        mask = np.asarray(mask)
        if mask.shape != (B, T):
            raise ShapeMismatch(f"mask shape {mask.shape} does not match (B={B}, T={T})")
        counts = mask.sum(axis=1)
        if np.any(counts < 1):
            raise EmptyMask("every sample needs at least one valid timepoint")
        m3 = mask.astype(self.dtype)[:, None, :]
        h = Tensor((x * m3).astype(self.dtype))
        if self.proj_w is not None:
            h = ad.mul(
                ad.matmul(self.proj_w, h) + ad.reshape(self.proj_b, (-1, 1)), m3
            )
        for blk in self.conv_blocks:
            h = blk.apply(h, m3, mode)
        for blk in self.s4_blocks:
            h = blk.apply(h, m3, mode)
        pooled = _masked_time_mean(h, m3)
        if mode == "train" and self.config.dropout > 0.0:
            if dropout_rng is None:
                raise ValueError("train mode with dropout needs a dropout_rng")
            keep = (
                dropout_rng.random(pooled.shape) >= self.config.dropout
            ).astype(self.dtype) / self.dtype(1.0 - self.config.dropout)
            pooled = ad.mul(pooled, keep)
        return ad.matmul(pooled, self.head_w) + self.head_b


def _masked_time_mean(x: Tensor, m3: np.ndarray) -> Tensor:
    counts = m3.sum(axis=2)  # (B, 1)
    return ad.mul(ad.tsum(ad.mul(x, m3), axis=2), (1.0 / counts).astype(m3.dtype))


def _single(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a (channels, T) sample, got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[1], dtype=bool)
    mask = np.asarray(mask).reshape(1, -1)
    if mask.shape[1] != x.shape[1]:
        raise ShapeMismatch("mask length does not match the sequence")
    return x[None], mask


def conv_block_forward(
    block: Conv1dBlock, x: np.ndarray, mask=None, mode: str = "eval"
) -> np.ndarray:
    """Single-sample conv block: (d_in, T) -> (d_out, T)."""
    xb, mb = _single(x, mask)
    return block.apply(Tensor(xb.astype(block.weight.dtype)), mb[:, None, :].astype(block.weight.dtype), mode).value[0]


def s4_block_forward(
    block: S4Block, x: np.ndarray, mask=None, mode: str = "eval"
) -> np.ndarray:
    """Single-sample state-space block: (H, T) -> (H, T)."""
    xb, mb = _single(x, mask)
    return block.apply(Tensor(xb.astype(block.d.dtype)), mb[:, None, :].astype(block.d.dtype), mode).value[0]


def global_avg_pool(x: np.ndarray, mask=None) -> np.ndarray:
    """Per-channel mean over valid timepoints: (H, T) -> (H,)."""
    xb, mb = _single(x, mask)
    if mb.sum() < 1:
        raise EmptyMask("mask selects no timepoints")
    return _masked_time_mean(Tensor(xb.astype(np.float64)), mb[:, None, :].astype(np.float64)).value[0]


def model_forward(
    model: Model,
    x: np.ndarray,
    mask=None,
    mode: str = "eval",
    dropout_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Single-sample logits: (n_rois, T) -> (n_classes,)."""
    xb, mb = _single(x, mask)
    return model.forward(xb, mb, mode=mode, dropout_rng=dropout_rng).value[0]


def count_parameters(model: Model) -> int:
    """Trainable scalar count; complex parameters count their two components,
    batchnorm running moments are buffers and excluded."""
    return sum(int(t.value.size) for _, t in model.named_parameters())


def save_checkpoint(model: Model, path: str) -> None:
    """Flat binary container: magic, version, JSON config, then named tensors
    (parameters, then batchnorm buffers) as little-endian float32 with shapes."""
    entries = list(model.named_parameters()) + [
        (name, Tensor(acc(None))) for name, acc in model.named_buffers()
    ]
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            raw = name.encode()
            arr = np.ascontiguousarray(tensor.value, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return None


def load_checkpoint(path: str) -> Model:
    """Rebuild a float32 model from a checkpoint, bit-exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} in {path}")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, off)
    off += 4
    config = ModelConfig(**json.loads(data[off: off + cfg_len].decode()))
    off += cfg_len
    (n_entries,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off: off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.copy()
    model = Model(config, seed=0, dtype=np.float32)
    for name, tensor in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != tensor.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {tensor.value.shape}"
            )
        tensor.value = tensors.pop(name)
    for name, accessor in model.named_buffers():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing buffer {name!r}")
        accessor(tensors.pop(name))
    if tensors:
        raise CheckpointError(f"checkpoint has unexpected tensors: {sorted(tensors)}")
    return model
