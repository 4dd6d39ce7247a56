"""Loss, optimizer, gradient checking, the training loop and the CV harness."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    DegenerateSplit,
    EmptyDataset,
    InsufficientData,
    InvalidLabel,
    ShapeMismatch,
)
from .nn_layers import Model, ModelConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LAM_RE_CEILING = -1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the fixed baseline recipe."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be single or double, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass(frozen=True)
class Metrics:
    """Confusion-matrix summary with class 1 as the positive class."""

    accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def from_counts(tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        total = tp + fp + tn + fn
        if total == 0:
            raise EmptyDataset("metrics need at least one sample")
        pos, neg = tp + fn, tn + fp
        return Metrics(
            accuracy=(tp + tn) / total,
            sensitivity=tp / pos if pos else float("nan"),
            specificity=tn / neg if neg else float("nan"),
            tp=tp, fp=fp, tn=tn, fn=fn,
        )


@dataclass
class TrainHistory:
    """Per-epoch trace plus where and why training stopped."""

    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label] with log-sum-exp stabilization."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.shape[0]:
        raise InvalidLabel(f"label {label} outside [0, {logits.shape[0]})")
    m = float(np.max(logits))
    return float(np.log(np.sum(np.exp(logits - m))) - (logits[label] - m))


def _ce_batch(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of a (B, C) logits tensor against integer labels."""
    B, C = logits.shape
    if np.any(labels < 0) or np.any(labels >= C):
        raise InvalidLabel(f"labels must lie in [0, {C})")
    m = logits.value.max(axis=1, keepdims=True)  # constant shift, exact gradients
    z = logits - m
    lse = ad.tlog(ad.tsum(ad.texp(z), axis=1))
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    picked = ad.tsum(ad.mul(z, onehot), axis=1)
    return ad.tmean(lse - picked)


def grad_check(fn, params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Max relative error of reverse-mode gradients against central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    Parameters are perturbed in place and restored; run in double precision.
    """
    for t in params.values():
        t.grad = None
    fn(params).backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.items()
    }
    worst = 0.0
    for name, t in params.items():
        flat = t.value.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn(params).value)
            flat[i] = orig - h
            f_minus = float(fn(params).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(g[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(g[i] - numeric) / denom)
    return worst


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    step_index: int,
    cfg: TrainConfig,
):
    """One decoupled-weight-decay Adam update (in place); returns (params, moments).

    Weight decay shrinks parameters directly (theta -= lr*wd*theta) before the
    bias-corrected adaptive update.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    c1 = 1.0 - ADAM_BETA1**step_index
    c2 = 1.0 - ADAM_BETA2**step_index
    for name, t in params.items():
        g = np.asarray(grads[name])
        if g.shape != t.value.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param shape {t.value.shape} for {name}")
        if name not in moments:
            moments[name] = (np.zeros_like(t.value), np.zeros_like(t.value))
        m, v = moments[name]
        if cfg.weight_decay:
            t.value -= (cfg.lr * cfg.weight_decay) * t.value
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        t.value -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, moments


def znormalize(x: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per channel over its timepoints."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return (x - mu) / np.maximum(sd, 1e-8)


def _assemble(dataset, indices, dtype):
    """Zero-pad a batch to its longest sequence; returns (x, mask, labels)."""
    samples = [dataset.samples[i] for i in indices]
    B = len(samples)
    N = samples[0].x.shape[0]
    Tmax = max(s.x.shape[1] for s in samples)
    x = np.zeros((B, N, Tmax), dtype=dtype)
    mask = np.zeros((B, Tmax), dtype=dtype)
    labels = np.empty(B, dtype=np.int64)
    for j, s in enumerate(samples):
        T = s.x.shape[1]
        x[j, :, :T] = znormalize(s.x)
        mask[j, :T] = 1.0
        labels[j] = s.label
    return x, mask, labels


def predict(model: Model, dataset, batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions (ties resolve to the lowest index)."""
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        x, mask, _ = _assemble(dataset, idx, model.dtype)
        logits = model.forward(x, mask, mode="eval").value
        preds[start: start + len(x)] = np.argmax(logits, axis=1)
    return preds


def evaluate(model: Model, dataset) -> Metrics:
    """Confusion-matrix metrics with class 1 as positive."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    preds = predict(model, dataset)
    labels = np.array([s.label for s in dataset.samples])
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels != 1)))
    tn = int(np.sum((preds != 1) & (labels != 1)))
    fn = int(np.sum((preds != 1) & (labels == 1)))
    return Metrics.from_counts(tp, fp, tn, fn)


def _check_split(train_set, val_set):
    train_ids = {s.id for s in train_set.samples}
    val_ids = {s.id for s in val_set.samples}
    if train_ids & val_ids:
        raise DegenerateSplit(f"train/val share ids: {sorted(train_ids & val_ids)[:3]} ...")
    train_classes = {s.label for s in train_set.samples}
    val_classes = {s.label for s in val_set.samples}
    required = train_classes | val_classes
    if train_classes != required or val_classes != required:
        raise DegenerateSplit("every class must appear in both train and validation")


def _snapshot(model: Model):
    params = {name: t.value.copy() for name, t in model.named_parameters()}
    buffers = {name: acc(None).copy() for name, acc in model.named_buffers()}
    return params, buffers


def _restore(model: Model, snap):
    params, buffers = snap
    for name, t in model.named_parameters():
        t.value = params[name].copy()
    for name, acc in model.named_buffers():
        acc(buffers[name].copy())


def _clamp_stability(model: Model):
    # keep state-pole real parts strictly negative during training
    for blk in model.s4_blocks:
        np.minimum(blk.lam.re.value, LAM_RE_CEILING, out=blk.lam.re.value)


def train(
    model_cfg: ModelConfig, train_set, val_set, cfg: TrainConfig
) -> tuple[Model, TrainHistory]:
    """Mini-batch training with early stopping on best validation accuracy.

    Shuffling, dropout and initialization are all keyed to cfg.seed, so a
    repeat run reproduces the history and parameters exactly (single thread).
    Returns the parameters from the best-validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    _check_split(train_set, val_set)
    dtype = cfg.dtype
    model = Model(model_cfg, seed=cfg.seed, dtype=dtype)
    params = model.parameters()
    moments: dict = {}
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    dropout_rng = np.random.default_rng(cfg.seed + 2)
    history = TrainHistory()
    best_acc = -np.inf
    best_snap = _snapshot(model)
    since_best = 0
    step_index = 0
    history.stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        loss_sum, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start: start + cfg.batch_size]
            x, mask, labels = _assemble(train_set, batch, dtype)
            model.zero_grad()
            logits = model.forward(x, mask, mode="train", dropout_rng=dropout_rng)
            loss = _ce_batch(logits, labels)
            loss.backward()
            grads = {
                name: (t.grad if t.grad is not None else np.zeros_like(t.value))
                for name, t in params.items()
            }
            step_index += 1
            adamw_step(params, grads, moments, step_index, cfg)
            _clamp_stability(model)
            loss_sum += float(loss.value) * len(batch)
            seen += len(batch)
        history.train_loss.append(loss_sum / seen)
        val_acc = evaluate(model, val_set).accuracy
        history.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_snap = _snapshot(model)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stop_reason = "early_stop"
                break
    _restore(model, best_snap)
    return model, history


@dataclass(frozen=True)
class FoldResult:
    fold: int
    repeat: int
    metrics: Metrics


def summarize_folds(rows: list[FoldResult]) -> dict[str, tuple[float, float]]:
    """Mean and standard deviation (ddof=1) per metric across fold rows."""
    out = {}
    for name in ("accuracy", "sensitivity", "specificity"):
        vals = np.array([getattr(r.metrics, name) for r in rows], dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out[name] = (float(np.mean(vals)), std)
    return out


def _inner_split(dataset, pool_idx, frac, rng):
    """Stratified carve-out of an inner validation subset from a training pool."""
    labels = np.array([dataset.samples[i].label for i in pool_idx])
    val_idx, tr_idx = [], []
    for cls in np.unique(labels):
        members = np.array(pool_idx)[labels == cls]
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(frac * len(members))))
        val_idx.extend(members[:n_val])
        tr_idx.extend(members[n_val:])
    return sorted(tr_idx), sorted(val_idx)


def _run_fold(args):
    dataset, tr_idx, val_idx, test_idx, model_cfg, fold_cfg = args
    model, _ = train(
        model_cfg, dataset.subset(tr_idx), dataset.subset(val_idx), fold_cfg
    )
    return evaluate(model, dataset.subset(test_idx))


def cross_validate(
    dataset,
    k: int,
    repeats: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    inner_val_frac: float = 0.1,
    jobs: int = 1,
) -> tuple[list[FoldResult], dict[str, tuple[float, float]]]:
    """Repeated stratified k-fold evaluation.

    Each repeat re-draws the fold partition from its own seed; within every
    training split an inner validation subset drives early stopping.  Returns
    one row per (repeat, fold) plus the mean +/- std summary.
    """
    from .data_io import stratified_folds  # local import to avoid a module cycle

    if k < 2:
        raise InsufficientData(f"need at least 2 folds, got {k}")
    if repeats < 1:
        raise InsufficientData(f"need at least 1 repeat, got {repeats}")
    labels = np.array([s.label for s in dataset.samples])
    for cls in np.unique(labels):
        if np.sum(labels == cls) < k:
            raise InsufficientData(f"class {cls} has fewer than {k} members")
    job_args, keys = [], []
    for r in range(repeats):
        folds = stratified_folds(labels, k, seed=train_cfg.seed + r)
        for f in range(k):
            test_idx = np.where(folds == f)[0]
            pool_idx = np.where(folds != f)[0]
            rng = np.random.default_rng((train_cfg.seed, r, f))
            tr_idx, val_idx = _inner_split(dataset, pool_idx, inner_val_frac, rng)
            fold_cfg = replace(train_cfg, seed=train_cfg.seed + r * k + f)
            job_args.append((dataset, tr_idx, val_idx, list(test_idx), model_cfg, fold_cfg))
            keys.append((r, f))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, job_args))
    else:
        results = [_run_fold(a) for a in job_args]
    rows = [FoldResult(fold=f, repeat=r, metrics=m) for (r, f), m in zip(keys, results)]
    return rows, summarize_folds(rows)
