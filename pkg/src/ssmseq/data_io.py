"""Dataset model, CSV loaders/writers, synthetic tasks, fold and sweep protocol.

The interchange format is deliberately plain: a manifest CSV `id,path,label`
whose paths point at per-sample timeseries CSVs (rows = timepoints, columns =
channels, optional header).  Two synthetic generators stand in for restricted
clinical data: a long-range token-pairing task whose label cannot be read
from any short window, and an easy task separating two linear systems.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadHeader,
    InconsistentRoiCount,
    InsufficientClassMembers,
    InsufficientData,
    InvalidSpan,
    MissingFile,
    NonFiniteValue,
    ParseError,
)
from .ssm_core import DiscreteSSM, scan

TOKEN_WINDOW = 25  # first token lands inside this prefix
BUMP_WIDTH = 8
BUMP_AMP = 3.0


@dataclass(frozen=True)
class Sample:
    """One recording: channels x timepoints plus its class index."""

    id: str
    x: np.ndarray
    label: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ParseError(f"sample {self.id}: expected a 2-D matrix, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteValue(f"sample {self.id} holds non-finite values")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class Dataset:
    """A list of samples sharing one channel count."""

    samples: tuple[Sample, ...]
    n_rois: int
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        samples = tuple(self.samples)
        for s in samples:
            if s.x.shape[0] != self.n_rois:
                raise InconsistentRoiCount(
                    f"sample {s.id!r} has {s.x.shape[0]} channels, dataset expects {self.n_rois}"
                )
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return replace(self, samples=tuple(self.samples[i] for i in indices))


def load_timeseries(path: str) -> np.ndarray:
    """Read one timeseries CSV into channels x timepoints.

    Rows are timepoints and columns channels; a non-numeric first row is
    treated as a header.  Row/column locations in errors are 1-based.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise MissingFile(f"cannot read timeseries file {path!r}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: file holds no data rows")
    start = 0
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        start = 1
        if len(rows) == 1:
            raise ParseError(f"{path}: only a header row present")
    width = len(rows[start])
    data = np.empty((len(rows) - start, width), dtype=np.float64)
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ParseError(f"{path}: row {i} has {len(row)} cells, expected {width}", row=i)
        for j, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: cannot parse {cell!r} at row {i}, column {j}", row=i, col=j
                ) from None
            if not np.isfinite(v):
                raise NonFiniteValue(
                    f"{path}: non-finite value {cell!r} at row {i}, column {j}", row=i, col=j
                )
            data[i - start - 1, j - 1] = v
    return data.T


def load_manifest(path: str) -> Dataset:
    """Load a dataset manifest: CSV `id,path,label`, paths relative to it.

    Labels map to contiguous class indices in sorted label order.
    """
    if not os.path.isfile(path):
        raise MissingFile(f"manifest {path!r} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise BadHeader(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != ["id", "path", "label"]:
            raise BadHeader(f"{path}: header must be 'id,path,label', got {','.join(header)!r}")
        entries = [row for row in reader if row]
    if not entries:
        raise ParseError(f"{path}: manifest lists no samples")
    base = os.path.dirname(os.path.abspath(path))
    class_names = sorted({row[2].strip() for row in entries})
    if len(class_names) < 2:
        raise ParseError(f"{path}: need at least 2 classes, found {class_names}")
    label_of = {name: i for i, name in enumerate(class_names)}
    samples = []
    n_rois = None
    for row in entries:
        if len(row) != 3:
            raise ParseError(f"{path}: manifest row {row!r} must have 3 fields")
        sid, rel, label = (c.strip() for c in row)
        fpath = rel if os.path.isabs(rel) else os.path.join(base, rel)
        if not os.path.isfile(fpath):
            raise MissingFile(f"sample {sid!r}: file {fpath!r} does not exist")
        x = load_timeseries(fpath)
        if n_rois is None:
            n_rois = x.shape[0]
        elif x.shape[0] != n_rois:
            raise InconsistentRoiCount(
                f"sample {sid!r} has {x.shape[0]} channels, others have {n_rois}"
            )
        samples.append(Sample(sid, x, label_of[label]))
    return Dataset(tuple(samples), n_rois, tuple(class_names))


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def save_dataset(dataset: Dataset, outdir: str, meta: dict | None = None) -> str:
    """Write `data/<id>.csv` files plus `manifest.csv` (and `meta.json`).

    Values carry 9 significant digits; returns the manifest path.
    """
    datadir = os.path.join(outdir, "data")
    os.makedirs(datadir, exist_ok=True)
    names = dataset.class_names or tuple(
        str(c) for c in sorted(set(int(s.label) for s in dataset.samples))
    )
    manifest = os.path.join(outdir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "label"])
        for s in dataset.samples:
            rel = os.path.join("data", f"{s.id}.csv")
            with open(os.path.join(outdir, rel), "w", newline="", encoding="utf-8") as tf:
                tw = csv.writer(tf)
                for row in s.x.T:  # rows are timepoints
                    tw.writerow([_fmt(v) for v in row])
            writer.writerow([s.id, rel, names[s.label]])
    if meta is not None:
        with open(os.path.join(outdir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


def _smooth_noise(rng: np.random.Generator, N: int, T: int) -> np.ndarray:
    """Band-limited unit-variance background: Gaussian-smoothed white noise."""
    pad = 12
    raw = rng.standard_normal((N, T + 2 * pad))
    t = np.arange(-6, 7)
    win = np.exp(-0.5 * (t / 2.0) ** 2)
    win /= win.sum()
    sm = np.apply_along_axis(lambda r: np.convolve(r, win, mode="same"), 1, raw)
    sm = sm[:, pad: pad + T]
    return sm / np.maximum(sm.std(axis=1, keepdims=True), 1e-8)


def gen_synthetic_longrange(
    n_samples: int,
    N: int = 16,
    T: int = 400,
    span: int = 300,
    seed: int = 0,
    return_meta: bool = False,
):
    """Token-pairing task: label = XOR of two bump signs separated by >= span.

    The first +/-1 bump sits in channel 0 within the first TOKEN_WINDOW
    timepoints; the second lands at least `span` later.  No window shorter
    than the span sees both tokens, while reading both decides the label
    exactly.  Classes are balanced within one sample.
    """
    max_ta = TOKEN_WINDOW - BUMP_WIDTH
    if span < 1 or max_ta + span + BUMP_WIDTH > T:
        raise InvalidSpan(
            f"span {span} does not fit T={T} with a {TOKEN_WINDOW}-step token prefix"
        )
    rng = np.random.default_rng(seed)
    bump = BUMP_AMP * np.hanning(BUMP_WIDTH)
    samples, meta = [], []
    for i in range(n_samples):
        label = i % 2
        x = _smooth_noise(rng, N, T)
        s_a = 1 if rng.random() < 0.5 else -1
        s_b = -s_a if label == 1 else s_a
        t_a = int(rng.integers(0, max_ta + 1))
        t_b = int(rng.integers(t_a + span, T - BUMP_WIDTH + 1))
        x[0, t_a: t_a + BUMP_WIDTH] += s_a * bump
        x[0, t_b: t_b + BUMP_WIDTH] += s_b * bump
        samples.append(Sample(f"lr{i:05d}", x, label))
        meta.append({"t_a": t_a, "s_a": s_a, "t_b": t_b, "s_b": s_b, "label": label})
    ds = Dataset(tuple(samples), N, ("0", "1"))
    return (ds, meta) if return_meta else ds


def _rotation_system(radius: float, angle: float) -> DiscreteSSM:
    A = radius * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return DiscreteSSM(A_bar=A, B_bar=np.array([[1.0], [0.0]]), C_bar=np.array([[1.0, 0.0]]))


def gen_synthetic_ssm(n_samples: int, N: int = 16, T: int = 160, seed: int = 0):
    """Easy sanity task: two stable linear systems, one per class.

    Each sample is white noise pushed through its class system and projected
    to N channels (shared projection, small additive noise).  The class
    spectral radii are drawn from disjoint ranges at least 0.2 apart, so a
    whole-sequence variance threshold already separates the classes.
    """
    rng = np.random.default_rng(seed)
    r0 = float(rng.uniform(0.45, 0.55))
    r1 = float(rng.uniform(0.85, 0.93))
    th0 = float(rng.uniform(0.4, 0.9))
    th1 = float(rng.uniform(0.05, 0.25))
    systems = (_rotation_system(r0, th0), _rotation_system(r1, th1))
    w = rng.standard_normal(N)
    w /= np.linalg.norm(w)
    samples = []
    for i in range(n_samples):
        label = i % 2
        u = rng.standard_normal(T)
        y = scan(systems[label], u)
        x = np.outer(w, y) + 0.1 * rng.standard_normal((N, T))
        samples.append(Sample(f"ssm{i:05d}", x, label))
    return Dataset(tuple(samples), N, ("0", "1"))


def synthetic_ssm_systems(seed: int = 0) -> tuple[DiscreteSSM, DiscreteSSM, np.ndarray]:
    """The two class systems and projection a given seed produces (oracle support)."""
    rng = np.random.default_rng(seed)
    r0 = float(rng.uniform(0.45, 0.55))
    r1 = float(rng.uniform(0.85, 0.93))
    th0 = float(rng.uniform(0.4, 0.9))
    th1 = float(rng.uniform(0.05, 0.25))
    w = rng.standard_normal(16)
    return _rotation_system(r0, th0), _rotation_system(r1, th1), w


def stratified_folds(labels, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample: per-class seeded shuffle, then round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise InsufficientData(f"need k >= 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    folds = np.full(labels.shape[0], -1, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.where(labels == cls)[0]
        if members.shape[0] < k:
            raise InsufficientClassMembers(
                f"class {cls} has {members.shape[0]} members, fewer than k={k}"
            )
        members = members[rng.permutation(members.shape[0])]
        folds[members] = np.arange(members.shape[0]) % k
    return folds


@dataclass(frozen=True)
class SweepRow:
    """One training-set size of the scaling protocol (3-seed statistics)."""

    size: int
    seeds: tuple[int, ...]
    accuracies: tuple[float, ...]
    mean_accuracy: float
    std_accuracy: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    test_ids: tuple[str, ...]


def sample_scaling_sweep(
    dataset: Dataset,
    sizes: list[int],
    model_cfg,
    train_cfg,
    test_size: int,
    n_seeds: int = 3,
    inner_val_frac: float = 0.1,
) -> SweepResult:
    """Learning-curve protocol: class-balanced training subsets of each size,
    trained with n_seeds seeds and scored on one fixed held-out test set."""
    from .training import evaluate, train  # local import to avoid a module cycle

    labels = dataset.labels
    classes = np.unique(labels)
    if max(sizes) + test_size > len(dataset):
        raise InsufficientData(
            f"max size {max(sizes)} + test {test_size} exceeds dataset size {len(dataset)}"
        )
    rng = np.random.default_rng(train_cfg.seed)
    # fixed stratified test set
    test_idx = []
    for cls in classes:
        members = np.where(labels == cls)[0]
        members = members[rng.permutation(members.shape[0])]
        n_cls = int(round(test_size * members.shape[0] / len(dataset)))
        test_idx.extend(members[:n_cls])
    test_idx = sorted(test_idx)
    test_set = dataset.subset(test_idx)
    pool = np.array(sorted(set(range(len(dataset))) - set(test_idx)))
    pool_labels = labels[pool]
    rows = []
    for size in sizes:
        per_class = size // classes.shape[0]
        draw_rng = np.random.default_rng((train_cfg.seed, size))
        subset_idx = []
        for cls in classes:
            members = pool[pool_labels == cls]
            if members.shape[0] < per_class:
                raise InsufficientData(f"class {cls} pool too small for size {size}")
            members = members[draw_rng.permutation(members.shape[0])]
            subset_idx.extend(members[:per_class])
        subset_idx = sorted(subset_idx)
        accs, seeds = [], []
        for s in range(n_seeds):
            seed_s = train_cfg.seed + s
            split_rng = np.random.default_rng((seed_s, size))
            sub_labels = labels[subset_idx]
            val_idx, tr_idx = [], []
            for cls in classes:
                members = np.array(subset_idx)[sub_labels == cls]
                members = members[split_rng.permutation(members.shape[0])]
                n_val = max(1, int(round(inner_val_frac * members.shape[0])))
                val_idx.extend(members[:n_val])
                tr_idx.extend(members[n_val:])
            cfg_s = replace(train_cfg, seed=seed_s)
            model, _ = train(
                model_cfg, dataset.subset(sorted(tr_idx)), dataset.subset(sorted(val_idx)), cfg_s
            )
            accs.append(evaluate(model, test_set).accuracy)
            seeds.append(seed_s)
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append(
            SweepRow(size, tuple(seeds), tuple(accs), float(np.mean(accs)), std)
        )
    return SweepResult(tuple(rows), tuple(s.id for s in test_set.samples))
