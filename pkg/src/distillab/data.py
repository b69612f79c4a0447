"""Dataset supply: synthetic multi-view classification data, simple
CSV/IDX loaders, and the light augmentation pipeline (flip, shift,
cutout).

The multi-view generator gives each class a set of mutually orthogonal
template vectors, one per view slot. A sample embeds its class's
templates into disjoint coordinate blocks on top of Gaussian noise;
a configurable fraction of samples carries exactly one view, the rest
carry all of them. Which views are present is recorded per sample so
experiments can condition on it.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffcore import as_array64
from .errors import ContractError, ParseError

__all__ = [
    "MultiViewSpec",
    "LabeledDataset",
    "multiview_generate",
    "cutout",
    "random_flip",
    "random_shift",
    "augment_batch",
    "load_csv",
    "save_csv",
    "load_idx",
    "save_idx",
    "one_hot",
    "split_heldout",
]


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim != 1:
        raise ContractError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class LabeledDataset:
    """Inputs with one-hot labels; synthetic data also carries the
    per-sample view mask."""

    inputs: np.ndarray
    labels: np.ndarray
    view_mask: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", as_array64(self.inputs, "inputs"))
        labels = as_array64(self.labels, "labels")
        if labels.ndim != 2:
            raise ContractError("labels must be a one-hot matrix")
        if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
            raise ContractError("labels must be exactly one-hot rows")
        if labels.shape[0] != self.inputs.shape[0]:
            raise ContractError("inputs and labels must have the same count")
        object.__setattr__(self, "labels", labels)
        if self.view_mask is not None and len(self.view_mask) != len(labels):
            raise ContractError("view_mask must have one row per sample")

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def k(self) -> int:
        return int(self.labels.shape[1])

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.intp)
        mask = None if self.view_mask is None else self.view_mask[indices]
        return LabeledDataset(self.inputs[indices], self.labels[indices], mask)


def split_heldout(dataset: LabeledDataset, fraction: float, seed: int):
    """Deterministic (train, heldout) split carved from one dataset."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"heldout fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_held = max(1, int(round(n * fraction)))
    if n_held >= n:
        raise ContractError("heldout split would consume the whole dataset")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).permutation(n)
    return dataset.subset(perm[n_held:]), dataset.subset(perm[:n_held])


@dataclass(frozen=True)
class MultiViewSpec:
    """Generator settings. ``signal_strength`` scales the unit templates
    and defaults to five times the noise level (or 5.0 in the noiseless
    case); a tuple gives each view slot its own scale, so one view can
    be made easy and another hard."""

    k: int = 4
    views_per_class: int = 2
    feature_dim: int = 16
    noise_std: float = 1.0
    single_view_fraction: float = 0.1
    n_train: int = 4000
    n_test: int = 1000
    signal_strength: float | tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ContractError("k must be at least 2")
        if self.views_per_class < 2:
            raise ContractError("views_per_class must be at least 2")
        if not 0.0 <= self.single_view_fraction <= 1.0:
            raise ContractError("single_view_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise ContractError("noise_std must be nonnegative")
        if self.n_train < 1 or self.n_test < 1:
            raise ContractError("n_train and n_test must be positive")
        if self.feature_dim < self.k * self.views_per_class:
            raise ContractError(
                f"feature_dim {self.feature_dim} too small for "
                f"{self.k * self.views_per_class} orthogonal templates"
            )
        if isinstance(self.signal_strength, (list, tuple)):
            scales = tuple(float(s) for s in self.signal_strength)
            if len(scales) != self.views_per_class:
                raise ContractError("signal_strength tuple needs one scale per view")
            if any(s <= 0 for s in scales):
                raise ContractError("signal_strength must be positive")
            object.__setattr__(self, "signal_strength", scales)
        elif self.signal_strength is not None and self.signal_strength <= 0:
            raise ContractError("signal_strength must be positive")

    @property
    def input_dim(self) -> int:
        return self.views_per_class * self.feature_dim

    @property
    def scale(self) -> tuple[float, ...]:
        """Per-view template scales."""
        if isinstance(self.signal_strength, tuple):
            return self.signal_strength
        if self.signal_strength is not None:
            return (self.signal_strength,) * self.views_per_class
        base = 5.0 * self.noise_std if self.noise_std > 0 else 5.0
        return (base,) * self.views_per_class


def _templates(spec: MultiViewSpec, rng) -> np.ndarray:
    """(k, views, feature_dim) mutually orthonormal rows, scaled."""
    raw = rng.normal(size=(spec.feature_dim, spec.k * spec.views_per_class))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # fix the QR sign convention
    basis = q.T.reshape(spec.k, spec.views_per_class, spec.feature_dim)
    return np.asarray(spec.scale)[None, :, None] * basis


def _draw(spec: MultiViewSpec, templates, n: int, rng) -> LabeledDataset:
    classes = rng.integers(spec.k, size=n)
    single = rng.random(n) < spec.single_view_fraction
    which = rng.integers(spec.views_per_class, size=n)
    mask = np.ones((n, spec.views_per_class), dtype=bool)
    mask[single] = False
    mask[single, which[single]] = True
    x = rng.normal(0.0, spec.noise_std, size=(n, spec.input_dim)) if spec.noise_std > 0 else np.zeros((n, spec.input_dim))
    fd = spec.feature_dim
    for j in range(spec.views_per_class):
        block = x[:, j * fd : (j + 1) * fd]
        block += templates[classes, j, :] * mask[:, j : j + 1]
    return LabeledDataset(x, one_hot(classes, spec.k), mask)


def multiview_generate(spec: MultiViewSpec):
    """(train, test) datasets from independent draws over shared templates."""
    root = np.random.SeedSequence(spec.seed)
    tpl_rng, train_rng, test_rng = (np.random.default_rng(s) for s in root.spawn(3))
    templates = _templates(spec, tpl_rng)
    return _draw(spec, templates, spec.n_train, train_rng), _draw(
        spec, templates, spec.n_test, test_rng
    )


# --------------------------------------------------------------------------
# augmentation

def _rng_of(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def cutout(image: np.ndarray, size: int, seed=0) -> np.ndarray:
    """Zero one axis-aligned square patch, center uniform over the image.

    The square is clipped at the borders; pixels outside it are
    untouched. Accepts (H, W) or (C, H, W) arrays and zeroes across
    channels.
    """
    image = as_array64(image, "image")
    if image.ndim not in (2, 3):
        raise ContractError("cutout expects an (H, W) or (C, H, W) image")
    h, w = image.shape[-2:]
    size = int(size)
    if size < 0 or size > min(h, w):
        raise ContractError(f"cutout size {size} does not fit a {h}x{w} image")
    out = image.copy()
    if size == 0:
        return out
    rng = _rng_of(seed)
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y1, y2 = max(cy - size // 2, 0), min(cy + size // 2, h)
    x1, x2 = max(cx - size // 2, 0), min(cx + size // 2, w)
    out[..., y1:y2, x1:x2] = 0.0
    return out


def random_flip(batch: np.ndarray, rng) -> np.ndarray:
    """Mirror each sample along the width axis with probability 1/2."""
    flips = rng.random(batch.shape[0]) < 0.5
    out = batch.copy()
    out[flips] = out[flips, ..., ::-1]
    return out


def random_shift(batch: np.ndarray, max_shift: int, rng) -> np.ndarray:
    """Translate each sample by up to max_shift pixels, zero filled."""
    if max_shift == 0:
        return batch.copy()
    out = np.zeros_like(batch)
    h, w = batch.shape[-2:]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(batch.shape[0], 2))
    for i, (dy, dx) in enumerate(shifts):
        src_y = slice(max(0, -dy), min(h, h - dy))
        dst_y = slice(max(0, dy), min(h, h + dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[i, ..., dst_y, dst_x] = batch[i, ..., src_y, src_x]
    return out


def augment_batch(batch: np.ndarray, rng, *, cutout_size=None, max_shift=None) -> np.ndarray:
    """Flip + shift + cutout for an (N, C, H, W) batch of images."""
    batch = as_array64(batch, "batch")
    if batch.ndim != 4:
        raise ContractError("augmentation needs image-shaped inputs (N, C, H, W)")
    h = batch.shape[-2]
    if max_shift is None:
        max_shift = max(1, h // 8)
    if cutout_size is None:
        cutout_size = max(1, h // 4)
    out = random_shift(random_flip(batch, rng), max_shift, rng)
    for i in range(out.shape[0]):
        out[i] = cutout(out[i], cutout_size, rng)
    return out


# --------------------------------------------------------------------------
# file formats

def _rescale_unit(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def load_csv(path) -> LabeledDataset:
    """Read ``label,f0,f1,...`` rows; features min-max scaled to [0, 1].

    Data already spanning [0, 1] is returned unchanged, so write/read
    round-trips exactly for unit-range features.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.strip():
        raise ParseError(f"{path}: empty file", offset=0)
    offset = 0
    lines = raw.splitlines(keepends=True)
    header = lines[0].decode("utf-8", errors="replace").strip()
    fields = header.split(",")
    if fields[0] != "label" or len(fields) < 2 or any(
        f != f"f{i}" for i, f in enumerate(fields[1:])
    ):
        raise ParseError(f"{path}: header must be label,f0,f1,...", offset=0)
    width = len(fields) - 1
    labels, rows = [], []
    offset = len(lines[0])
    for line in lines[1:]:
        text = line.decode("utf-8", errors="replace").strip()
        if text:
            parts = text.split(",")
            if len(parts) != width + 1:
                raise ParseError(
                    f"{path}: expected {width + 1} fields, got {len(parts)}", offset=offset
                )
            try:
                label = int(parts[0])
                feats = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", offset=offset) from None
            if label < 0:
                raise ParseError(f"{path}: labels must be nonnegative", offset=offset)
            labels.append(label)
            rows.append(feats)
        offset += len(line)
    if not rows:
        raise ParseError(f"{path}: no data rows", offset=offset)
    x = _rescale_unit(np.array(rows, dtype=np.float64))
    labels = np.array(labels)
    return LabeledDataset(x, one_hot(labels, int(labels.max()) + 1))


def save_csv(dataset: LabeledDataset, path) -> None:
    inputs = dataset.inputs.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(inputs.shape[1])])
        for label, row in zip(dataset.class_indices, inputs):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 * (1 + ndim):
        raise ParseError(f"{path}: truncated idx header", offset=len(raw))
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise ParseError(f"{path}: bad idx magic 0x{got:08x}", offset=0)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    start = 4 * (1 + ndim)
    count = int(np.prod(dims))
    if len(raw) - start != count:
        raise ParseError(f"{path}: payload size mismatch", offset=start)
    return np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read big-endian ubyte idx image/label pairs; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images_path}: image/label counts differ", offset=0)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    labels = labels.astype(np.intp)
    return LabeledDataset(x, one_hot(labels, int(labels.max()) + 1))


def save_idx(images_ubyte: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images_ubyte = np.asarray(images_ubyte)
    if images_ubyte.dtype != np.uint8 or images_ubyte.ndim != 3:
        raise ContractError("save_idx expects (n, h, w) uint8 images")
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, *images_ubyte.shape))
        fh.write(images_ubyte.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", _IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())
