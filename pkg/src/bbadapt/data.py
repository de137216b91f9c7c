"""Datasets for the adaptation pipeline.

Two input modalities are supported:

* image lists: the standard ``relative/path.jpg <label>`` text format, one
  example per line, decoded lazily through a caller-supplied loader hook;
* synthetic feature vectors: Gaussian class blobs with a controllable
  source-to-target shift (rotation and/or mean translation), used for
  desk-scale benchmarks.

Target-domain labels ride along for evaluation only.  They are reachable
through :attr:`Dataset.eval_labels` and nothing else; training code that
tries to read ``train_labels`` on a target dataset gets a hard error.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SOURCE = "source"
TARGET = "target"


class LabelAccessError(RuntimeError):
    """Raised when training code asks for labels of an unlabeled-for-training dataset."""


@dataclass(frozen=True)
class Example:
    """One example: a stable id, an input (array or path), and an optional label."""

    id: str
    input: np.ndarray | str
    label: int | None = None


class Dataset:
    """Immutable collection of examples with a fixed class count and a role.

    ``role`` is ``"source"`` or ``"target"``.  Source labels are visible to
    training code via :attr:`train_labels`; target labels are evaluation-only
    and live behind :attr:`eval_labels`.
    """

    def __init__(
        self,
        ids: Sequence[str],
        inputs: Sequence[np.ndarray | str],
        labels: Sequence[int] | None,
        num_classes: int,
        role: str,
        class_names: Sequence[str] | None = None,
    ):
        if role not in (SOURCE, TARGET):
            raise ValueError(f"role must be 'source' or 'target', got {role!r}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        if len(ids) != len(inputs):
            raise ValueError("ids and inputs length mismatch")
        if len(set(ids)) != len(ids):
            raise ValueError("example ids must be unique")
        self._ids = list(ids)
        self._inputs = list(inputs)
        if labels is not None:
            lab = np.asarray(labels, dtype=np.int64)
            if lab.shape != (len(ids),):
                raise ValueError("labels length mismatch")
            if len(lab) and (lab.min() < 0 or lab.max() >= num_classes):
                raise ValueError("label outside [0, num_classes)")
            self._labels = lab
        else:
            self._labels = None
        self.num_classes = int(num_classes)
        self.role = role
        self.class_names = list(class_names) if class_names is not None else None

    def __len__(self) -> int:
        return len(self._ids)

    def __getitem__(self, i: int) -> Example:
        label = None
        if self._labels is not None and self.role == SOURCE:
            label = int(self._labels[i])
        return Example(self._ids[i], self._inputs[i], label)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def is_labeled(self) -> bool:
        """True when labels are usable for training (source role only)."""
        return self._labels is not None and self.role == SOURCE

    @property
    def has_eval_labels(self) -> bool:
        return self._labels is not None

    @property
    def train_labels(self) -> np.ndarray:
        """Labels for training. Hard error on target datasets by design."""
        if self._labels is None:
            raise LabelAccessError("dataset carries no labels")
        if self.role != SOURCE:
            raise LabelAccessError(
                "target labels are evaluation-only; use eval_labels from evaluation code"
            )
        return self._labels.copy()

    @property
    def eval_labels(self) -> np.ndarray:
        """Ground-truth labels for evaluation. Never feed these to training."""
        if self._labels is None:
            raise LabelAccessError("dataset carries no labels")
        return self._labels.copy()

    def inputs_array(self, loader: Callable[[str], np.ndarray] | None = None) -> np.ndarray:
        """Stack all inputs into one float32 array of shape (n, ...).

        Path inputs require a loader hook; synthetic inputs stack directly.
        """
        rows = []
        for x in self._inputs:
            if isinstance(x, str):
                if loader is None:
                    raise ValueError("path inputs need a loader hook")
                x = loader(x)
            rows.append(np.asarray(x, dtype=np.float32))
        if not rows:
            return np.zeros((0,), dtype=np.float32)
        return np.stack(rows)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        labels = None if self._labels is None else [int(self._labels[i]) for i in idx]
        return Dataset(
            [self._ids[i] for i in idx],
            [self._inputs[i] for i in idx],
            labels,
            self.num_classes,
            self.role,
            self.class_names,
        )

    def fingerprint(self) -> str:
        """Content hash over ids, inputs and class count (labels excluded)."""
        h = hashlib.sha256()
        h.update(f"K={self.num_classes};role={self.role};n={len(self)}".encode())
        for i, x in zip(self._ids, self._inputs):
            h.update(i.encode())
            if isinstance(x, str):
                h.update(x.encode())
            else:
                arr = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
                h.update(arr.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# image lists


def load_image_list(
    path: str | Path,
    root: str | Path = "",
    num_classes: int | None = None,
    role: str = SOURCE,
) -> Dataset:
    """Parse an image-list file with one ``relative/path label`` pair per line.

    Blank lines are skipped.  Labels must be integers; ``num_classes``
    defaults to ``max(label) + 1``.  Inputs stay as path strings (joined with
    ``root``) for a downstream loader hook to decode.
    """
    path = Path(path)
    ids, inputs, labels = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            parts = line.rsplit(None, 1)
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno + 1}: expected 'path label', got {line!r}")
            rel, lab = parts
            try:
                y = int(lab)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno + 1}: non-integer label {lab!r}") from e
            if y < 0:
                raise ValueError(f"{path}:{lineno + 1}: negative label {y}")
            ids.append(f"{role[0]}{len(ids):06d}")
            inputs.append(str(Path(root) / rel) if root else rel)
            labels.append(y)
    if not ids:
        raise ValueError(f"{path}: empty image list")
    k = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(ids, inputs, labels, k, role)


def save_image_list(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset of path inputs back to the image-list text format."""
    labels = dataset.eval_labels
    with open(path, "w") as f:
        for i in range(len(dataset)):
            x = dataset._inputs[i]
            if not isinstance(x, str):
                raise ValueError("save_image_list needs path inputs")
            f.write(f"{x} {int(labels[i])}\n")


# ---------------------------------------------------------------------------
# synthetic shifted benchmark


@dataclass(frozen=True)
class SyntheticShiftSpec:
    """Generator settings for a two-domain Gaussian-blob benchmark.

    Class means sit on a circle of ``radius`` in the first two coordinates
    (zero elsewhere).  The target domain draws fresh samples around the same
    means after rotating them by ``rotation_deg`` in that plane and adding a
    constant translation of length ``translation``.
    """

    num_classes: int = 4
    dim: int = 2
    samples_per_class: int = 100
    rotation_deg: float = 0.0
    translation: float = 0.0
    noise_scale: float = 0.5
    radius: float = 2.0
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def _class_means(spec: SyntheticShiftSpec) -> np.ndarray:
    means = np.zeros((spec.num_classes, spec.dim))
    angles = 2.0 * math.pi * np.arange(spec.num_classes) / spec.num_classes
    means[:, 0] = spec.radius * np.cos(angles)
    means[:, 1] = spec.radius * np.sin(angles)
    return means


def _shift_means(means: np.ndarray, spec: SyntheticShiftSpec) -> np.ndarray:
    theta = math.radians(spec.rotation_deg)
    out = means.copy()
    c, s = math.cos(theta), math.sin(theta)
    x, y = means[:, 0].copy(), means[:, 1].copy()
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    if spec.translation:
        direction = np.ones(means.shape[1]) / math.sqrt(means.shape[1])
        out = out + spec.translation * direction
    return out


def make_synthetic_shift(spec: SyntheticShiftSpec) -> tuple[Dataset, Dataset]:
    """Generate a (source, target) dataset pair under ``spec``.

    Both domains hold exactly ``samples_per_class`` examples per class.  With
    an identity shift the two domains are fresh draws from one distribution.
    Fully deterministic for a fixed spec.
    """
    rng = np.random.default_rng(spec.seed)
    src_means = _class_means(spec)
    tgt_means = _shift_means(src_means, spec)

    def draw(means: np.ndarray, prefix: str, role: str) -> Dataset:
        ids, inputs, labels = [], [], []
        for k in range(spec.num_classes):
            pts = means[k] + spec.noise_scale * rng.standard_normal(
                (spec.samples_per_class, spec.dim)
            )
            for p in pts:
                ids.append(f"{prefix}{len(ids):05d}")
                inputs.append(p.astype(np.float32))
                labels.append(k)
        return Dataset(ids, inputs, labels, spec.num_classes, role)

    source = draw(src_means, "s", SOURCE)
    target = draw(tgt_means, "t", TARGET)
    return source, target


# ---------------------------------------------------------------------------
# label-shift variants


@dataclass(frozen=True)
class LabelShiftParams:
    ratio: float = 0.7  # geometric decay per class rank (rsut)
    fraction: float = 0.5  # kept fraction of the label set (partial)
    seed: int = 0


def apply_label_shift(dataset: Dataset, mode: str, params: LabelShiftParams | None = None) -> Dataset:
    """Return a label-shifted copy of ``dataset``.

    ``rsut`` subsamples class k to a ``ratio**rank`` fraction where rank runs
    up the class indices on source datasets and down on target datasets, so a
    balanced source/target pair ends up with reversed class-count profiles.
    ``partial`` keeps only the first ``ceil(fraction * K)`` classes (indices
    unchanged).  Both need labels and are deterministic given ``params.seed``.
    """
    params = params or LabelShiftParams()
    if not dataset.has_eval_labels:
        raise LabelAccessError("label shift needs a labeled dataset")
    labels = dataset._labels  # dataset machinery, not training code
    k = dataset.num_classes
    if mode == "rsut":
        if not (0.0 < params.ratio <= 1.0):
            raise ValueError(f"rsut ratio must be in (0, 1], got {params.ratio}")
        rng = np.random.default_rng(params.seed)
        keep: list[int] = []
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            rank = c if dataset.role == SOURCE else (k - 1 - c)
            n_keep = int(round(len(idx) * params.ratio**rank))
            if n_keep < 1:
                raise ValueError(f"rsut emptied class {c}; raise ratio or class size")
            chosen = rng.permutation(idx)[:n_keep]
            keep.extend(sorted(int(i) for i in chosen))
        return dataset.subset(sorted(keep))
    if mode == "partial":
        if not (0.0 < params.fraction <= 1.0):
            raise ValueError(f"partial fraction must be in (0, 1], got {params.fraction}")
        n_classes = math.ceil(params.fraction * k)
        keep = [i for i in range(len(dataset)) if labels[i] < n_classes]
        kept_classes = set(int(c) for c in labels if c < n_classes)
        missing = set(range(n_classes)) - kept_classes
        if missing:
            raise ValueError(f"partial shift emptied classes {sorted(missing)}")
        if not keep:
            raise ValueError("partial shift kept no examples")
        return dataset.subset(keep)
    raise ValueError(f"unknown label-shift mode {mode!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """A named augmentation recipe with its strength parameters.

    ``kind`` is ``"weak"`` or ``"strong"``.  For feature vectors, weak adds
    isotropic Gaussian jitter of scale ``sigma``; strong jitters at
    ``4 * sigma`` and zeroes a ``mask_fraction`` share of coordinates.  For
    image arrays (H, W) or (H, W, C), weak is shift-crop plus horizontal
    flip; strong chains flip, shift-crop, brightness/contrast jitter and a
    square cutout.
    """

    kind: str = "weak"
    sigma: float = 0.1
    mask_fraction: float = 0.25
    crop_pad: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValueError(f"kind must be 'weak' or 'strong', got {self.kind!r}")
        if self.sigma < 0 or not (0.0 <= self.mask_fraction < 1.0):
            raise ValueError("bad augmentation parameters")


def _augment_features(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    out = x.astype(np.float32).copy()
    if policy.kind == "weak":
        out += policy.sigma * rng.standard_normal(out.shape).astype(np.float32)
        return out
    out += 4.0 * policy.sigma * rng.standard_normal(out.shape).astype(np.float32)
    dim = out.shape[-1]
    n_mask = int(policy.mask_fraction * dim)
    if n_mask:
        flat = out.reshape(-1, dim)
        for row in flat:
            drop = rng.choice(dim, size=n_mask, replace=False)
            row[drop] = 0.0
        out = flat.reshape(out.shape)
    return out


def _shift_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.pad(
        img,
        [(pad, pad), (pad, pad)] + [(0, 0)] * (img.ndim - 2),
        mode="reflect",
    )
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[top : top + h, left : left + w]


def _augment_image(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    out = x.astype(np.float32).copy()
    if rng.random() < 0.5:
        out = out[:, ::-1].copy()
    out = _shift_crop(out, policy.crop_pad, rng)
    if policy.kind == "strong":
        out = out * float(rng.uniform(0.6, 1.4))  # contrast
        out = out + float(rng.uniform(-0.2, 0.2))  # brightness
        h, w = out.shape[:2]
        side = max(1, int(0.3 * min(h, w)))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        out[top : top + side, left : left + side] = 0.0
    return out


def augment(x: np.ndarray, policy: AugmentationPolicy, seed: int) -> np.ndarray:
    """Apply ``policy`` to one input. Same input, policy and seed, same output."""
    x = np.asarray(x)
    rng = np.random.default_rng([policy.seed, int(seed)])
    if x.ndim == 1:
        return _augment_features(x, policy, rng)
    if x.ndim in (2, 3):
        return _augment_image(x, policy, rng)
    raise ValueError(f"unsupported input rank {x.ndim}")


def augment_batch(xs: np.ndarray, policy: AugmentationPolicy, seed: int) -> np.ndarray:
    """Vectorized :func:`augment` over the leading batch axis."""
    xs = np.asarray(xs)
    if xs.ndim == 2:  # batch of feature vectors, one rng stream for the batch
        rng = np.random.default_rng([policy.seed, int(seed)])
        return _augment_features(xs, policy, rng)
    return np.stack([augment(x, policy, (seed << 20) + i) for i, x in enumerate(xs)])
