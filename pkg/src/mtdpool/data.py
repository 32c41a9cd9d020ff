"""Synthetic datasets and the per-student training-set transformations."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import RejectedInput
from .models import Model, predict
from .rng import derive_seed


@dataclass(frozen=True)
class Dataset:
    """Labelled feature vectors confined to a [lb, ub] box."""

    x: np.ndarray   # (N, d) float64
    y: np.ndarray   # (N,) int
    lb: float = 0.0
    ub: float = 1.0
    split: str = "train"   # train | test | tuning

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.intp)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise RejectedInput("features must be (N, d) with N labels")
        if self.lb >= self.ub:
            raise RejectedInput("lb must be below ub")
        if len(x) and (x.min() < self.lb - 1e-12 or x.max() > self.ub + 1e-12):
            raise RejectedInput("features outside declared bounds")
        if len(y) and y.min() < 0:
            raise RejectedInput("labels must be nonnegative class indices")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx])


def _random_rotation(d: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def gen_blobs(n_classes: int, n_per_class: int, d: int, separation: float,
              seed: int, sigma: float = 0.05, lb: float = 0.0, ub: float = 1.0,
              split: str = "train") -> Dataset:
    """Gaussian class clusters in a [lb, ub]^d box.

    Class means sit pairwise `separation` apart (before clipping) on a
    randomly rotated simplex around the box centre; per-class spread is
    isotropic `sigma`. With separation >= 6*sigma the classes are
    essentially linearly separable.
    """
    if n_classes < 2:
        raise RejectedInput("need at least two classes")
    if separation < 0:
        raise RejectedInput("separation must be nonnegative")
    if d < n_classes:
        raise RejectedInput("need d >= n_classes to place distinct means")
    rng = np.random.default_rng(seed)
    centre = (lb + ub) / 2.0
    basis = np.zeros((n_classes, d))
    basis[np.arange(n_classes), np.arange(n_classes)] = 1.0
    basis -= basis.mean(axis=0)
    means = centre + (separation / np.sqrt(2.0)) * basis @ _random_rotation(d, rng).T
    xs, ys = [], []
    for c in range(n_classes):
        xs.append(rng.normal(means[c], sigma, size=(n_per_class, d)))
        ys.append(np.full(n_per_class, c, dtype=np.intp))
    x = np.clip(np.concatenate(xs), lb, ub)
    return Dataset(x, np.concatenate(ys), lb=lb, ub=ub, split=split)


# --- training-set transformations -------------------------------------

_KINDS = ("identity", "rotation", "translation", "additive_noise")


@dataclass(frozen=True)
class TransformSpec:
    """One deterministic dataset transformation.

    kind selects the operation; only the matching parameter is read:
    rotation -> angle_deg (planar rotation about the box centre in a
    seed-chosen 2-D feature subspace), translation -> offset (per-feature
    shift), additive_noise -> sigma. Same spec + same data is always the
    same output.
    """

    kind: str = "identity"
    angle_deg: float = 0.0
    offset: tuple = ()
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise RejectedInput(f"unknown transform kind {self.kind!r}")
        if self.kind == "rotation" and not -180.0 <= self.angle_deg <= 180.0:
            raise RejectedInput("rotation angle outside [-180, 180] degrees")
        if self.kind == "additive_noise" and not 0.0 <= self.sigma <= 1.0:
            raise RejectedInput("noise sigma outside [0, 1]")
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))


def apply_transform(data: Dataset, t: TransformSpec) -> Dataset:
    """Transformed copy of `data`; features re-clipped, labels untouched."""
    x = data.x.copy()
    if t.kind == "identity":
        pass
    elif t.kind == "rotation":
        rng = np.random.default_rng(derive_seed(t.seed, 0xB07))
        i, j = rng.choice(data.dim, size=2, replace=False)
        theta = np.deg2rad(t.angle_deg)
        c = (data.lb + data.ub) / 2.0
        ui, uj = x[:, i] - c, x[:, j] - c
        x[:, i] = c + np.cos(theta) * ui - np.sin(theta) * uj
        x[:, j] = c + np.sin(theta) * ui + np.cos(theta) * uj
    elif t.kind == "translation":
        off = np.asarray(t.offset, dtype=np.float64)
        if off.shape != (data.dim,):
            raise RejectedInput("offset length must match feature dimension")
        if np.abs(off).max() > (data.ub - data.lb):
            raise RejectedInput("offset exceeds box width")
        x = x + off
    elif t.kind == "additive_noise":
        rng = np.random.default_rng(derive_seed(t.seed, 0x4015E))
        x = x + rng.normal(0.0, t.sigma, size=x.shape)
    return replace(data, x=np.clip(x, data.lb, data.ub))


def validate_transformed(f_b: Model, data: Dataset) -> Dataset:
    """Keep only the samples the base model still classifies correctly."""
    if len(data) == 0:
        return data
    return data.subset(predict(f_b, data.x) == data.y)


# --- dataset CSV -------------------------------------------------------
#
# One row per sample: d feature columns then the integer label.

def save_dataset_csv(data: Dataset, path):
    with open(path, "w", encoding="utf-8") as f:
        for row, label in zip(data.x, data.y):
            f.write(",".join(repr(v) for v in row) + f",{label}\n")


def load_dataset_csv(path, lb: float = 0.0, ub: float = 1.0,
                     split: str = "train") -> Dataset:
    xs, ys = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            xs.append([float(v) for v in parts[:-1]])
            ys.append(int(parts[-1]))
    if not xs:
        raise RejectedInput(f"empty dataset file {path}")
    return Dataset(np.array(xs), np.array(ys), lb=lb, ub=ub, split=split)
