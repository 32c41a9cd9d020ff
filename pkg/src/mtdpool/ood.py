"""Cluster-conditioned OOD scoring and query scheduling.

Feature representations are the base model's penultimate-layer
activations. In-distribution features are partitioned with k-means; each
cluster keeps its mean and a regularised precision matrix, and the score
of a query is its smallest per-cluster Mahalanobis distance. A threshold
calibrated as a percentile of held-out tuning scores splits queries into
"looks benign" and "looks adversarial", which drives routing between the
undefended and the adversarially trained halves of a student pool.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInput
from .models import Model, predict_proba
from .rng import derive_seed

COV_REG = 1e-6   # added to covariance diagonals before inversion


class SchedulerKind(enum.Enum):
    MOST_CONFIDENT = "most_confident"
    OOD_POWERED = "ood_powered"


@dataclass(frozen=True)
class OodDetector:
    arch_id: str          # fingerprint of the feature-extractor model
    layer_index: int      # penultimate layer position
    means: np.ndarray     # (m, F)
    precisions: np.ndarray  # (m, F, F)
    m: int
    k: float              # percentile order used for calibration
    tau: float

    def __post_init__(self):
        if self.m < 1 or len(self.means) != self.m:
            raise RejectedInput("cluster count mismatch")
        if self.tau < 0:
            raise RejectedInput("threshold must be nonnegative")


def extract_features(f_b: Model, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations (after relu) for one input vector."""
    return extract_features_batch(f_b, np.asarray(x, dtype=np.float64)[None, :])[0]


def extract_features_batch(f_b: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != f_b.input_dim:
        raise RejectedInput("feature extraction input has wrong shape")
    a = x
    for w, b in zip(f_b.weights[:-1], f_b.biases[:-1]):
        a = np.maximum(a @ w.T + b, 0.0)
    return a


def _kmeans(points: np.ndarray, m: int, seed: int, max_iter: int = 100):
    """Seeded random-partition k-means; ties assign to the lowest cluster."""
    n = len(points)
    rng = np.random.default_rng(seed)
    assign = rng.integers(0, m, size=n)
    for c in range(m):                       # guarantee non-empty start
        if not np.any(assign == c):
            assign[c % n] = c
    centroids = np.stack([points[assign == c].mean(axis=0) for c in range(m)])
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)   # argmin breaks ties low
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(m):
            members = points[assign == c]
            if len(members):                 # empty cluster keeps its centroid
                centroids[c] = members.mean(axis=0)
    return centroids, assign


def fit_detector(f_b: Model, x_train, x_tau, m: int, k: float,
                 seed: int) -> OodDetector:
    """Cluster training features, model each cluster, calibrate tau.

    Per-cluster covariances get COV_REG added to the diagonal before
    inversion, so singleton or rank-deficient clusters never fail. tau is
    the k-th nearest-rank percentile of the tuning-set scores.
    """
    if len(x_train) < m:
        raise RejectedInput("need at least m training samples")
    if not 0 < k <= 100:
        raise RejectedInput("percentile order must be in (0, 100]")
    feats = extract_features_batch(f_b, x_train.x)
    _, assign = _kmeans(feats, m, derive_seed(seed, 0x4A))
    fdim = feats.shape[1]
    means = np.zeros((m, fdim))
    precisions = np.zeros((m, fdim, fdim))
    for c in range(m):
        members = feats[assign == c]
        if len(members) == 0:
            members = feats
        means[c] = members.mean(axis=0)
        centered = members - means[c]
        cov = centered.T @ centered / max(len(members) - 1, 1)
        precisions[c] = np.linalg.inv(cov + COV_REG * np.eye(fdim))
    det = OodDetector(f_b.arch_id, len(f_b.weights) - 2, means, precisions,
                      m, float(k), tau=0.0)
    scores = ood_score_batch(det, f_b, x_tau.x)
    tau = threshold_from_percentile(scores, k)
    return OodDetector(f_b.arch_id, det.layer_index, means, precisions,
                       m, float(k), tau=float(tau))


def ood_score(det: OodDetector, f_b: Model, x: np.ndarray) -> float:
    """Minimum cluster Mahalanobis distance of the query's features."""
    return float(ood_score_batch(det, f_b, np.asarray(x, dtype=np.float64)[None, :])[0])


def ood_score_batch(det: OodDetector, f_b: Model, x: np.ndarray) -> np.ndarray:
    feats = extract_features_batch(f_b, x)
    dists = np.empty((len(feats), det.m))
    for c in range(det.m):
        delta = feats - det.means[c]
        q = np.einsum("ni,ij,nj->n", delta, det.precisions[c], delta)
        dists[:, c] = np.sqrt(np.maximum(q, 0.0))
    return dists.min(axis=1)


def threshold_from_percentile(scores, k: float) -> float:
    """Nearest-rank percentile: the ceil(k/100 * N)-th smallest score."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise RejectedInput("cannot take a percentile of no scores")
    if not 0 < k <= 100:
        raise RejectedInput("percentile order must be in (0, 100]")
    ordered = np.sort(scores)
    rank = int(np.ceil(k / 100.0 * scores.size))
    return float(ordered[rank - 1])


def is_adversarial(det: OodDetector, f_b: Model, x: np.ndarray) -> bool:
    """Flag a query whose score reaches the threshold (boundary included)."""
    return ood_score(det, f_b, x) >= det.tau


# --- scheduling ---------------------------------------------------------

def _confidences(pool, x: np.ndarray):
    """Per-student probability vectors and their top-class confidences."""
    probs = [predict_proba(s.model, np.asarray(x)[None, :])[0] for s in pool.students]
    return probs, np.array([p.max() for p in probs])


def schedule_most_confident(pool, x: np.ndarray):
    """Pick the student with the highest top-class probability.

    Returns (student index, probability vector); ties go to the lowest
    index.
    """
    if pool.n == 0:
        raise RejectedInput("cannot schedule over an empty pool")
    probs, conf = _confidences(pool, x)
    idx = int(np.argmax(conf))
    return idx, probs[idx]


def schedule_ood(pool, det: OodDetector, f_b: Model, x: np.ndarray):
    """Route by OOD flag, then pick the most confident in that half.

    Flagged queries go to the adversarially trained students, clean ones
    to the undefended students. If either half is empty the whole pool
    competes. Returns (student index, probability vector, routed_to,
    score) with routed_to in {"defended", "undefended"}.
    """
    if pool.n == 0:
        raise RejectedInput("cannot schedule over an empty pool")
    score = ood_score(det, f_b, x)
    flagged = score >= det.tau
    probs, conf = _confidences(pool, x)
    candidates = [i for i, s in enumerate(pool.students)
                  if s.adv_trained == flagged]
    if not candidates:
        candidates = list(range(pool.n))
    best = candidates[int(np.argmax(conf[candidates]))]
    routed = "defended" if pool.students[best].adv_trained else "undefended"
    return best, probs[best], routed, score


# --- detector file ------------------------------------------------------
#
# Versioned text: header, shape line (m, k, tau, arch, layer, feature
# dim), then one line per mean vector and per precision-matrix row, with
# full-precision floats.

_DET_MAGIC = "MTDPOOL-DETECTOR v1"


def save_detector(det: OodDetector, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(_DET_MAGIC + "\n")
        fdim = det.means.shape[1]
        f.write(f"{det.m} {det.k!r} {det.tau!r} {det.arch_id} {det.layer_index} {fdim}\n")
        for c in range(det.m):
            f.write(" ".join(repr(v) for v in det.means[c]) + "\n")
            for row in det.precisions[c]:
                f.write(" ".join(repr(v) for v in row) + "\n")


def load_detector(path) -> OodDetector:
    with open(path, "r", encoding="utf-8") as f:
        if f.readline().strip() != _DET_MAGIC:
            raise RejectedInput(f"not a detector file: {path}")
        m_s, k_s, tau_s, arch, layer_s, fdim_s = f.readline().split()
        m, fdim = int(m_s), int(fdim_s)
        means = np.empty((m, fdim))
        precisions = np.empty((m, fdim, fdim))
        for c in range(m):
            means[c] = [float(v) for v in f.readline().split()]
            for r in range(fdim):
                precisions[c, r] = [float(v) for v in f.readline().split()]
    return OodDetector(arch, int(layer_s), means, precisions, m,
                       float(k_s), float(tau_s))
