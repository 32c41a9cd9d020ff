"""Student-model pool generation.

Each student is a Laplace-perturbed copy of the base model retrained on
its own transformed training set until validation accuracy stops moving;
the first p students additionally get adversarial training on a mixture
of attacks. A student is only emitted once its clean accuracy is within
max_acc_loss of the base model; if retraining cannot recover that, the
noise scale is backed off and the student is rebuilt from scratch.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from .data import Dataset, TransformSpec, apply_transform, validate_transformed
from .errors import GenerationFailure, RejectedInput
from .models import Model, accuracy, load_model, save_model, train
from .rng import derive_seed


@dataclass(frozen=True)
class GenConfig:
    """Knobs for one pool build."""

    n: int
    p: int
    lam: float = 0.1
    max_acc_loss: float = 0.02
    eps_conv: float = 0.005
    lambda_backoff: float = 0.5
    lambda_floor: float = 1e-4
    max_epochs: int = 500           # liveness cap on one retraining run
    repair_rounds: int = 3          # post-adversarial clean-accuracy repairs
    train_lr: float = 0.01
    train_batch: int | None = 32    # None = full-batch
    mixture: tuple = ()
    transforms: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= self.n:
            raise RejectedInput("need 0 <= p <= n")
        if self.lam <= 0 or self.eps_conv <= 0:
            raise RejectedInput("lam and eps_conv must be positive")
        if not 0 < self.lambda_backoff < 1:
            raise RejectedInput("lambda_backoff must be in (0, 1)")
        if len(self.transforms) != self.n:
            raise RejectedInput("need exactly one transform per student")
        if self.p > 0 and not self.mixture:
            raise RejectedInput("adversarial training needs a non-empty mixture")


def default_transforms(n: int, seed: int, d: int = 16) -> tuple:
    """n distinct transforms cycling rotation/translation/noise.

    Magnitudes are chosen to genuinely diversify the retraining sets while
    keeping nearly every transformed sample recognisable by the base model
    (the sets are filtered through validate_transformed before use).
    """
    rng = np.random.default_rng(derive_seed(seed, 0x7F))
    specs = []
    for i in range(n):
        kind = ("rotation", "translation", "additive_noise")[i % 3]
        s = derive_seed(seed, i)
        if kind == "rotation":
            specs.append(TransformSpec("rotation", angle_deg=float(rng.uniform(25, 60)),
                                       seed=s))
        elif kind == "translation":
            off = rng.uniform(-0.1, 0.1, size=d)
            specs.append(TransformSpec("translation", offset=tuple(off), seed=s))
        else:
            specs.append(TransformSpec("additive_noise",
                                       sigma=float(rng.uniform(0.04, 0.08)), seed=s))
    return tuple(specs)


def default_mixture(seed: int = 0) -> tuple:
    """Adversarial-training attack mixture: two fgsm bounds plus pgd."""
    return (atk.fgsm_config(epsilon=0.1, seed=derive_seed(seed, 1)),
            atk.fgsm_config(epsilon=0.3, seed=derive_seed(seed, 2)),
            atk.pgd_config(epsilon=0.3, seed=derive_seed(seed, 3)))


def perturb_weights(f_b: Model, lam: float, seed: int) -> Model:
    """Add independent Laplace(0, lam) noise to every weight and bias."""
    if lam <= 0:
        raise RejectedInput("noise scale must be positive")
    rng = np.random.default_rng(seed)
    ws = tuple(w + rng.laplace(0.0, lam, size=w.shape) for w in f_b.weights)
    bs = tuple(b + rng.laplace(0.0, lam, size=b.shape) for b in f_b.biases)
    return Model(ws, bs)


@dataclass
class RetrainResult:
    model: Model
    epochs: int
    converged: bool
    history: tuple    # (epoch, validation accuracy) at each checkpoint


def _mixture_set(model: Model, data: Dataset, mixture) -> Dataset:
    """Dataset of adversarial versions of `data` under every mixture attack."""
    examples = atk.gen_attack_set(model, data, list(mixture))
    x = np.stack([e.x_adv for e in examples])
    y = np.array([e.y_true for e in examples])
    return Dataset(x, y, lb=data.lb, ub=data.ub, split=data.split)


def build_adv_training_set(model: Model, clean: Dataset, mixture, seed: int) -> Dataset:
    """Mixture attacks on `clean` shuffled 1:1 with repeated clean samples."""
    advset = _mixture_set(model, clean, mixture)
    reps = max(1, len(advset) // max(len(clean), 1))
    x = np.concatenate([advset.x] + [clean.x] * reps)
    y = np.concatenate([advset.y] + [clean.y] * reps)
    order = np.random.default_rng(derive_seed(seed, 0xADF)).permutation(len(x))
    return Dataset(x[order], y[order], lb=clean.lb, ub=clean.ub, split=clean.split)


def retrain(f_s: Model, x_retrain: Dataset, x_test: Dataset, eps_conv: float,
            adv: bool = False, mixture=None, lr: float = 0.01,
            max_epochs: int = 500, seed: int = 0,
            batch_size: int | None = 32) -> RetrainResult:
    """Train until validation accuracy stabilises, checking every 5 epochs.

    Validation accuracy is measured only at epoch counts divisible by 5
    and training halts when a checkpoint moves less than eps_conv from the
    previous one. With adv set, validation runs on adversarial versions of
    x_test (generated once, against the incoming model). A run that never
    settles stops at max_epochs and returns the best checkpoint seen, with
    converged=False.
    """
    if eps_conv <= 0:
        raise RejectedInput("eps_conv must be positive")
    if adv and not mixture:
        raise RejectedInput("adversarial retraining needs a mixture")
    val = _mixture_set(f_s, x_test, mixture) if adv else x_test
    model = f_s
    acc_tmp = accuracy(model, val)
    history = [(0, acc_tmp)]
    best = (acc_tmp, model)
    epochs = 0
    converged = False
    while epochs < max_epochs:
        model = train(model, x_retrain, epochs=5, lr=lr,
                      seed=derive_seed(seed, epochs), batch_size=batch_size)
        epochs += 5
        acc = accuracy(model, val)
        history.append((epochs, acc))
        if acc >= best[0]:
            best = (acc, model)
        if abs(acc - acc_tmp) < eps_conv:
            converged = True
            break
        acc_tmp = acc
    if not converged:
        model = best[1]
    return RetrainResult(model, epochs, converged, tuple(history))


@dataclass
class StudentRecord:
    model: Model
    adv_trained: bool
    transform: TransformSpec
    accuracy: float
    lambdas_tried: tuple    # noise scales attempted, in order


@dataclass
class StudentPool:
    pool_id: int
    students: list          # of StudentRecord
    acc_b: float

    @property
    def n(self) -> int:
        return len(self.students)

    @property
    def p(self) -> int:
        return sum(s.adv_trained for s in self.students)

    @property
    def accuracies(self) -> list:
        return [s.accuracy for s in self.students]

    def models(self) -> list:
        return [s.model for s in self.students]


def generate_student(f_b: Model, x_train: Dataset, x_test: Dataset,
                     cfg: GenConfig, index: int,
                     acc_b: float | None = None) -> StudentRecord:
    """Build student `index`: perturb, retrain, optionally harden.

    Students with index < p are adversarially trained on the mixture
    applied to their transformed training set, then repaired on clean data
    if that costed too much clean accuracy. Whenever the accuracy gate
    stays unmet (after clean retraining, or after the repair rounds that
    follow adversarial training), the student is rebuilt from scratch with
    a smaller noise scale; running out of backoff room raises
    GenerationFailure.
    """
    if index >= cfg.n:
        raise RejectedInput(f"student index {index} out of range for n={cfg.n}")
    if acc_b is None:
        acc_b = accuracy(f_b, x_test)
    seed_i = derive_seed(cfg.seed, index)
    t = cfg.transforms[index]
    x_ti = validate_transformed(f_b, apply_transform(x_train, t))
    if len(x_ti) == 0:
        raise GenerationFailure(f"transform for student {index} left no valid samples")

    gate = lambda acc: acc_b - acc <= cfg.max_acc_loss
    adv = index < cfg.p
    lam = cfg.lam
    tried = []
    attempt = 0
    while lam >= cfg.lambda_floor:
        tried.append(lam)
        f_s = perturb_weights(f_b, lam, derive_seed(seed_i, attempt, 1))
        f_s = retrain(f_s, x_ti, x_test, cfg.eps_conv, lr=cfg.train_lr,
                      max_epochs=cfg.max_epochs, batch_size=cfg.train_batch,
                      seed=derive_seed(seed_i, attempt, 2)).model
        acc_s = accuracy(f_s, x_test)
        if gate(acc_s):
            if not adv:
                return StudentRecord(f_s, adv, t, acc_s, tuple(tried))
            adv_set = build_adv_training_set(f_s, x_ti, cfg.mixture,
                                             derive_seed(seed_i, attempt, 3))
            f_s = retrain(f_s, adv_set, x_test, cfg.eps_conv, adv=True,
                          mixture=cfg.mixture, lr=cfg.train_lr,
                          max_epochs=cfg.max_epochs, batch_size=cfg.train_batch,
                          seed=derive_seed(seed_i, attempt, 4)).model
            acc_s = accuracy(f_s, x_test)
            for rounds in range(cfg.repair_rounds):
                if gate(acc_s):
                    break
                f_s = retrain(f_s, x_ti, x_test, cfg.eps_conv, lr=cfg.train_lr,
                              max_epochs=cfg.max_epochs,
                              batch_size=cfg.train_batch,
                              seed=derive_seed(seed_i, attempt, 5, rounds)).model
                acc_s = accuracy(f_s, x_test)
            if gate(acc_s):
                return StudentRecord(f_s, adv, t, acc_s, tuple(tried))
        lam *= cfg.lambda_backoff
        attempt += 1
    raise GenerationFailure(
        f"student {index}: accuracy gate unmet down to lambda={lam:.2e}")


def generate_pool(f_b: Model, x_train: Dataset, x_test: Dataset,
                  cfg: GenConfig, pool_id: int = 1) -> StudentPool:
    """Full pool of n students with per-index derived seeds."""
    acc_b = accuracy(f_b, x_test)
    students = [generate_student(f_b, x_train, x_test, cfg, i, acc_b=acc_b)
                for i in range(cfg.n)]
    return StudentPool(pool_id, students, acc_b)


# --- pool manifest ------------------------------------------------------

_MANIFEST_VERSION = 1


def _spec_to_dict(t: TransformSpec) -> dict:
    return {"kind": t.kind, "angle_deg": t.angle_deg, "offset": list(t.offset),
            "sigma": t.sigma, "seed": t.seed}


def _spec_from_dict(d: dict) -> TransformSpec:
    return TransformSpec(d["kind"], angle_deg=d["angle_deg"],
                         offset=tuple(d["offset"]), sigma=d["sigma"],
                         seed=d["seed"])


def save_pool(pool: StudentPool, dirpath, lam: float | None = None):
    """Write student model files plus a versioned JSON manifest."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for i, s in enumerate(pool.students):
        fname = f"student_{i:02d}.model"
        save_model(s.model, os.path.join(dirpath, fname))
        entries.append({"path": fname, "adv_trained": s.adv_trained,
                        "accuracy": s.accuracy,
                        "transform": _spec_to_dict(s.transform),
                        "lambdas_tried": list(s.lambdas_tried)})
    manifest = {"version": _MANIFEST_VERSION, "pool_id": pool.pool_id,
                "n": pool.n, "p": pool.p, "lambda": lam, "acc_b": pool.acc_b,
                "students": entries}
    with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_pool(dirpath) -> StudentPool:
    with open(os.path.join(dirpath, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != _MANIFEST_VERSION:
        raise RejectedInput(f"unsupported manifest version {manifest.get('version')}")
    students = []
    for e in manifest["students"]:
        students.append(StudentRecord(load_model(os.path.join(dirpath, e["path"])),
                                      e["adv_trained"],
                                      _spec_from_dict(e["transform"]),
                                      e["accuracy"],
                                      tuple(e["lambdas_tried"])))
    return StudentPool(manifest["pool_id"], students, manifest["acc_b"])
