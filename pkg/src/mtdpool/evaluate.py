"""Metrics and experiment drivers: ATR, FRQ, scheduling precision,
robustness tables, and the noise-scale / adversarial-count sweeps.

Everything here is deterministic given an ExperimentProfile: identical
profiles and seeds produce byte-identical CSV output.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from .data import Dataset, gen_blobs
from .errors import RejectedInput
from .models import Model, accuracy, forward, init_model, predict, train
from .ood import OodDetector, fit_detector, schedule_most_confident, schedule_ood
from .pool import (GenConfig, StudentPool, build_adv_training_set,
                   default_mixture, default_transforms, generate_pool, retrain)
from .rng import derive_seed


# --- average transferability rate ----------------------------------------

@dataclass
class AtrMatrix:
    """Pairwise transfer rates; matrix[i][j] is undefined (nan) on the
    diagonal and wherever model i produced no successful examples."""

    matrix: np.ndarray
    aggregate: float
    n_adv: np.ndarray    # successful-example count per source model


def _fools(model: Model, ex: atk.AdvExample) -> bool:
    return int(predict(model, ex.x_adv[None, :])[0]) != ex.y_true


def atr(models, adv_sets) -> AtrMatrix:
    """Transfer-rate matrix across models.

    adv_sets[i] must have been generated against models[i] on the shared
    attack set. Entry (i, j) is the fraction of i's successful examples
    that also fool j; the aggregate averages the defined off-diagonal
    entries, so sources with no successes are excluded rather than
    counted as zero transfer.
    """
    n = len(models)
    if n < 2 or len(adv_sets) != n:
        raise RejectedInput("atr needs >= 2 models with matching example sets")
    matrix = np.full((n, n), np.nan)
    n_adv = np.zeros(n, dtype=int)
    successes = []
    for i in range(n):
        hits = [ex for ex in adv_sets[i] if _fools(models[i], ex)]
        successes.append(hits)
        n_adv[i] = len(hits)
    for i in range(n):
        if n_adv[i] == 0:
            continue
        for j in range(n):
            if j == i:
                continue
            transferred = sum(_fools(models[j], ex) for ex in successes[i])
            matrix[i, j] = transferred / n_adv[i]
    off = matrix[~np.eye(n, dtype=bool)]
    defined = off[~np.isnan(off)]
    aggregate = float(defined.mean()) if len(defined) else float("nan")
    return AtrMatrix(matrix, aggregate, n_adv)


# --- failed repeated queries ----------------------------------------------

def frq(pool1_successes, later_pools, predict_fn, direct: bool = False):
    """Fraction of previously successful examples that fail on later pools.

    predict_fn(pool, x) -> class index is the configured scheduler's view
    of a pool (the default replay mode). With direct=True the scheduler is
    bypassed and every (example, student) pair counts as one replay
    against that student model. Returns None when there is nothing to
    replay.
    """
    if not pool1_successes:
        return None
    replays = 0
    failures = 0
    for pool in later_pools:
        for ex in pool1_successes:
            if direct:
                for s in pool.students:
                    replays += 1
                    if int(predict(s.model, ex.x_adv[None, :])[0]) == ex.y_true:
                        failures += 1
            else:
                replays += 1
                if int(predict_fn(pool, ex.x_adv)) == ex.y_true:
                    failures += 1
    return failures / replays


def scheduling_precision(records, tags):
    """(clean -> undefended rate, adversarial -> defended rate).

    `tags` labels each audit record "benign" or "adversarial", aligned by
    position.
    """
    if len(records) != len(tags) or any(t not in ("benign", "adversarial")
                                        for t in tags):
        raise RejectedInput("every record needs a benign/adversarial tag")
    clean = [r for r, t in zip(records, tags) if t == "benign"]
    adv = [r for r, t in zip(records, tags) if t == "adversarial"]
    clean_rate = (sum(r.routed_to == "undefended" for r in clean) / len(clean)
                  if clean else float("nan"))
    adv_rate = (sum(r.routed_to == "defended" for r in adv) / len(adv)
                if adv else float("nan"))
    return clean_rate, adv_rate


# --- experiment profile and drivers ----------------------------------------

@dataclass(frozen=True)
class ExperimentProfile:
    """Fully pinned description of one desk-scale experiment."""

    seed: int = 7
    n_classes: int = 3
    d: int = 16
    n_train_per_class: int = 150
    n_test_per_class: int = 150
    n_tuning_per_class: int = 120
    separation: float = 0.5
    sigma: float = 0.05
    hidden: tuple = (32, 16)
    base_epochs: int = 400
    train_lr: float = 0.05
    n: int = 4
    p: int = 3
    lam: float = 0.1
    max_acc_loss: float = 0.02
    eps_conv: float = 0.005
    m: int = 3
    k_values: tuple = (90.0,)
    attack_epsilon: float = 0.3
    atr_epsilon: float = 0.08    # transfer studies need a non-saturating bound
    n_eval_attack: int = 150     # samples per white-box attack column
    n_eval_spsa: int = 25        # spsa is ~2500 oracle calls per sample
    lambda_grid: tuple = (0.05, 0.1, 0.2, 0.4)
    p_grid: tuple = (0, 1, 2, 3, 4)

    def gen_config(self, n=None, p=None, lam=None, pool_seed=None) -> GenConfig:
        """Pool build config; pool_seed distinguishes independent pools.

        Transforms and the adversarial-training mixture derive from the
        pool seed, so renewed pools differ in their training data as well
        as in their weight noise.
        """
        n = self.n if n is None else n
        seed = derive_seed(self.seed, 0xC) if pool_seed is None \
            else derive_seed(self.seed, 0xC, pool_seed)
        return GenConfig(n=n,
                         p=self.p if p is None else p,
                         lam=self.lam if lam is None else lam,
                         max_acc_loss=self.max_acc_loss,
                         eps_conv=self.eps_conv,
                         train_lr=self.train_lr,
                         mixture=default_mixture(derive_seed(seed, 0xA)),
                         transforms=default_transforms(n, derive_seed(seed, 0xB),
                                                       d=self.d),
                         seed=seed)


def make_datasets(profile: ExperimentProfile):
    """(train, test, tuning): disjoint splits of one generated blob set."""
    per_class = (profile.n_train_per_class + profile.n_test_per_class
                 + profile.n_tuning_per_class)
    full = gen_blobs(profile.n_classes, per_class, profile.d, profile.separation,
                     derive_seed(profile.seed, 1), sigma=profile.sigma)
    order = np.random.default_rng(derive_seed(profile.seed, 2)).permutation(len(full))
    n_tr = profile.n_train_per_class * profile.n_classes
    n_te = profile.n_test_per_class * profile.n_classes
    cut = lambda idx, tag: Dataset(full.x[idx], full.y[idx], lb=full.lb,
                                   ub=full.ub, split=tag)
    return (cut(order[:n_tr], "train"),
            cut(order[n_tr:n_tr + n_te], "test"),
            cut(order[n_tr + n_te:], "tuning"))


def train_base(profile: ExperimentProfile, x_train: Dataset) -> Model:
    dims = (profile.d,) + profile.hidden + (profile.n_classes,)
    f_b = init_model(dims, derive_seed(profile.seed, 4))
    return train(f_b, x_train, profile.base_epochs, profile.train_lr,
                 derive_seed(profile.seed, 5))


def eval_attacks(profile: ExperimentProfile) -> dict:
    """White-box attack configs used for the evaluation columns."""
    eps = profile.attack_epsilon
    s = derive_seed(profile.seed, 6)
    return {"fgsm": atk.fgsm_config(epsilon=eps, seed=derive_seed(s, 1)),
            "pgd": atk.pgd_config(epsilon=eps, seed=derive_seed(s, 2)),
            "cw_l2": atk.cw_config(epsilon=eps, seed=derive_seed(s, 3)),
            "spsa": atk.spsa_config(epsilon=eps, seed=derive_seed(s, 4))}


def pool_predict_most_confident(pool: StudentPool, x) -> int:
    idx, probs = schedule_most_confident(pool, x)
    return int(np.argmax(probs))


def make_ood_predictor(det: OodDetector, f_b: Model):
    def predict_fn(pool, x):
        _, probs, _, _ = schedule_ood(pool, det, f_b, x)
        return int(np.argmax(probs))
    return predict_fn


def _served_accuracy(predict_fn, pool, x, y) -> float:
    hits = sum(int(predict_fn(pool, xi)) == yi for xi, yi in zip(x, y))
    return hits / len(y)


@dataclass
class EvalReport:
    """Rows of (variant, attack, k, accuracy) plus any attached extras."""

    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add(self, variant, attack, k, acc):
        self.rows.append({"variant": variant, "attack": attack,
                          "k": k, "accuracy": acc})

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("variant,attack,k,accuracy\n")
            for r in self.rows:
                k = "" if r["k"] is None else repr(r["k"])
                f.write(f"{r['variant']},{r['attack']},{k},{r['accuracy']!r}\n")

    def lookup(self, variant, attack, k=None) -> float:
        for r in self.rows:
            if r["variant"] == variant and r["attack"] == attack and r["k"] == k:
                return r["accuracy"]
        raise KeyError((variant, attack, k))

    def table(self) -> str:
        keys = list(dict.fromkeys((r["variant"], r["k"]) for r in self.rows))
        attacks_ = list(dict.fromkeys(r["attack"] for r in self.rows))
        labels = [v + (f" (k={k:g})" if k is not None else "") for v, k in keys]
        width = max(len(s) for s in labels) + 2
        lines = [" " * width + "  ".join(f"{a:>8}" for a in attacks_)]
        for (v, k), label in zip(keys, labels):
            cells = []
            for a in attacks_:
                try:
                    cells.append(f"{self.lookup(v, a, k):8.3f}")
                except KeyError:
                    cells.append(" " * 8)
            lines.append(f"{label:<{width}}" + "  ".join(cells))
        return "\n".join(lines)


def robustness_table(profile: ExperimentProfile, out_dir=None) -> EvalReport:
    """Accuracy per (defense variant x attack x threshold percentile).

    Variants: the undefended base model, an adversarially trained fixed
    model, the pool behind most-confident scheduling, and the pool behind
    OOD-powered scheduling (one row per configured k). White-box attack
    sets are generated against the base model; spsa attacks each variant
    black-box through that variant's own probability oracle.
    """
    x_train, x_test, x_tau = make_datasets(profile)
    f_b = train_base(profile, x_train)
    cfg = profile.gen_config()

    advfix = build_adv_training_set(f_b, x_train, cfg.mixture,
                                    derive_seed(profile.seed, 0xF1))
    f_adv = retrain(f_b, advfix, x_test, cfg.eps_conv, adv=True,
                    mixture=cfg.mixture, lr=cfg.train_lr,
                    seed=derive_seed(profile.seed, 0xF2)).model

    pool = generate_pool(f_b, x_train, x_test, cfg)
    detectors = {k: fit_detector(f_b, x_train, x_tau, profile.m, k,
                                 derive_seed(profile.seed, 0xF3))
                 for k in profile.k_values}

    rng = np.random.default_rng(derive_seed(profile.seed, 0xF4))
    idx = rng.permutation(len(x_test))[:profile.n_eval_attack]
    eval_set = x_test.subset(np.sort(idx))
    spsa_set = eval_set.subset(np.arange(min(profile.n_eval_spsa, len(eval_set))))

    attack_cfgs = eval_attacks(profile)
    white = {name: atk.gen_attack_set(f_b, eval_set, c)
             for name, c in attack_cfgs.items() if name != "spsa"}

    # each variant is (served probability oracle); prediction = argmax
    oracles = {
        "undefended": lambda x: forward(f_b, x),
        "adv_trained_fixed": lambda x: forward(f_adv, x),
        "mtd_most_confident":
            lambda x: schedule_most_confident(pool, x)[1],
    }
    for k, det in detectors.items():
        oracles[("mtd_ood_powered", k)] = \
            lambda x, _d=det: schedule_ood(pool, _d, f_b, x)[1]

    report = EvalReport()
    for key, oracle in oracles.items():
        variant, k = key if isinstance(key, tuple) else (key, None)
        fn = lambda x, _o=oracle: int(np.argmax(_o(x)))
        report.add(variant, "clean", k, _eval_fn_accuracy(fn, eval_set))
        for aname, examples in white.items():
            report.add(variant, aname, k, _eval_fn_on_examples(fn, examples))
        report.add(variant, "spsa", k,
                   _spsa_accuracy(oracle, spsa_set, attack_cfgs["spsa"]))

    report.extras["pool"] = pool
    report.extras["base_model"] = f_b
    report.extras["detectors"] = detectors
    report.extras["adv_fixed"] = f_adv
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report.to_csv(os.path.join(out_dir, "robustness.csv"))
    return report


def _eval_fn_accuracy(fn, data: Dataset) -> float:
    return sum(int(fn(x)) == y for x, y in zip(data.x, data.y)) / len(data)


def _eval_fn_on_examples(fn, examples) -> float:
    return sum(int(fn(ex.x_adv)) == ex.y_true for ex in examples) / len(examples)


def _spsa_accuracy(oracle, data: Dataset, cfg) -> float:
    """Attack the oracle black-box, then measure accuracy on the results."""
    hits = 0
    for i in range(len(data)):
        ci = replace(cfg, seed=derive_seed(cfg.seed, i))
        ex = atk.spsa(oracle, data.x[i], int(data.y[i]), ci)
        hits += int(np.argmax(oracle(ex.x_adv))) == int(data.y[i])
    return hits / len(data)


def sweep(profile: ExperimentProfile, axis: str, out_dir=None):
    """Per-grid-point (clean accuracy, fgsm accuracy, fgsm ATR).

    axis "lambda" varies the perturbation noise scale at the profile's p;
    axis "p" varies the adversarially trained count at the profile's
    lambda. Accuracy is measured through most-confident scheduling; ATR is
    computed per-student with direct model access.
    """
    if axis not in ("lambda", "p"):
        raise RejectedInput("axis must be 'lambda' or 'p'")
    grid = profile.lambda_grid if axis == "lambda" else profile.p_grid
    if not grid:
        raise RejectedInput("sweep grid is empty")
    x_train, x_test, _ = make_datasets(profile)
    f_b = train_base(profile, x_train)
    rng = np.random.default_rng(derive_seed(profile.seed, 0x5E))
    idx = np.sort(rng.permutation(len(x_test))[:profile.n_eval_attack])
    eval_set = x_test.subset(idx)
    fgsm_cfg = eval_attacks(profile)["fgsm"]
    atr_cfg = replace(fgsm_cfg, epsilon=profile.atr_epsilon)

    rows = []
    for value in grid:
        cfg = profile.gen_config(lam=value) if axis == "lambda" \
            else profile.gen_config(p=int(value))
        pool = generate_pool(f_b, x_train, x_test, cfg)
        adv_sets = [atk.gen_attack_set(s.model, eval_set, atr_cfg)
                    for s in pool.students]
        transfer = atr(pool.models(), adv_sets)
        examples = atk.gen_attack_set(f_b, eval_set, fgsm_cfg)
        rows.append({
            "axis": axis, "value": value,
            "clean_accuracy": _eval_fn_accuracy(
                lambda x: pool_predict_most_confident(pool, x), eval_set),
            "fgsm_accuracy": _eval_fn_on_examples(
                lambda x: pool_predict_most_confident(pool, x), examples),
            "atr_fgsm": transfer.aggregate,
        })
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(rows, os.path.join(out_dir, f"sweep_{axis}.csv"))
    return rows


# --- CSV / plot-data dumps ------------------------------------------------

def write_sweep_csv(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("axis,value,clean_accuracy,fgsm_accuracy,atr_fgsm\n")
        for r in rows:
            f.write(f"{r['axis']},{r['value']!r},{r['clean_accuracy']!r},"
                    f"{r['fgsm_accuracy']!r},{r['atr_fgsm']!r}\n")


def write_atr_csv(m: AtrMatrix, path):
    with open(path, "w", encoding="utf-8") as f:
        n = len(m.matrix)
        f.write("source," + ",".join(f"to_{j}" for j in range(n)) + ",n_adv\n")
        for i in range(n):
            cells = ",".join("" if np.isnan(v) else repr(v) for v in m.matrix[i])
            f.write(f"{i},{cells},{m.n_adv[i]}\n")
        f.write(f"aggregate,{m.aggregate!r}\n")


def write_scores_csv(scores, flags, path):
    """Score dump for threshold-calibration plots: id, score, flagged."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("sample,score,flagged\n")
        for i, (s, fl) in enumerate(zip(scores, flags)):
            f.write(f"{i},{s!r},{int(fl)}\n")


def write_xy_csv(xs, ys, path, xname="x", yname="y"):
    """Plain (x, y) series for external plotting."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{xname},{yname}\n")
        for x, y in zip(xs, ys):
            f.write(f"{x!r},{y!r}\n")
