"""Reference evasion attacks: FGSM, PGD, a single-constant L2 C&W, SPSA.

The white-box attacks read model gradients directly; SPSA only ever calls
a prediction oracle (x -> probability vector), which is what lets it run
against a served black-box system. All attacks are pure given
(model/oracle, input, config), so batch generation may be parallelised as
long as per-sample seeds stay derived from (config seed, sample index).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AttackAborted, NumericOverflow, RejectedInput
from .models import Model, _backprop, _forward_pass, _softmax, forward
from .rng import derive_seed

FAMILIES = ("fgsm", "pgd", "cw_l2", "spsa")


@dataclass(frozen=True)
class AttackConfig:
    """Hyper-parameters for one attack family.

    Fields not used by the configured family are carried but inert
    (eta_min in particular is recorded solver metadata for pgd and has no
    effect on the projected-sign iteration).
    """

    family: str
    epsilon: float = 0.3
    step_size: float = 0.5
    eta_min: float = 2.0
    max_iter: int = 100
    cw_c: float = 1.0
    cw_steps: int = 100
    spsa_lr: float = 0.01
    spsa_samples: int = 128
    spsa_delta: float = 0.01
    lb: float = 0.0
    ub: float = 1.0
    targeted: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise RejectedInput(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise RejectedInput("epsilon must be nonnegative")
        if self.lb >= self.ub:
            raise RejectedInput("lb must be below ub")
        if self.max_iter < 0 or self.cw_steps < 0 or self.spsa_samples < 0:
            raise RejectedInput("iteration counts must be nonnegative")
        if self.cw_c < 0:
            raise RejectedInput("cw_c must be nonnegative")


def fgsm_config(**kw) -> AttackConfig:
    return AttackConfig(family="fgsm", **kw)


def pgd_config(**kw) -> AttackConfig:
    return AttackConfig(family="pgd", **kw)


def cw_config(**kw) -> AttackConfig:
    kw.setdefault("step_size", 0.01)
    return AttackConfig(family="cw_l2", **kw)


def spsa_config(**kw) -> AttackConfig:
    kw.setdefault("max_iter", 10)
    return AttackConfig(family="spsa", **kw)


@dataclass
class AdvExample:
    """One crafted input. success_on collects ids of models it fooled."""

    x_orig: np.ndarray
    x_adv: np.ndarray
    y_true: int
    success_on: set = field(default_factory=set)

    @property
    def linf(self) -> float:
        return float(np.abs(self.x_adv - self.x_orig).max())


def _ball(x0: np.ndarray, z: np.ndarray, eps: float) -> np.ndarray:
    return np.minimum(np.maximum(z, x0 - eps), x0 + eps)


def _input_grads(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row d(cross-entropy_i)/dx_i for a batch (sign-exact, unscaled)."""
    z = _forward_pass(model, x)[0][-1]
    dz = _softmax(z)
    dz[np.arange(len(y)), y] -= 1.0
    _, dx = _backprop(model, x, dz)
    if not np.all(np.isfinite(dx)):
        raise NumericOverflow("non-finite input gradient")
    return dx


def _check_batch(model: Model, x, y):
    x = np.ascontiguousarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    if x.shape[1] != model.input_dim or len(x) != len(y):
        raise RejectedInput("attack input shapes do not match the model")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise RejectedInput("label out of range")
    return x, y, single


def fgsm_batch(model: Model, x: np.ndarray, y: np.ndarray,
               cfg: AttackConfig) -> np.ndarray:
    """Single sign-of-gradient step of size epsilon, box-clipped."""
    if cfg.family != "fgsm":
        raise RejectedInput("config is not an fgsm config")
    x, y, _ = _check_batch(model, x, y)
    gx = _input_grads(model, x, y)
    return np.clip(x + cfg.epsilon * np.sign(gx), cfg.lb, cfg.ub)


def pgd_batch(model: Model, x: np.ndarray, y: np.ndarray,
              cfg: AttackConfig) -> np.ndarray:
    """Iterated sign steps projected onto the epsilon-ball and the box."""
    if cfg.family != "pgd":
        raise RejectedInput("config is not a pgd config")
    if cfg.max_iter < 1:
        raise RejectedInput("pgd needs max_iter >= 1")
    x, y, _ = _check_batch(model, x, y)
    x_adv = x.copy()
    for _ in range(cfg.max_iter):
        gx = _input_grads(model, x_adv, y)
        x_adv = _ball(x, x_adv + cfg.step_size * np.sign(gx), cfg.epsilon)
        x_adv = np.clip(x_adv, cfg.lb, cfg.ub)
    return x_adv


def cw_batch(model: Model, x: np.ndarray, y_target: np.ndarray,
             cfg: AttackConfig) -> np.ndarray:
    """Gradient descent on ||delta||_2^2 + c * g(x + delta), box-projected.

    g is the logit margin max(max_{j != t} Z_j - Z_t, 0); success means
    the final margin went strictly negative. delta is bound by the feature
    box only, not by an epsilon ball.
    """
    if cfg.family != "cw_l2":
        raise RejectedInput("config is not a cw_l2 config")
    if cfg.cw_steps < 1:
        raise RejectedInput("cw_l2 needs cw_steps >= 1")
    x, t, _ = _check_batch(model, x, y_target)
    rows = np.arange(len(x))
    delta = np.zeros_like(x)
    for _ in range(cfg.cw_steps):
        z = _forward_pass(model, x + delta)[0][-1]
        if not np.all(np.isfinite(z)):
            raise NumericOverflow("non-finite logits during cw_l2")
        masked = z.copy()
        masked[rows, t] = -np.inf
        j = np.argmax(masked, axis=1)
        margin = masked[rows, j] - z[rows, t]
        grad = 2.0 * delta
        active = margin > 0.0
        if np.any(active):
            seed_vec = np.zeros_like(z)
            seed_vec[rows[active], j[active]] = 1.0
            seed_vec[rows[active], t[active]] = -1.0
            _, dgx = _backprop(model, x + delta, seed_vec)
            grad = grad + cfg.cw_c * dgx
        delta = np.clip(x + delta - cfg.step_size * grad, cfg.lb, cfg.ub) - x
    return x + delta


def cw_margin(model: Model, x_adv: np.ndarray, y_target: np.ndarray) -> np.ndarray:
    """Final logit margins; negative means the target class won."""
    x, t, single = _check_batch(model, x_adv, y_target)
    z = _forward_pass(model, x)[0][-1]
    masked = z.copy()
    masked[np.arange(len(x)), t] = -np.inf
    m = masked.max(axis=1) - z[np.arange(len(x)), t]
    return m[0] if single else m


def _wrap(model, x, x_adv, y) -> AdvExample:
    ex = AdvExample(np.asarray(x, dtype=np.float64), x_adv, int(y))
    if int(np.argmax(forward(model, x_adv))) != int(y):
        ex.success_on.add("target")
    return ex


def fgsm(model: Model, x: np.ndarray, y: int, cfg: AttackConfig) -> AdvExample:
    """FGSM on a single sample."""
    x_adv = fgsm_batch(model, x, [y], cfg)[0]
    return _wrap(model, x, x_adv, y)


def pgd(model: Model, x: np.ndarray, y: int, cfg: AttackConfig) -> AdvExample:
    """PGD on a single sample."""
    x_adv = pgd_batch(model, x, [y], cfg)[0]
    return _wrap(model, x, x_adv, y)


def cw_l2(model: Model, x: np.ndarray, y_target: int, cfg: AttackConfig) -> AdvExample:
    """Targeted C&W on a single sample; success_on set iff margin < 0."""
    x_adv = cw_batch(model, x, [y_target], cfg)[0]
    ex = AdvExample(np.asarray(x, dtype=np.float64), x_adv, int(y_target))
    if cw_margin(model, x_adv, [y_target])[0] < 0.0:
        ex.success_on.add("target")
    return ex


def _margin(probs: np.ndarray, y: int) -> float:
    """Adversarial objective on oracle probabilities: p_other_max - p_true."""
    return float(np.max(np.delete(probs, y)) - probs[y])


def spsa(oracle, x: np.ndarray, y: int, cfg: AttackConfig) -> AdvExample:
    """Gradient-free ascent on the probability margin via antithetic pairs.

    Each of max_iter steps draws spsa_samples Rademacher directions and
    queries the oracle twice per direction (x + delta*v, x - delta*v), so
    the oracle sees exactly max_iter * spsa_samples * 2 calls. Success is
    not evaluated here, keeping that call count exact; the batch driver
    fills it in.
    """
    if cfg.family != "spsa":
        raise RejectedInput("config is not a spsa config")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    x_adv = x.copy()
    d = len(x)
    for _ in range(cfg.max_iter):
        ghat = np.zeros(d)
        for _ in range(cfg.spsa_samples):
            v = rng.integers(0, 2, size=d) * 2.0 - 1.0
            try:
                lp = _margin(np.asarray(oracle(x_adv + cfg.spsa_delta * v)), y)
                lm = _margin(np.asarray(oracle(x_adv - cfg.spsa_delta * v)), y)
            except Exception as err:
                raise AttackAborted(f"oracle failed during spsa: {err}") from err
            ghat += (lp - lm) / (2.0 * cfg.spsa_delta) * v
        if cfg.spsa_samples:
            ghat /= cfg.spsa_samples
        x_adv = np.clip(_ball(x, x_adv + cfg.spsa_lr * ghat, cfg.epsilon),
                        cfg.lb, cfg.ub)
    return AdvExample(x, x_adv, int(y))


def _as_oracle(model_or_oracle):
    if isinstance(model_or_oracle, Model):
        return lambda x: forward(model_or_oracle, x)
    return model_or_oracle


def gen_attack_set(model_or_oracle, data, cfg, skip_errors: bool = False):
    """Run one config (or a mixture of configs) over every sample.

    Returns one AdvExample per (config, sample) pair, in config-major
    order. White-box families run batched; spsa derives a per-sample seed
    from (cfg.seed, sample index). Errors propagate unless skip_errors is
    set, in which case the whole failing config batch (or spsa sample) is
    dropped.
    """
    if len(data) == 0:
        raise RejectedInput("cannot attack an empty dataset")
    cfgs = [cfg] if isinstance(cfg, AttackConfig) else list(cfg)
    out = []
    for c in cfgs:
        try:
            out.extend(_run_config(model_or_oracle, data, c, skip_errors))
        except (NumericOverflow, AttackAborted):
            if not skip_errors:
                raise
    return out


def _run_config(model_or_oracle, data, c, skip_errors):
    x, y = data.x, data.y.astype(np.intp)
    if c.family == "spsa":
        oracle = _as_oracle(model_or_oracle)
        out = []
        for i in range(len(x)):
            ci = replace(c, seed=derive_seed(c.seed, i))
            try:
                ex = spsa(oracle, x[i], int(y[i]), ci)
                if int(np.argmax(oracle(ex.x_adv))) != int(y[i]):
                    ex.success_on.add("target")
            except AttackAborted:
                if skip_errors:
                    continue
                raise
            out.append(ex)
        return out
    model = model_or_oracle
    if c.family == "fgsm":
        x_adv = fgsm_batch(model, x, y, c)
        success = np.argmax(_softmax(_forward_pass(model, x_adv)[0][-1]), axis=1) != y
    elif c.family == "pgd":
        x_adv = pgd_batch(model, x, y, c)
        success = np.argmax(_softmax(_forward_pass(model, x_adv)[0][-1]), axis=1) != y
    else:
        t = np.full(len(y), c.targeted, dtype=np.intp) if c.targeted is not None \
            else (y + 1) % model.n_classes
        x_adv = cw_batch(model, x, t, c)
        success = cw_margin(model, x_adv, t) < 0.0
    out = []
    for i in range(len(x)):
        ex = AdvExample(x[i].copy(), x_adv[i], int(y[i]))
        if success[i]:
            ex.success_on.add("target")
        out.append(ex)
    return out


# --- adversarial-set CSV ------------------------------------------------
#
# Columns: sample id, attack family, epsilon, d original features,
# d adversarial features, y_true, success flag.

def save_adv_csv(examples, cfgs, path):
    """Write examples labelled by their generating configs (parallel lists)."""
    with open(path, "w", encoding="utf-8") as f:
        for i, (ex, c) in enumerate(zip(examples, cfgs)):
            orig = ",".join(repr(v) for v in ex.x_orig)
            adv = ",".join(repr(v) for v in ex.x_adv)
            hit = int("target" in ex.success_on)
            f.write(f"{i},{c.family},{c.epsilon!r},{orig},{adv},{ex.y_true},{hit}\n")


def load_adv_csv(path):
    """Read back (examples, families, epsilons) from an adversarial-set file."""
    examples, families, epsilons = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.strip().split(",")
            if len(parts) < 5:
                continue
            d = (len(parts) - 5) // 2
            x0 = np.array([float(v) for v in parts[3:3 + d]])
            x1 = np.array([float(v) for v in parts[3 + d:3 + 2 * d]])
            ex = AdvExample(x0, x1, int(parts[-2]))
            if parts[-1] == "1":
                ex.success_on.add("target")
            examples.append(ex)
            families.append(parts[1])
            epsilons.append(float(parts[2]))
    return examples, families, epsilons
