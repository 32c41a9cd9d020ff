"""Command-line front end: train-base, gen-pool, fit-ood, serve, attack, eval.

Configuration is a key=value file ('#' starts a comment). Unknown keys are
rejected so typos fail loudly. Every command takes --config plus a few
command-specific flags; flags win over file values where both apply.
"""

import argparse
import sys

import numpy as np

from . import attacks as atk
from .data import load_dataset_csv, save_dataset_csv
from .errors import RejectedInput
from .evaluate import (ExperimentProfile, make_datasets, robustness_table,
                       sweep, train_base)
from .models import load_model, save_model
from .ood import SchedulerKind, fit_detector, load_detector, save_detector
from .pool import generate_pool, load_pool, save_pool
from .rng import derive_seed
from .service import ServiceState, compute_qmax, serve

_INT_KEYS = {"seed", "n_classes", "d", "n_train_per_class", "n_test_per_class",
             "n_tuning_per_class", "base_epochs", "n", "p", "m",
             "n_eval_attack", "n_eval_spsa"}
_FLOAT_KEYS = {"separation", "sigma", "train_lr", "lambda", "max_acc_loss",
               "eps_conv", "k", "attack_epsilon", "t_n", "t_q"}
_STR_KEYS = {"scheduler", "q_max", "base_model", "pool_dirs", "detector",
             "audit_log", "train_csv", "test_csv", "tuning_csv", "hidden"}


def parse_config(path) -> dict:
    cfg = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise RejectedInput(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in _INT_KEYS:
                cfg[key] = int(value)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(value)
            elif key in _STR_KEYS:
                cfg[key] = value
            else:
                raise RejectedInput(f"{path}:{lineno}: unknown key {key!r}")
    return cfg


def profile_from_config(cfg: dict) -> ExperimentProfile:
    kw = {}
    rename = {"lambda": "lam"}
    for key in ("seed", "n_classes", "d", "n_train_per_class", "n_test_per_class",
                "n_tuning_per_class", "separation", "sigma", "base_epochs",
                "train_lr", "n", "p", "lambda", "max_acc_loss", "eps_conv", "m",
                "attack_epsilon", "n_eval_attack", "n_eval_spsa"):
        if key in cfg:
            kw[rename.get(key, key)] = cfg[key]
    if "hidden" in cfg:
        kw["hidden"] = tuple(int(v) for v in cfg["hidden"].split(","))
    if "k" in cfg:
        kw["k_values"] = (cfg["k"],)
    return ExperimentProfile(**kw)


def _cmd_train_base(args):
    cfg = parse_config(args.config)
    profile = profile_from_config(cfg)
    x_train, x_test, x_tau = make_datasets(profile)
    model = train_base(profile, x_train)
    save_model(model, args.out)
    for path_key, ds in (("train_csv", x_train), ("test_csv", x_test),
                         ("tuning_csv", x_tau)):
        if cfg.get(path_key):
            save_dataset_csv(ds, cfg[path_key])
    from .models import accuracy
    print(f"trained {model.arch_id}; test accuracy {accuracy(model, x_test):.4f}")


def _load_split(cfg, key, profile, fallback):
    if cfg.get(key):
        return load_dataset_csv(cfg[key], split=key.split("_")[0])
    return fallback


def _cmd_gen_pool(args):
    cfg = parse_config(args.config)
    profile = profile_from_config(cfg)
    f_b = load_model(args.base)
    d_train, d_test, _ = make_datasets(profile)
    x_train = _load_split(cfg, "train_csv", profile, d_train)
    x_test = _load_split(cfg, "test_csv", profile, d_test)
    pool = generate_pool(f_b, x_train, x_test, profile.gen_config(),
                         pool_id=args.pool_id)
    save_pool(pool, args.out_dir, lam=profile.lam)
    print(f"pool {pool.pool_id}: n={pool.n} p={pool.p} "
          f"accuracies {[round(a, 4) for a in pool.accuracies]}")


def _cmd_fit_ood(args):
    cfg = parse_config(args.config)
    profile = profile_from_config(cfg)
    f_b = load_model(args.base)
    d_train, _, d_tau = make_datasets(profile)
    x_train = _load_split(cfg, "train_csv", profile, d_train)
    x_tau = _load_split(cfg, "tuning_csv", profile, d_tau)
    k = cfg.get("k", profile.k_values[0])
    det = fit_detector(f_b, x_train, x_tau, profile.m, k,
                       derive_seed(profile.seed, 0xD))
    save_detector(det, args.out)
    print(f"detector: m={det.m} k={det.k:g} tau={det.tau:.6f}")


def _cmd_attack(args):
    cfg = parse_config(args.config)
    profile = profile_from_config(cfg)
    model = load_model(args.model)
    data = load_dataset_csv(args.data, split="test")
    factory = {"fgsm": atk.fgsm_config, "pgd": atk.pgd_config,
               "cw_l2": atk.cw_config, "spsa": atk.spsa_config}[args.family]
    acfg = factory(epsilon=args.epsilon, seed=profile.seed)
    examples = atk.gen_attack_set(model, data, acfg)
    atk.save_adv_csv(examples, [acfg] * len(examples), args.out)
    rate = sum("target" in e.success_on for e in examples) / len(examples)
    print(f"{args.family} eps={args.epsilon:g}: {len(examples)} examples, "
          f"success rate {rate:.3f}")


def _cmd_serve(args):
    cfg = parse_config(args.config)
    f_b = load_model(cfg["base_model"])
    pools = [load_pool(d) for d in cfg["pool_dirs"].split(",")]
    scheduler = SchedulerKind(cfg.get("scheduler", "most_confident"))
    detector = load_detector(cfg["detector"]) if cfg.get("detector") else None
    q_raw = cfg.get("q_max", "1000")
    if q_raw == "auto":
        q_max = compute_qmax(cfg["t_n"], len(pools) - 1, cfg["t_q"])
    else:
        q_max = int(q_raw)
    state = ServiceState(f_b, pools, q_max, scheduler=scheduler,
                         detector=detector)
    try:
        answered = serve(state, sys.stdin, sys.stdout,
                         audit_path=cfg.get("audit_log"))
    finally:
        state.close()
    print(f"served {answered} queries", file=sys.stderr)


def _cmd_eval(args):
    cfg = parse_config(args.config)
    profile = profile_from_config(cfg)
    report = robustness_table(profile, out_dir=args.out_dir)
    print(report.table())
    if args.sweeps:
        for axis in ("lambda", "p"):
            rows = sweep(profile, axis, out_dir=args.out_dir)
            pts = ", ".join(f"{r['value']:g}:{r['atr_fgsm']:.3f}" for r in rows)
            print(f"{axis} sweep (value:ATR) {pts}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mtdpool",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train the base classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train_base)

    p = sub.add_parser("gen-pool", help="generate a student pool")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pool-id", type=int, default=1)
    p.set_defaults(fn=_cmd_gen_pool)

    p = sub.add_parser("fit-ood", help="fit and calibrate the OOD detector")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fit_ood)

    p = sub.add_parser("attack", help="generate an adversarial set")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=list(atk.FAMILIES), required=True)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("serve", help="serve predictions over stdin/stdout")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("eval", help="run the robustness evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--sweeps", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except RejectedInput as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
