"""Command-line interface.

Subcommands: simulate, oracle, estimate, montecarlo, check. Every flag
has a config-file equivalent (flat `key = value` lines, namespaced
dgp./study./net./train./hessian.); flags override the file. Exit codes:
0 success, 1 check or estimation failure, 2 usage or configuration error.
"""

import argparse
import json
import sys

import numpy as np

from . import baselines, debiased
from .harness import (
    ConfigFileError,
    parse_config_file,
    run_checks,
    run_study,
    study_config_from_dict,
)
from .simulator import ConfigError, dim_limits, oracle_gte, read_csv, simulate, write_csv


def _add_dgp_flags(p):
    p.add_argument("--k", type=int, help="consideration-set size (dgp.set_size)")
    p.add_argument("--spec", help="score specification name (dgp.score_spec)")
    p.add_argument("--q", type=float, help="treatment probability (dgp.treat_prob)")
    p.add_argument("--queries", type=int, help="queries per dataset (dgp.n_queries)")
    p.add_argument("--items", type=int, help="catalog size (dgp.n_items)")
    p.add_argument("--noise-sd", type=float, help="outcome noise SD (dgp.noise_sd)")
    p.add_argument("--seed", type=int, help="base seed")


def _flat_from_args(args, extra=()):
    """Collect flag overrides as namespaced config keys."""
    flat = {}
    pairs = [
        ("k", "dgp.set_size"),
        ("spec", "dgp.score_spec"),
        ("q", "dgp.treat_prob"),
        ("queries", "dgp.n_queries"),
        ("items", "dgp.n_items"),
        ("noise_sd", "dgp.noise_sd"),
        ("seed", "dgp.seed"),
        *extra,
    ]
    for attr, key in pairs:
        val = getattr(args, attr, None)
        if val is not None:
            flat[key] = str(val)
    return flat


def _load_flat(args, extra=()):
    flat = parse_config_file(args.config) if getattr(args, "config", None) else {}
    flat.update(_flat_from_args(args, extra))
    return flat


def _study_config(args, extra=()):
    flat = _load_flat(args, extra)
    if "dgp.seed" in flat:
        flat.setdefault("study.base_seed", flat["dgp.seed"])
    return study_config_from_dict(flat)


def _write_out(text, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _cmd_simulate(args):
    cfg = _study_config(args).dgp
    data = simulate(cfg)
    write_csv(data, args.out)
    return 0


def _cmd_oracle(args):
    cfg = _study_config(args).dgp
    n = args.n if args.n is not None else 100_000
    gte, mc_se = oracle_gte(cfg, n)
    tau_ht, tau_ha = dim_limits(cfg, n)
    _write_out(
        json.dumps(
            {"gte": gte, "mc_se": mc_se, "tau_ht": tau_ht, "tau_ha": tau_ha,
             "k": cfg.set_size, "n_oracle": n},
            indent=2,
        ),
        args.out,
    )
    return 0


def _cmd_estimate(args):
    study = _study_config(args, extra=[("folds", "study.folds")])
    data = read_csv(args.infile)
    if args.q is not None:
        from dataclasses import replace

        data.config = replace(data.config, treat_prob=args.q)
    q = data.config.treat_prob
    names = [v.strip() for v in args.estimator.split(",") if v.strip()]
    reports = {}
    for name in names:
        if name == "db":
            rep = debiased.estimate_gte(
                data, folds=study.folds, net_config=study.net,
                train_config=study.train, policy=study.hessian,
                seed=study.base_seed,
            )
            reports[name] = json.loads(rep.to_json())
        elif name == "ht-dim":
            reports[name] = json.loads(baselines.ht_dim(data, q).to_json())
        elif name == "ha-dim":
            reports[name] = json.loads(baselines.ha_dim(data).to_json())
        elif name == "ipw":
            reports[name] = json.loads(baselines.ipw(data, q).to_json())
        elif name in ("aipw", "pdl"):
            model = baselines.fit_outcome_model(data, study.net, study.train)
            r = (baselines.aipw(data, q, model) if name == "aipw"
                 else baselines.pdl(data, outcome_model=model))
            reports[name] = json.loads(r.to_json())
        else:
            raise ConfigFileError(f"unknown estimator {name!r}")
    payload = reports[names[0]] if len(names) == 1 else reports
    _write_out(json.dumps(payload, indent=2), args.out)
    return 0


def _cmd_montecarlo(args):
    extra = [
        ("replications", "study.replications"),
        ("folds", "study.folds"),
        ("estimators", "study.estimators"),
        ("epochs", "train.epochs"),
    ]
    study = _study_config(args, extra)
    report = run_study(study)
    _write_out(report.to_csv(), args.out_csv)
    if args.out_json:
        _write_out(report.to_json(), args.out_json)
    return 0


def _cmd_check(args):
    ok, results = run_checks(seed=args.seed if args.seed is not None else 0)
    for name, passed, detail, check_seed in results:
        status = "PASS" if passed else "FAIL"
        line = f"{status}  {name}"
        if not passed:
            line += f"  ({detail}; seed {check_seed})"
        print(line)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gtesim",
        description="Simulate creator-side experiments with algorithmic "
                    "interference and estimate the global treatment effect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset CSV")
    _add_dgp_flags(p)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("oracle", help="ground-truth GTE and DIM limits")
    _add_dgp_flags(p)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--n", type=int, help="oracle Monte Carlo draws")
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(fn=_cmd_oracle)

    p = sub.add_parser("estimate", help="estimate the GTE from a dataset CSV")
    p.add_argument("--in", dest="infile", required=True, help="input CSV")
    p.add_argument("--estimator", default="db",
                   help="comma list from db,ht-dim,ha-dim,ipw,aipw,pdl")
    p.add_argument("--q", type=float, help="treatment probability")
    p.add_argument("--folds", type=int, help="cross-fitting folds (db)")
    p.add_argument("--seed", type=int, help="estimation seed")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(fn=_cmd_estimate)

    p = sub.add_parser("montecarlo", help="replicated simulation study")
    _add_dgp_flags(p)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--replications", type=int, help="study.replications")
    p.add_argument("--folds", type=int, help="study.folds")
    p.add_argument("--estimators", help="comma list (study.estimators)")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--out-csv", help="summary table CSV path (default stdout)")
    p.add_argument("--out-json", help="full report JSON path")
    p.set_defaults(fn=_cmd_montecarlo)

    p = sub.add_parser("check", help="run the invariant suite")
    p.add_argument("--seed", type=int, help="suite seed")
    p.set_defaults(fn=_cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigFileError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
