"""Command-line experiment runner.

Subcommands:

* ``gen-config``   — write the default JSON config.
* ``train``        — meta-train a model per the config's train section.
* ``eval``         — evaluate one scheme over a test task stream.
* ``compare``      — tabulate previously written reports and render figures.
* ``oracle-check`` — run the brute-force cross-validation suites.

The config is a single JSON document with ``model``, ``train``, ``eval``
and ``seeds`` sections; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import torch

from . import bench, figures
from .model import ModelConfig, save_checkpoint
from .softcp import SoftCpHyper
from .train import (
    TrainConfig,
    save_mlp_checkpoint,
    train,
    train_jl,
    write_log,
)

DEFAULT_CONFIG = {
    "model": {
        "num_layers": 6,
        "model_dim": 16,
        "num_heads": 2,
        "ffn_dim": 1024,
        "num_classes": 4,
        "input_dim": 2,
    },
    "train": {
        "epochs": 200,
        "tasks_per_epoch": 256,
        "realizations_per_task": 50,
        "batch_size": 32,
        "lr_init": 2e-4,
        "lr_min": 2e-5,
        "cosine_period": 50,
        "objective": "log_loss",
        "n": 19,
        "l": 10,
        "m": 9,
        "task": "qpsk",
        "val_tasks": 256,
        "warm_start": None,
        "alpha": 0.1,
        "c_q": 0.1,
        "kappa": 0.1,
        "lam": 1.0,
        "jl_hidden_dim": 64,
    },
    "eval": {
        "tasks": 128,
        "realizations": 10,
        "test_inputs": 5,
        "alpha": 0.1,
        "n": 19,
        "l": 10,
        "m": 9,
        "figures": True,
    },
    "seeds": {"train": 1, "eval": 2},
}


class ConfigError(ValueError):
    pass


def load_config(path=None) -> dict:
    """Merge a user config over the defaults, rejecting unknown keys."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    with open(path) as fh:
        user = json.load(fh)
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, val in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[section][key] = val
    return cfg


def _train_config(cfg: dict, seed_override=None) -> TrainConfig:
    tr = cfg["train"]
    seed = seed_override if seed_override is not None else cfg["seeds"]["train"]
    objective = tr["objective"]
    return TrainConfig(
        epochs=tr["epochs"],
        tasks_per_epoch=tr["tasks_per_epoch"],
        realizations_per_task=tr["realizations_per_task"],
        batch_size=tr["batch_size"],
        lr_init=tr["lr_init"],
        lr_min=tr["lr_min"],
        cosine_period=tr["cosine_period"],
        seed=int(seed),
        objective="log_loss" if objective == "jl_log_loss" else objective,
        hyper=SoftCpHyper(
            alpha=tr["alpha"], c_q=tr["c_q"], kappa=tr["kappa"], lam=tr["lam"]
        ),
        n=tr["n"],
        l=tr["l"],
        m=tr["m"],
        task=tr["task"],
        val_tasks=tr["val_tasks"],
        warm_start=tr["warm_start"],
    )


def cmd_gen_config(args) -> int:
    text = json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "config.json")
        with open(path, "w") as fh:
            fh.write(text)
        print(path)
    else:
        sys.stdout.write(text)
    return 0


def cmd_train(args) -> int:
    if args.deterministic:
        torch.set_num_threads(1)
    cfg = load_config(args.config)
    if args.alpha is not None:
        cfg["train"]["alpha"] = args.alpha
    tcfg = _train_config(cfg, seed_override=args.seed)
    objective = cfg["train"]["objective"]
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "checkpoint.npz")
    if objective == "jl_log_loss":
        mlp, log = train_jl(
            tcfg,
            num_classes=cfg["model"]["num_classes"],
            input_dim=cfg["model"]["input_dim"],
            hidden_dim=cfg["train"]["jl_hidden_dim"],
        )
        save_mlp_checkpoint(ckpt_path, mlp, tcfg.seed)
    else:
        mcfg = ModelConfig(**cfg["model"])
        model, log = train(mcfg, tcfg)
        save_checkpoint(ckpt_path, model, tcfg.seed, objective)
    write_log(os.path.join(out, "train_log.ndjson"), log)
    if cfg["eval"]["figures"] and log:
        figures.render_training_log(log, out)
    print(ckpt_path)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ev = cfg["eval"]
    alpha = args.alpha if args.alpha is not None else ev["alpha"]
    seed = args.seed if args.seed is not None else cfg["seeds"]["eval"]
    stream = bench.StreamConfig(
        tasks=ev["tasks"],
        realizations=ev["realizations"],
        test_inputs=ev["test_inputs"],
        n=ev["n"],
        l=ev["l"],
        m=ev["m"],
    )
    out = args.out or "."
    report = bench.run_eval(
        args.scheme,
        args.checkpoint,
        stream,
        alpha,
        int(seed),
        out_dir=out,
        deterministic=args.deterministic,
    )
    if ev["figures"]:
        figures.render_comparison([report], out)
    print(
        f"{report.scheme}: coverage={report.coverage:.4f} "
        f"mean_set_size={report.mean_set_size:.4f} "
        f"prediction_evals={report.prediction_evals}"
    )
    return 0


def cmd_compare(args) -> int:
    reports = [bench.load_report(d) for d in args.reports]
    out = args.out or "."
    rows = bench.compare(reports, out_dir=out)
    figures.render_comparison(reports, out)
    width = max(len(r["scheme"]) for r in rows)
    for row in rows:
        flag = "  BELOW FLOOR" if row["below_coverage_floor"] else ""
        print(
            f"{row['scheme']:<{width}}  coverage={row['coverage']:.4f}  "
            f"size={row['mean_set_size']:.4f}  "
            f"vs ICL_FCP={row['reduction_vs_ICL_FCP_pct']:+.2f}%  "
            f"evals={row['prediction_evals']}{flag}"
        )
    return 0


def cmd_oracle_check(args) -> int:
    ok, results = bench.oracle_check(seed=args.seed or 0)
    for res in results:
        status = "PASS" if res["passed"] else "FAIL"
        detail = {k: v for k, v in res.items() if k not in ("name", "passed")}
        print(f"[{status}] {res['name']} {json.dumps(detail, sort_keys=True)}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cplab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="seed override")
        sp.add_argument("--alpha", type=float, help="miscoverage level override")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible mode")

    sp = sub.add_parser("gen-config", help="write the default config")
    common(sp)
    sp.set_defaults(fn=cmd_gen_config)

    sp = sub.add_parser("train", help="meta-train a checkpoint")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate one scheme")
    common(sp)
    sp.add_argument("--scheme", required=True, choices=bench.SCHEMES)
    sp.add_argument("--checkpoint", required=True, help="checkpoint .npz path")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("compare", help="tabulate report directories")
    common(sp)
    sp.add_argument("reports", nargs="+", help="directories with summary.json")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("oracle-check", help="run brute-force validation suites")
    common(sp)
    sp.set_defaults(fn=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
