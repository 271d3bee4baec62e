"""Command line entry point: ``llpcs <command> ...``.

Experiment commands (``train``, ``sweep``, ``multirun``) read one TOML or
JSON config::

    out = "runs/demo"

    [data]
    kind = "synthetic"          # or "csv" with source/target[/test] paths
    seed = 0
    [data.synth]
    n_source = 20000
    n_target = 20000
    n_test = 10000

    [bagging]
    regime = "random"           # random | correlated | mixed | two-stage
    ks = [8, 128]
    seed = 0

    [train]
    methods = ["BL-WFA", "LR"]
    epochs = 10
    lr = 0.003

    trials = 10                 # multirun only
    [grid]                      # sweep only
    lr = [0.001, 0.01]
    lambda = [0.1, 1.0]

Every random choice is driven by a named seed in the config;
``--seed-override`` replaces all of them at once.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import bagging as Bg
from . import bound_lab
from . import data as D
from . import trainer as T
from .config import load_config
from .model import ConfigurationError

log = logging.getLogger("llpcs")

BOUND_KINDS = ("lemma1", "theorem1", "appendix-c")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config plumbing


def _read_config(path, seed_override=None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    cfg = load_config(path)
    cfg["_base_dir"] = str(path.parent)
    if seed_override is not None:
        cfg = _override_seeds(cfg, seed_override)
    return cfg


def _override_seeds(cfg: dict, seed: int) -> dict:
    cfg = dict(cfg)
    cfg["seed"] = seed
    for section in ("data", "bagging"):
        cfg[section] = {**cfg.get(section, {}), "seed": seed}
    cfg["train"] = {**cfg.get("train", {}), "model_seed": seed, "bag_seed": seed, "shuffle_seed": seed}
    return cfg


def _resolve(cfg: dict, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def _load_table(cfg: dict, path, domain: str) -> D.Dataset:
    path = _resolve(cfg, path)
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    schema_path = cfg["data"].get("schema")
    schema_path = _resolve(cfg, schema_path) if schema_path else path.with_suffix(".schema.json")
    if not schema_path.exists():
        raise UsageError(f"schema file not found: {schema_path}")
    ds = D.load_csv(path, D.Schema.load(schema_path), domain=domain)
    return ds


def load_datasets(cfg: dict) -> tuple[D.Dataset, D.Dataset, D.Dataset]:
    """``(source, target_train, target_test)`` from the ``[data]`` section."""
    data = cfg.get("data", {"kind": "synthetic"})
    kind = data.get("kind", "synthetic")
    seed = int(data.get("seed", 0))
    if kind == "synthetic":
        spec = D.SynthSpec.from_dict(data.get("synth", {}))
        source, target, test = D.generate_synthetic(spec, seed)
    elif kind == "csv":
        for key in ("source", "target"):
            if key not in data:
                raise UsageError(f"[data] needs a {key!r} path for kind = 'csv'")
        source = _load_table(cfg, data["source"], "source")
        target = _load_table(cfg, data["target"], "target")
        if "test" in data:
            test = _load_table(cfg, data["test"], "target")
        else:
            target, test = D.split_train_test(target, float(data.get("test_fraction", 0.2)), seed)
    else:
        raise UsageError(f"unknown data kind {kind!r}")
    if data.get("standardize_features", False):
        source, target, test, _ = D.standardize_features(source, target, test)
    if data.get("standardize", False):
        source, target, test, _ = D.standardize_labels(source, target, test)
    return source, target, test


def bag_dataset(target: D.Dataset, seed: int, regime: str, k=None, feature=None, sizes=None,
                mode="SBB") -> Bg.BagCollection:
    """Dispatch to one bagging regime (module level so it pickles for workers)."""
    if regime == "random":
        return Bg.random_bags(target, int(k), seed)
    if regime == "correlated":
        if feature is None:
            raise UsageError("correlated bagging needs a feature")
        return Bg.correlated_bags(target, feature, int(k), seed)
    if regime == "mixed":
        return Bg.mixed_bags(target, sizes or Bg.MIXED_SIZES, mode, seed)
    if regime == "two-stage":
        return Bg.two_stage_bags(target, int(k), seed)
    raise UsageError(f"unknown bagging regime {regime!r}")


def baggers(cfg: dict) -> list[tuple[object, partial]]:
    """One ``(label, bagger)`` per configured bag size."""
    b = cfg.get("bagging", {})
    regime = b.get("regime", "random")
    common = {"regime": regime, "feature": b.get("feature"), "sizes": b.get("sizes"),
              "mode": b.get("mode", "SBB")}
    if regime == "mixed":
        return [(f"mixed-{common['mode']}", partial(bag_dataset, **common))]
    ks = b.get("ks", [b["k"]] if "k" in b else None)
    if not ks:
        raise UsageError("[bagging] needs k or ks")
    return [(int(k), partial(bag_dataset, k=int(k), **common)) for k in ks]


def train_configs(cfg: dict) -> list[T.TrainConfig]:
    section = dict(cfg.get("train", {}))
    methods = section.pop("methods", [section.pop("method", "BL-WFA")])
    per_method = section.pop("per_method", {})
    section.pop("by_k", None)
    bag_seed = cfg.get("bagging", {}).get("seed")
    if bag_seed is not None:
        section.setdefault("bag_seed", int(bag_seed))
    out = []
    for m in methods:
        out.append(T.TrainConfig.from_dict({**section, **per_method.get(m, {}), "method": m}))
    return out


def _by_k(config: T.TrainConfig, cfg: dict, k) -> T.TrainConfig:
    """Apply ``[train.by_k.<k>]`` overrides (e.g. bags_per_batch per bag size)."""
    by_k = cfg.get("train", {}).get("by_k", {})
    extra = by_k.get(str(k), {})
    return replace(config, **extra) if extra else config


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("out")
    if out is None:
        raise UsageError("no output directory: pass --out or set 'out' in the config")
    return Path(out)


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    cfg = _read_config(args.config, None)
    cfg.pop("_base_dir", None)
    seed = int(cfg.pop("seed", 0))
    if args.seed_override is not None:
        seed = args.seed_override
    spec = D.SynthSpec.from_dict(cfg.get("synth", cfg))
    out = _out_dir(args, {})
    out.mkdir(parents=True, exist_ok=True)
    source, target, test = D.generate_synthetic(spec, seed)
    for name, ds in (("source", source), ("target", target), ("test", test)):
        D.save_csv(ds, out / f"{name}.csv")
    echo = {"seed": seed, "spec": spec.to_dict()}
    (out / "spec.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(source)} source, {len(target)} target, {len(test)} test rows to {out}")
    return 0


def cmd_bag(args) -> int:
    path = Path(args.data)
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    schema = D.Schema.load(args.schema) if args.schema else D.Schema.load(path.with_suffix(".schema.json"))
    ds = D.load_csv(path, schema)
    seed = args.seed if args.seed_override is None else args.seed_override
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    bags = bag_dataset(ds, seed, args.regime, args.k, args.feature, sizes, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Bg.save_bags(bags, out)
    print(f"wrote {len(bags)} bags ({len(bags.dropped)} rows dropped) to {out}")
    return 0


def _runs(args):
    cfg = _read_config(args.config, args.seed_override)
    out = _out_dir(args, cfg)
    source, target, test = load_datasets(cfg)
    return cfg, out, source, target, test


def cmd_train(args) -> int:
    cfg, out, source, target, test = _runs(args)
    results = []
    for label, bagger in baggers(cfg):
        for base in train_configs(cfg):
            config = _by_k(base, cfg, label)
            bags = bagger(target, config.bag_seed)
            _, result = T.train(config, source, target, bags, test)
            result.meta.update(bags.params, regime=bags.regime)
            results.append(result)
            log.info("%s k=%s test mse %.4f", config.method, label, result.test_mse)
    csv_path, json_path = T.write_results(results, out)
    print(f"{len(results)} run(s); results in {csv_path} and {json_path}")
    return 0


def cmd_multirun(args) -> int:
    cfg, out, source, target, test = _runs(args)
    trials = int(cfg.get("trials", 10))
    results = []
    for label, bagger in baggers(cfg):
        for base in train_configs(cfg):
            config = _by_k(base, cfg, label)
            mr = T.multi_run(config, trials, source, target, test, bagger, jobs=args.jobs)
            results += mr.results
            print(f"{config.method:>14} k={label}: {mr.formatted()}")
    csv_path, json_path = T.write_results(results, out)
    print(f"results in {csv_path} and {json_path}")
    return 0


def cmd_sweep(args) -> int:
    cfg, out, source, target, test = _runs(args)
    grids = cfg.get("grid", T.DEFAULT_GRIDS)
    frac = float(cfg.get("validation_fraction", 0.1))
    rows, best = [], {}
    for label, bagger in baggers(cfg):
        for base in train_configs(cfg):
            config = _by_k(base, cfg, label)
            bags = bagger(target, config.bag_seed)
            gr = T.grid_search(config, grids, source, target, bags, frac, jobs=args.jobs)
            for row in gr.rows:
                rows.append({"k": label, **row})
            best[f"{config.method}/k={label}"] = gr.best.to_dict()
    out.mkdir(parents=True, exist_ok=True)
    keys = ["k"] + list(T.TrainConfig.__dataclass_fields__) + ["val_bag_mse", "best"]
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(_cell(row[key]) for key in keys))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "sweep.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{len(rows)} grid point(s); results in {out / 'sweep.csv'}")
    return 0


def _cell(v) -> str:
    if isinstance(v, (list, tuple)):
        return "/".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_bound_check(args) -> int:
    if args.kind not in BOUND_KINDS:
        raise UsageError(f"unknown bound kind {args.kind!r}; choose from {', '.join(BOUND_KINDS)}")
    cfg = _read_config(args.config, None)
    p = {**{k: v for k, v in cfg.items() if not k.startswith("_")}, **dict(args.param or [])}
    seed = int(p.get("seed", 0)) if args.seed_override is None else args.seed_override
    if args.kind == "lemma1":
        dim = int(p.get("dim", 4))
        report = bound_lab.check_lemma1(
            bound_lab.random_mlp_sampler(dim, int(p.get("max_width", 8))),
            bound_lab.shifted_gaussian_sampler(dim, int(p.get("max_m", 50)), int(p.get("max_k", 8))),
            int(p.get("trials", 1000)), seed=seed)
        print(report.summary_line())
    elif args.kind == "theorem1":
        m, k = int(p.get("m", 2000)), int(p.get("k", 2))
        rng = np.random.default_rng(seed)
        # fixed predictor vs uniform labels on a fixed 2mk sample
        residuals = rng.uniform(size=2 * m * k) - rng.uniform(size=2 * m * k)
        report = bound_lab.check_theorem1_step(residuals, k, int(p.get("resamples", 10_000)), seed=seed)
        print(report.summary_line())
        print(f"failure rate {report.params['failure_rate']:.4g} vs bound {report.params['bound']:.4g}")
    else:
        k, m = int(p.get("k", 16)), int(p.get("m", 10_000))
        bag, inst = bound_lab.appendix_c_experiment(k, m, seed)
        expected = 1.0 / (12 * k)
        rel = abs(bag - expected) / expected
        report = bound_lab.BoundReport(
            "appendix-c", 1, int(rel > 0.05), {},
            {"k": k, "m": m, "seed": seed, "bag_loss": bag, "instance_loss": inst, "expected_bag_loss": expected})
        print(report.summary_line())
        print(f"bag loss {bag:.5f} (1/(12k) = {expected:.5f}), instance loss {inst:.5f}")
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / f"{args.kind}.json"
        report.write(out)
    return 0 if report.passed else 1


# --------------------------------------------------------------------------
# parser


def _param(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--out", help="output directory (or file for bag/bound-check)")
    common.add_argument("--seed-override", type=int, help="replace every seed in the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps and trials")

    parser = argparse.ArgumentParser(prog="llpcs", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synth", parents=[common], help="write a synthetic source/target/test split")

    p = sub.add_parser("bag", parents=[common], help="bag the rows of a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--regime", default="random", choices=["random", "correlated", "mixed", "two-stage"])
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--feature")
    p.add_argument("--sizes", help="comma separated sizes for the mixed regime")
    p.add_argument("--mode", default="SBB", choices=["SBB", "BBB"])
    p.add_argument("--seed", type=int, default=0)

    for name, text in (("train", "train each method once"), ("sweep", "grid search per method"),
                       ("multirun", "seeded repeated trials")):
        sub.add_parser(name, parents=[common], help=text)

    p = sub.add_parser("bound-check", parents=[common], help="empirical bound validators")
    p.add_argument("kind", help=f"one of {', '.join(BOUND_KINDS)}")
    p.add_argument("--param", type=_param, action="append", metavar="KEY=VALUE")
    return parser


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "bag": cmd_bag,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "multirun": cmd_multirun,
    "bound-check": cmd_bound_check,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LLPCS_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"llpcs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, D.DataError, Bg.BaggingError, ValueError) as exc:
        print(f"llpcs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except T.TrainingAborted as exc:
        print(f"llpcs {args.command}: training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
