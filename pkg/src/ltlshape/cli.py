"""Command line entry point: ``ltlshape {synth,train,experiment,compare,plot}``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .automata import ApRegistry, compile_invariant, load_dfa, parse_formula
from .envs import ENV_NAMES, make_env, reference_advice
from .errors import LtlShapeError
from .experiment import (
    METHODS,
    CurveTable,
    ExperimentConfig,
    compare_methods,
    run_experiment,
    write_outputs,
)
from .learning import LearnerConfig, Softmax, run_training
from .mdp import load_mdp
from .plotting import emit_plot
from .product import (
    almost_sure_region,
    build_product,
    parse_distance,
    synthesize_potential,
)

log = logging.getLogger("ltlshape")


def _synth(args):
    mdp = load_mdp(args.mdp)
    if args.dfa:
        aut = load_dfa(args.dfa)
    else:
        aut = compile_invariant(parse_formula(args.advice), ApRegistry(mdp.ap))
    region = almost_sure_region(build_product(mdp, aut))
    distance = parse_distance(args.distance) if args.distance else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = synthesize_potential(mdp, region, args.C, distance)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    table.save(args.out)
    print(f"winning pairs: {int(region.pairs.sum())} of {int(mdp.available.sum())}; wrote {args.out}")


def _seed_path(out: Path, seed: int, seeds: int) -> Path:
    return out if seeds == 1 else out.with_name(f"{out.stem}-seed{seed}{out.suffix}")


def _train(args):
    env_name = args.env
    model = None
    if args.method != "baseline":
        model = reference_advice(env_name, make_env(env_name, seed=0)).synthesize()
    out = Path(args.out)
    rows = []
    for seed in range(args.seeds):
        env = make_env(env_name, seed=seed)
        if model is not None and env_name.startswith("sweep"):
            model = reference_advice(env_name, env).synthesize()
        config = LearnerConfig(alpha=args.alpha, beta=args.beta, exploration=Softmax(args.tau0, args.tau_min),
                               seed=seed, variant=args.method)
        result = run_training(env, config, model.potential if model else None, model.shield if model else None,
                              args.steps, args.window)
        path = _seed_path(out, seed, args.seeds)
        result.state.save(path, variant=args.method)
        rows.append((seed, result))
        print(f"seed {seed}: final window reward {result.window_avg[-1]:.4f}; wrote {path}")
    if args.curves:
        n = len(rows[0][1].window_avg)
        steps = args.window * np.arange(1, n + 1)
        table = CurveTable(
            [args.method] * (n * len(rows)),
            np.repeat([s for s, _ in rows], n),
            np.tile(steps, len(rows)),
            np.concatenate([r.window_avg for _, r in rows]),
            {"env": env_name, "method": args.method, "steps": args.steps, "window": args.window,
             "alpha": args.alpha, "beta": args.beta, "tau0": args.tau0, "tau_min": args.tau_min},
        )
        table.write_csv(args.curves)
        emit_plot(table, Path(args.curves).with_suffix(".svg"))
        print(f"wrote {args.curves}")


def _experiment(args):
    config = ExperimentConfig.load(args.config)
    overrides = {}
    if args.out:
        overrides.update(out=args.out, aggregate_out=None, plot_out=None)
    if args.jobs:
        overrides["jobs"] = args.jobs
    if overrides:
        config = ExperimentConfig.from_dict({**config.to_dict(), **overrides})
    table = run_experiment(config)
    if config.out is None:
        sys.stdout.write(table.aggregate_csv())
        return
    write_outputs(table, config)
    print(f"wrote {config.out}, {config.aggregate_out}, {config.plot_out}")


def _compare(args):
    table = CurveTable.read_csv(args.inp)
    diff, (lo, hi) = compare_methods(table, args.step, args.a, args.b)
    verdict = "excludes 0" if lo > 0 or hi < 0 else "includes 0"
    print(f"{args.a} - {args.b} at step {args.step}: {diff:.6g} (95% CI [{lo:.6g}, {hi:.6g}], {verdict})")


def _plot(args):
    table = CurveTable.read_csv(args.inp)
    emit_plot(table, args.out)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltlshape", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="winning region and potential for an MDP and safety advice")
    s.add_argument("--mdp", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--advice", help="invariant formula, e.g. 'G kitchen'")
    g.add_argument("--dfa", help="safety DFA file")
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--distance", help="const:V | region:scale=..,bonus=..,fallback=.. | target:LABEL,.. | table:FILE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_synth)

    t = sub.add_parser("train", help="train one method on a benchmark")
    t.add_argument("--env", required=True, choices=ENV_NAMES)
    t.add_argument("--method", default="baseline", choices=METHODS)
    t.add_argument("--steps", type=int, default=10_000)
    t.add_argument("--seeds", type=int, default=1)
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument("--beta", type=float, default=0.01)
    t.add_argument("--tau0", type=float, default=5.0)
    t.add_argument("--tau-min", type=float, default=0.05)
    t.add_argument("--window", type=int, default=100)
    t.add_argument("--out", required=True, help="Q-table file (one per seed when --seeds > 1)")
    t.add_argument("--curves", help="also write the learning curves CSV (and an SVG beside it)")
    t.set_defaults(func=_train)

    e = sub.add_parser("experiment", help="run a config-driven multi-seed experiment")
    e.add_argument("--config", required=True)
    e.add_argument("--out", help="override the raw CSV path")
    e.add_argument("--jobs", type=int)
    e.set_defaults(func=_experiment)

    c = sub.add_parser("compare", help="Welch interval between two methods at one step")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--step", type=int, required=True)
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.set_defaults(func=_compare)

    pl = sub.add_parser("plot", help="render a curve CSV as SVG")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (LtlShapeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
