"""``mslab`` command line: train, analyze, loophole, eval, gradcheck, sweep."""

from __future__ import annotations

import argparse
import csv
import io as _io
import os
import sys

from .autodiff import ContractError
from .config import ConfigError, TrainConfig, parse_config, parse_config_text, serialize_config
from .evaluation import sample_grid
from .io import CheckpointError, IDXError, atomic_write, load_checkpoint

EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out-dir", help="output directory (default: $MSLAB_OUT or ./mslab_out)")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--mode", choices=("plain", "ss", "ms"))
        p.add_argument("--lambda-d", type=float)
        p.add_argument("--lambda-g", type=float)
        p.add_argument("--steps", type=int, help="override the number of training steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a GAN and write metrics, checkpoints and samples")
    _common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("analyze", help="check the closed-form results on finite distributions")
    _common(p, training=False)
    p.add_argument("--dist", action="append", default=[], help="extra x,y,p CSV distribution (repeatable)")
    p.add_argument("--n-random", type=int, default=20)

    p = sub.add_parser("loophole", help="collapsed vs diverse sets under SS and MS classifiers")
    _common(p, training=False)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds starting at --seed")
    p.add_argument("--steps", type=int, default=1500, help="classifier training steps")

    p = sub.add_parser("eval", help="mode coverage of a checkpoint's generator")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, help="number of generated samples (default: eval_samples)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    _common(p, training=False)
    p.add_argument("--seeds", type=int, default=50)

    p = sub.add_parser("sweep", help="lambda_d x lambda_g ablation grid")
    _common(p)
    p.add_argument("--lambda-d-grid", default="0.5,1,4,7")
    p.add_argument("--lambda-g-grid", default="0,0.01,0.1,0.3")
    return parser


def _out_dir(args) -> str:
    out = args.out_dir or os.environ.get("MSLAB_OUT") or "mslab_out"
    os.makedirs(out, exist_ok=True)
    return out


def _config(args) -> TrainConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = parse_config(args.config)
    else:
        cfg = TrainConfig()
    changes = {}
    for flag, key in (("mode", "mode"), ("lambda_d", "lambda_d"), ("lambda_g", "lambda_g"),
                      ("seed", "seed"), ("steps", "steps")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    return cfg.replace(**changes) if changes else cfg


def _require(path: str) -> None:
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode("utf-8"))


def _report(checks, path: str) -> int:
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    _write_csv(path, ["check", "passed", "detail"], [[c.name, int(c.passed), c.detail] for c in checks])
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .gan import TrainingDiverged, dataset_from_config, generate_samples, train

    cfg = _config(args)
    if args.checkpoint:
        _require(args.checkpoint)
    out = _out_dir(args)
    dataset = dataset_from_config(cfg)
    try:
        run = train(cfg, dataset, out_dir=out, resume=args.checkpoint)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    atomic_write(os.path.join(out, "config.cfg"), serialize_config(cfg).encode("utf-8"))
    shape = getattr(dataset, "image_shape", None)
    name = "samples.pgm" if shape else "samples.csv"
    sample_grid(lambda n, s: generate_samples(run.G, n, s, cfg.latent_dim), 64 if shape else 1000,
                cfg.seed, os.path.join(out, name), shape)
    last = run.metrics[-1] if run.metrics else None
    if last is not None:
        print(f"step {last.step}: modes covered {last.modes_covered}, mode KL {last.mode_kl}")
    print(f"wrote {out}/metrics.csv, {out}/final.ckpt, {out}/{name}")
    return 0


def cmd_analyze(args) -> int:
    from .verify import analyze_suite, read_distribution

    extra = []
    for path in args.dist:
        _require(path)
        extra.append(read_distribution(path))
    checks = analyze_suite(extra, n_random=args.n_random, seed=args.seed or 0)
    return _report(checks, os.path.join(_out_dir(args), "analyze.csv"))


def cmd_loophole(args) -> int:
    from .experiments import loophole_pipeline

    rows = []
    start = args.seed or 0
    for seed in range(start, start + args.seeds):
        run = loophole_pipeline(seed, steps=args.steps)
        for res in (run.ss, run.ms):
            rows.append([seed, res.mode, repr(res.diverse)] + [repr(c) for c in res.collapsed]
                        + [repr(res.margin), int(res.some_collapsed_not_worse)])
            print(f"seed {seed} {res.mode}: diverse {res.diverse:.4f}, collapsed "
                  f"{', '.join(f'{c:.4f}' for c in res.collapsed)}, margin {res.margin:.4f}")
    n_sets = len(rows[0]) - 5
    header = ["seed", "mode", "diverse"] + [f"collapsed_{i}" for i in range(n_sets)] + [
        "margin", "collapsed_not_worse"]
    path = os.path.join(_out_dir(args), "loophole.csv")
    _write_csv(path, header, rows)
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    from .gan import dataset_from_config, evaluate_modes, init_run

    _require(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = parse_config_text(ckpt.config_text)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.samples is not None:
        cfg = cfg.replace(eval_samples=args.samples)
    dataset = dataset_from_config(cfg)
    run = init_run(cfg, dataset)
    run.G = ckpt.paramset("G.", run.G)
    step = int(ckpt.optim["meta.step"][0]) if "meta.step" in ckpt.optim else 0
    rep = evaluate_modes(run, dataset, step)
    path = os.path.join(_out_dir(args), "eval.csv")
    kl = repr(rep.kl) if rep.kl_defined else ""
    _write_csv(path, ["step", "modes_covered", "n_modes", "mode_kl", "assigned_fraction"],
               [[step, rep.covered, len(rep.counts), kl, repr(rep.assigned_fraction)]])
    print(f"modes covered {rep.covered}/{len(rep.counts)}, mode KL {kl or 'undefined'}, "
          f"assigned {rep.assigned_fraction:.3f}")
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_suite

    start = args.seed or 0
    checks = gradcheck_suite(range(start, start + args.seeds))
    return _report(checks, os.path.join(_out_dir(args), "gradcheck.csv"))


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}: expected comma-separated numbers") from None


def cmd_sweep(args) -> int:
    from .experiments import lambda_sweep, write_sweep

    cfg = _config(args)
    if cfg.mode == "plain":
        raise UsageError("sweep needs mode ss or ms")
    rows = lambda_sweep(cfg, _grid(args.lambda_d_grid), _grid(args.lambda_g_grid))
    path = write_sweep(rows, os.path.join(_out_dir(args), "sweep.csv"))
    for r in rows:
        extra = f" at step {r.diverged_step}" if r.status == "diverged" else f", modes {r.modes_covered}"
        print(f"lambda_d {r.lambda_d:g} lambda_g {r.lambda_g:g}: {r.status}{extra}")
    flagged = [r for r in rows if r.status != "ok"]
    print(f"wrote {path} ({len(flagged)} flagged run(s))")
    return 0


COMMANDS = {"train": cmd_train, "analyze": cmd_analyze, "loophole": cmd_loophole, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("mslab: error: a subcommand is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, IDXError, ContractError, ValueError) as exc:
        print(f"mslab: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
