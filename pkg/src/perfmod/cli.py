"""Command-line interface: ``perfmod <subcommand> ...``.

Exit status: 0 success, 1 input error, 2 missing model, 3 I/O error.
Data goes to ``--out`` (or stdout); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .core import FlagBinding, MachineProfile, default_registry, demo_profile
from .errors import (InputError, IntegrityError, MissingModelError, RepositoryConflictError,
                     SamplingError)
from .modeler import (ExpansionConfig, RefinementConfig, adaptive_refinement, compare_strategies,
                      model_expansion, parse_term)
from .predictor import predict
from .ranking import rank, ranking_text, sweep_n, tune_blocksize
from .repository import list_models, make_record, store
from .sampler import (CommandExecutor, GridSpec, JobOracle, NoiseModel, SamplingJob, SyntheticExecutor,
                      _atomic_write, run_job)
from .traces import make_trace
from .truths import TruthTable, demo_truths

log = logging.getLogger("perfmod")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _int_grid(text: str) -> list[int]:
    """``16:256:16`` (inclusive range) or ``100,200,300``."""
    try:
        if ":" in text:
            lo, hi, step = (int(v) for v in text.split(":"))
            if step < 1:
                raise ValueError
            return list(range(lo, hi + 1, step))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad integer grid {text!r}") from None


def _domain(specs, kernel) -> dict[str, tuple[int, int]]:
    out = {}
    for spec in specs or []:
        for part in spec.replace(";", " ").split():
            name, sep, rng = part.partition("=")
            try:
                lo, hi = (int(v) for v in rng.split(":"))
            except ValueError:
                raise InputError(f"bad domain {part!r}; expected name=lo:hi") from None
            out[name] = (lo, hi)
    missing = [s for s in kernel.size_params if s not in out]
    if missing:
        raise InputError(f"--domain does not bound {missing}")
    return out


def _profile(text: str) -> MachineProfile:
    if text == "demo":
        return demo_profile()
    return MachineProfile.load(text)


def _repo(args) -> Path:
    root = args.repo or os.environ.get("PERFMOD_REPO")
    if not root:
        raise InputError("no repository: pass --repo or set PERFMOD_REPO")
    return Path(root)


def _executor(args):
    spec = args.executor
    if spec.startswith("cmd:"):
        return CommandExecutor(spec[4:])
    if spec == "synthetic":
        truths = demo_truths()
    elif spec.startswith("synthetic:"):
        truths = TruthTable.load(spec[len("synthetic:"):])
    else:
        raise InputError(f"unknown executor {spec!r}; use synthetic[:TRUTHS] or cmd:COMMAND")
    return SyntheticExecutor(truths, NoiseModel.parse(args.noise), seed=args.seed, id=spec)


def _emit(args, text: str):
    if getattr(args, "out", None):
        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)


def _read_config(path) -> dict[str, str]:
    cfg = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"{path}:{lineno}: expected key=value")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


_CONFIG_KEYS = {"strategy": str, "eps": float, "max_terms": int, "initial_points": int, "max_cells": int,
                "min_cell_width": int, "basis": str, "reps": int, "noise": str, "seed": int,
                "executor": str, "max_doublings": int}


def _apply_config(args):
    if not getattr(args, "config", None):
        return
    for key, value in _read_config(args.config).items():
        if key not in _CONFIG_KEYS:
            raise InputError(f"{args.config}: unknown key {key!r}")
        if getattr(args, key, None) is None:
            try:
                setattr(args, key, _CONFIG_KEYS[key](value))
            except ValueError:
                raise InputError(f"{args.config}: bad value for {key}: {value!r}") from None


def _strategy_configs(args, kernel):
    names = list(kernel.size_params)
    basis = None
    if args.basis:
        basis = tuple(parse_term(t, names) for t in args.basis.split(","))
    exp = ExpansionConfig(
        eps=args.eps if args.eps is not None else 0.05,
        max_terms=args.max_terms if args.max_terms is not None else 12,
        initial_points=args.initial_points,
        max_doublings=args.max_doublings if args.max_doublings is not None else 2,
        seed=args.seed,
    )
    ref = RefinementConfig(
        eps=exp.eps,
        fixed_basis=basis,
        min_cell_width=args.min_cell_width if args.min_cell_width is not None else 16,
        max_cells=args.max_cells if args.max_cells is not None else 64,
        seed=args.seed,
    )
    return exp, ref


def _oracle(args, kernel, profile):
    return JobOracle(_executor(args), kernel.name, FlagBinding.parse(args.flags), args.threads,
                     args.reps, args.warmup, profile)


# ---------------------------------------------------------------- commands

def cmd_sample(args):
    registry = default_registry()
    kernel = registry[args.kernel]
    profile = _profile(args.machine)
    grid = GridSpec.parse(args.grid, "diagonal" if args.diagonal else "cross")
    job = SamplingJob(kernel.name, FlagBinding.parse(args.flags), grid, args.threads, args.reps,
                      profile.id, args.warmup)
    try:
        result = run_job(job, _executor(args), profile)
    except SamplingError as exc:
        if exc.partial is not None and args.out:
            _atomic_write(Path(args.out), exc.partial.to_csv())
            log.error("partial results (%d points) written to %s", len(exc.partial.samples), args.out)
        raise
    _emit(args, result.to_csv())
    log.info("sampled %d points of %s", len(result.samples), kernel.name)


def cmd_fit(args):
    _apply_config(args)
    args.strategy = args.strategy or "expansion"
    args.reps = args.reps or 10
    args.noise = args.noise or "none"
    args.executor = args.executor or "synthetic"
    registry = default_registry()
    kernel = registry[args.kernel]
    profile = _profile(args.machine)
    exp, ref = _strategy_configs(args, kernel)
    domain = _domain(args.domain, kernel)
    oracle = _oracle(args, kernel, profile)
    if args.strategy == "expansion":
        model = model_expansion(oracle, domain, exp)
    elif args.strategy == "refinement":
        model = adaptive_refinement(oracle, domain, ref)
    else:
        raise InputError(f"unknown strategy {args.strategy!r}")
    record = make_record(kernel.name, oracle.flags, profile.id, args.threads, model,
                         executor=oracle.executor.id, seed=args.seed)
    path = store(record, _repo(args), force=args.force)
    d = model.diagnostics
    flag = " (below target accuracy)" if model.below_target_accuracy else ""
    print(f"{path}\tcells={len(model.cells)} terms={model.term_count} samples={d['samples_drawn']} "
          f"max_rel_err={d['max_rel_err']:.4g}{flag}")


def cmd_models(args):
    rows = list_models(_repo(args), args.kernel, args.machine_filter)
    lines = ["kernel,flags,machine,threads,strategy,cells,max_rel_err,version"]
    for r in rows:
        lines.append(f"{r.kernel},\"{r.flags}\",{r.machine},{r.threads},{r.strategy},{r.cells},"
                     f"{r.max_rel_err:.6g},{r.version}")
    _emit(args, "\n".join(lines) + "\n")


def cmd_predict(args):
    profile = _profile(args.machine)
    trace = make_trace(args.algo, args.variant, args.n, args.b, m=args.m, threads=args.threads)
    if args.trace_out:
        _atomic_write(Path(args.trace_out), trace.to_csv())
    pred = predict(trace, _repo(args), profile, args.threads, args.allow_missing)
    if pred.missing_models:
        log.warning("prediction skips %d calls without models", sum(e.missing for e in pred.breakdown))
    _emit(args, pred.to_json())


def cmd_rank(args):
    profile = _profile(args.machine)
    variants = args.variants.split(",") if args.variants else None
    entries = rank(args.algo, variants, args.n, args.b, _repo(args), profile, args.threads, args.m,
                   args.allow_missing)
    _emit(args, ranking_text(entries))


def cmd_tune(args):
    profile = _profile(args.machine)
    b_star, table = tune_blocksize(args.algo, args.variant, args.n, _int_grid(args.b_grid), _repo(args),
                                   profile, args.threads, args.m, args.allow_missing)
    _emit(args, table.to_wide(args.quantity) if args.wide else table.to_csv())
    print(f"b*={b_star}", file=sys.stdout if args.out else sys.stderr)


def cmd_sweep(args):
    profile = _profile(args.machine)
    variants = args.variants.split(",") if args.variants else None
    table = sweep_n(args.algo, variants, _int_grid(args.n_grid), args.b, _repo(args), profile, args.threads,
                    args.allow_missing)
    _emit(args, table.to_wide(args.quantity) if args.wide else table.to_csv())


def cmd_compare(args):
    _apply_config(args)
    args.reps = args.reps or 10
    args.noise = args.noise or "none"
    args.executor = args.executor or "synthetic"
    kernel = default_registry()[args.kernel]
    profile = _profile(args.machine)
    exp, ref = _strategy_configs(args, kernel)
    domain = _domain(args.domain, kernel)
    counter = iter(range(1, 1 << 30))

    def factory():
        a = argparse.Namespace(**vars(args))
        a.seed = args.seed * 1000 + next(counter)
        return _oracle(a, kernel, profile)

    report = compare_strategies(factory, domain, exp, ref, args.eval_points, args.seed)
    if args.out:
        _atomic_write(Path(args.out), report.to_csv(args.timing))
    sys.stdout.write(report.to_text(args.timing))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perfmod", description="Empirical performance models for dense linear algebra.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def common(sp, repo=True):
        sp.add_argument("--machine", default="demo", help="machine profile file, or 'demo'")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", help="output file (default: stdout)")
        if repo:
            sp.add_argument("--repo", help="repository root (default: $PERFMOD_REPO)")

    def sampling(sp, defaults=True):
        sp.add_argument("--kernel", required=True)
        sp.add_argument("--flags", default="", help="e.g. side=L,uplo=L,transa=N,diag=N")
        sp.add_argument("--reps", type=int, default=10 if defaults else None)
        sp.add_argument("--warmup", type=int, default=1)
        sp.add_argument("--executor", default="synthetic" if defaults else None,
                        help="synthetic, synthetic:TRUTHS_FILE or cmd:COMMAND")
        sp.add_argument("--noise", default="none" if defaults else None,
                        help="synthetic noise: none, gaussian:SIGMA, uniform:LO:HI")
        sp.add_argument("--seed", type=int, default=0)

    def strategy(sp):
        sp.add_argument("--domain", action="append", help="size bounds, e.g. n=32:1024 (repeatable)")
        sp.add_argument("--eps", type=float)
        sp.add_argument("--max-terms", type=int)
        sp.add_argument("--initial-points", type=int)
        sp.add_argument("--max-doublings", type=int)
        sp.add_argument("--max-cells", type=int)
        sp.add_argument("--min-cell-width", type=int)
        sp.add_argument("--basis", help="refinement basis, e.g. 1,n^2")
        sp.add_argument("--config", help="key=value strategy config file")

    def algo(sp, variant=True):
        sp.add_argument("--algo", default="trinv", choices=["trinv", "sylvester"])
        sp.add_argument("--n", type=int, required=True)
        sp.add_argument("--m", type=int, help="rows of the Sylvester operand (default: n)")
        sp.add_argument("--allow-missing", action="store_true")

    s = sub.add_parser("sample", help="measure a kernel over a grid and write a sample CSV")
    common(s, repo=False)
    sampling(s)
    s.add_argument("--grid", action="append", required=True, help="axis spec, e.g. n=log:64:2048:8")
    s.add_argument("--diagonal", action="store_true", help="zip axes instead of cross product")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("fit", help="build a model and store it in the repository")
    common(s)
    sampling(s, defaults=False)
    strategy(s)
    s.add_argument("--strategy", choices=["expansion", "refinement"])
    s.add_argument("--force", action="store_true", help="overwrite an existing model")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("models", help="list stored models")
    s.add_argument("--repo")
    s.add_argument("--kernel")
    s.add_argument("--machine", dest="machine_filter")
    s.add_argument("--out")
    s.set_defaults(func=cmd_models)

    s = sub.add_parser("predict", help="predict one algorithm variant (JSON)")
    common(s)
    algo(s)
    s.add_argument("--variant", required=True)
    s.add_argument("--b", type=int, required=True)
    s.add_argument("--trace-out", help="also write the kernel-call trace as CSV")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("rank", help="rank algorithm variants by predicted time")
    common(s)
    algo(s)
    s.add_argument("--variants", help="comma-separated subset (default: all)")
    s.add_argument("--b", type=int, required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("tune", help="sweep the block size and report the best one")
    common(s)
    algo(s)
    s.add_argument("--variant", required=True)
    s.add_argument("--b-grid", required=True, help="lo:hi:step or comma list")
    s.add_argument("--wide", action="store_true")
    s.add_argument("--quantity", default="efficiency", choices=["efficiency", "median", "low", "high"])
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("sweep", help="sweep the matrix size at fixed block size")
    common(s)
    s.add_argument("--algo", default="trinv", choices=["trinv", "sylvester"])
    s.add_argument("--variants")
    s.add_argument("--n-grid", required=True, help="lo:hi:step or comma list")
    s.add_argument("--b", type=int, required=True)
    s.add_argument("--allow-missing", action="store_true")
    s.add_argument("--wide", action="store_true")
    s.add_argument("--quantity", default="efficiency", choices=["efficiency", "median", "low", "high"])
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare-strategies", help="run both model strategies and compare them")
    common(s, repo=False)
    sampling(s, defaults=False)
    strategy(s)
    s.add_argument("--eval-points", type=int, default=64)
    s.add_argument("--timing", action="store_true", help="include wall-clock build times")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("perfmod: %(levelname)s: %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except MissingModelError as exc:
        print(f"perfmod: missing model: {exc}", file=sys.stderr)
        for key in exc.missing:
            print(f"  missing: {key}", file=sys.stderr)
        return EXIT_MISSING
    except (OSError, IntegrityError, SamplingError) as exc:
        print(f"perfmod: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InputError, RepositoryConflictError) as exc:
        print(f"perfmod: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
