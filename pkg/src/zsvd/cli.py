"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O or file-format error, 4 numerical failure.

All randomness derives from ``--seed``: the model uses ``seed``, calibration
inputs ``seed + 1`` and fuzzing ``seed + 2``. The labelling teacher defaults to
the model itself (``--teacher-seed`` overrides).
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings

import numpy as np

from . import oracle, store, toynet
from .correct import CorrectionCfg, Variant
from .errors import FormatError, NumericError
from .model import ACTIVATIONS, ModelSpec
from .pipeline import MODES, CompressConfig, compress
from .select import Rule, Strategy
from .whiten import RidgeConfig

log = logging.getLogger("zsvd")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

_VARIANTS = {"none": None, **{v.value: v for v in Variant}}


class ConfigError(ValueError):
    pass


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}")
    if len(dims) < 3 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"need >= 3 positive widths, got {text!r}")
    return dims


def _unit(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _pos_int(text: str) -> int:
    v = _nonneg_int(text)
    if v == 0:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"must be a finite value >= 0, got {text!r}")
    return v


def _add_inputs(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--spec", type=_dims, help="layer widths, e.g. 32,64,48,10 (default)")
    src.add_argument("--model", help="dense model tensor file")
    p.add_argument("--activation", choices=ACTIVATIONS, default="gelu_tanh")
    cal = p.add_mutually_exclusive_group()
    cal.add_argument("--calib", help="calibration tensor file")
    cal.add_argument("--tokens", type=_pos_int, help="generated calibration tokens (default 512)")
    p.add_argument("--teacher-seed", type=int, help="labelling teacher seed (default: the model seed)")
    p.add_argument("--seed", type=int, default=0)


def _add_compress(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratio", type=_unit, required=True, help="retention ratio in (0, 1]")
    p.add_argument("--mode", choices=MODES, default="standard")
    p.add_argument("--strategy", choices=[r.value for r in Rule], default=Rule.ZERO_SUM.value)
    p.add_argument("--unsorted", action="store_true", help="lift the per-matrix ascending-sigma order")
    p.add_argument("--baseline", action="store_true", help="homogeneous closed-form ranks")
    p.add_argument("--correct", choices=list(_VARIANTS), default="none")
    p.add_argument("--iters", type=_nonneg_int, default=None)
    p.add_argument("--subset", type=_nonneg_int, default=0, help="tokens per correction round (0 = all)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=1e-3)
    p.add_argument("--ridge-rel", type=_nonneg_float, default=1e-6)
    p.add_argument("--ridge-floor", type=_nonneg_float, default=1e-10)
    p.add_argument("--tau", type=_unit, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsvd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a model and write model + report")
    _add_inputs(p)
    _add_compress(p)
    p.add_argument("--out", required=True, help="compressed model path")
    p.add_argument("--report", required=True, help="report path")

    p = sub.add_parser("evaluate", help="print calibration loss and perplexity")
    _add_inputs(p)
    p.add_argument("--compressed", action="append", default=[], help="compressed model file (repeatable)")
    p.add_argument("--compare", type=_unit, metavar="RATIO", help="also run baseline and zero-sum at RATIO")

    p = sub.add_parser("analyze", help="emit spectra, sensitivities, drift trace and rank-energy columns")
    _add_inputs(p)
    _add_compress(p)
    p.add_argument("--out", help="output file (default stdout)")

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--checks", default=",".join(oracle.SUITE), help="comma-separated subset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ridge-floor", type=_nonneg_float, default=1e-10)
    return parser


def _config(args) -> CompressConfig:
    rule = Rule(args.strategy)
    if rule is Rule.ZERO_SUM and args.unsorted:
        raise ConfigError("--unsorted cannot be combined with the zero-sum strategy")
    if args.baseline and (rule is not Rule.ZERO_SUM or args.unsorted):
        raise ConfigError("--baseline cannot be combined with --strategy/--unsorted")
    if args.baseline and args.mode != "standard":
        raise ConfigError("--baseline uses closed-form ranks; only --mode standard applies")
    variant = _VARIANTS[args.correct]
    iters = args.iters
    if variant is None:
        if iters:
            raise ConfigError("--iters needs a --correct variant")
        variant, iters = Variant.PROJ_GRAD, 0
    elif iters is None:
        iters = 1
    try:
        corr = CorrectionCfg(variant, iters, args.subset, args.alpha, args.eta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return CompressConfig(
        ratio=args.ratio,
        mode=args.mode,
        strategy=Strategy(rule, not args.unsorted),
        correction=corr,
        ridge=RidgeConfig(args.ridge_rel, args.ridge_floor),
        tau=args.tau,
        baseline=args.baseline,
    )


def _seeds(args) -> dict:
    teacher = args.seed if args.teacher_seed is None else args.teacher_seed
    return {"model": args.seed, "teacher": teacher, "calib": args.seed + 1, "fuzz": args.seed + 2}


def _load_inputs(args):
    seeds = _seeds(args)
    if args.model:
        model = store.load_model(args.model)
        spec = model.spec
    else:
        spec = ModelSpec(args.spec or (32, 64, 48, 10), args.activation, args.seed)
        model = toynet.build_model(spec)
    if args.calib:
        calib = store.load_calib(args.calib)
    else:
        calib = toynet.gen_calibration(spec, seeds["teacher"], args.tokens or 512, input_seed=seeds["calib"])
    return model, calib, seeds


def cmd_compress(args) -> int:
    cfg = _config(args)
    model, calib, seeds = _load_inputs(args)
    result = compress(model, calib, cfg, seeds)
    store.save_compressed(args.out, result.model)
    store.write_report(args.report, result.report)
    r = result.report
    print(
        f"loss {r['loss']['before']:.6f} -> {r['loss']['after']:.6f}  "
        f"params {r['params']['before']} -> {r['params']['after']}  "
        f"ranks {[layer['rank'] for layer in r['layers']]}"
    )
    if r["budget"]["exhausted"]:
        print("warning: candidates exhausted before the budget was met", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, calib, _ = _load_inputs(args)
    rows = [("original", *toynet.evaluate(model, calib))]
    for path in args.compressed:
        rows.append((path, *toynet.evaluate(store.load_compressed(path), calib)))
    if args.compare is not None:
        for name, baseline in (("homogeneous", True), ("zero-sum", False)):
            res = compress(model, calib, CompressConfig(args.compare, baseline=baseline))
            rows.append((f"{name}@{args.compare}", *toynet.evaluate(res.model, calib)))
    width = max(len(r[0]) for r in rows)
    print(f"{'model':<{width}}  {'loss':>12}  {'perplexity':>12}")
    for name, loss, ppl in rows:
        print(f"{name:<{width}}  {loss:12.6f}  {ppl:12.6f}")
    return EXIT_OK


def analysis_text(result) -> str:
    lines = ["# spectra", "layer\tindex\tsigma\tg_sigma\tdelta_l"]
    for wl in result.layers:
        for i in range(wl.r):
            lines.append(f"{wl.layer_id}\t{i}\t{wl.sigma[i]!r}\t{wl.g_sigma[i]!r}\t{wl.delta_l[i]!r}")
    lines += ["", "# drift", "step\tlayer\tcomp\tdelta_l\ts\tb"]
    for step, t in enumerate(result.assignment.trace):
        lines.append(f"{step}\t{t.layer_id}\t{t.comp}\t{t.dl!r}\t{t.s!r}\t{t.b!r}")
    energy = result.report["rank_energy"]
    lines += ["", f"# rank_energy tau={energy['tau']!r}", "layer\tk_tau_weight\tk_tau_grad\tratio"]
    for e in energy["layers"]:
        lines.append(f"{e['layer']}\t{e['k_tau_weight']}\t{e['k_tau_grad']}\t{e['ratio']!r}")
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    cfg = _config(args)
    model, calib, seeds = _load_inputs(args)
    text = analysis_text(compress(model, calib, cfg, seeds))
    if args.out:
        store._atomic_write(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    if not checks:
        raise ConfigError("empty check selection")
    unknown = sorted(set(checks) - set(oracle.SUITE))
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; choose from {list(oracle.SUITE)}")
    results = oracle.run_suite(args.seed, checks, ridge_floor=args.ridge_floor)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


COMMANDS = {"compress": cmd_compress, "evaluate": cmd_evaluate, "analyze": cmd_analyze, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"zsvd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"zsvd: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"zsvd: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"zsvd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
