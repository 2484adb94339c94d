"""``linattn`` command line: ``sweep``, ``verify`` and ``fit``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .errors import InsufficientData, LinAttnError


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# config key -> (argparse dest, parser)
_SWEEP_KEYS = {
    "impl": ("impl", lambda s: s.split(",")),
    "pass": ("passes", str),
    "mask": ("mask", str),
    "B": ("B", int),
    "H": ("H", int),
    "N": ("N", _int_list),
    "D": ("D", _int_list),
    "sweep-axis": ("sweep_axis", str),
    "L": ("L", int),
    "workers": ("workers", int),
    "precision": ("precision", str),
    "repeats": ("repeats", int),
    "seed": ("seed", int),
    "normalize": ("normalize", _bool),
    "a": ("a", float),
    "b": ("b", float),
    "mem-budget-scalars": ("mem_budget_scalars", int),
    "deterministic": ("deterministic", _bool),
    "input-layout": ("input_layout", str),
    "out": ("out", str),
}


def read_config(path: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip().lstrip("-").replace("_", "-")
            if not sep or key not in _SWEEP_KEYS:
                raise ValueError(f"{path}:{lineno}: cannot parse {raw.strip()!r}")
            dest, conv = _SWEEP_KEYS[key]
            values[dest] = conv(val.strip())
    return values


def _sweep_config(args) -> tuple[bench.SweepConfig, str]:
    settings = read_config(args.config) if args.config else {}
    for key, (dest, _) in _SWEEP_KEYS.items():
        val = getattr(args, dest)
        if val is not None:
            settings[dest] = val
    out = settings.pop("out", None)
    if "impl" in settings:
        impl = settings.pop("impl")
        if impl and isinstance(impl[0], list):
            impl = [name for group in impl for name in group]
        settings["impls"] = impl
    if settings.get("sweep_axis") == "D":
        settings.setdefault("N", [4096])
        settings.setdefault("D", [32, 64, 128, 256])
    return bench.SweepConfig(**settings), out


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="time implementations over an N or D sweep and write CSV")
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--impl", action="append", type=lambda s: s.split(","),
                   help="fast, quad, softmax or recurrent; repeatable or comma-separated")
    p.add_argument("--pass", dest="passes", choices=["fwd", "bwd", "both"])
    p.add_argument("--mask", choices=["causal", "none"])
    p.add_argument("--B", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--N", type=_int_list, help="sequence lengths (comma list on an N sweep)")
    p.add_argument("--D", type=_int_list, help="head dims (comma list on a D sweep)")
    p.add_argument("--sweep-axis", dest="sweep_axis", choices=["N", "D"])
    p.add_argument("--L", type=int, help="reduction blocks; must divide D")
    p.add_argument("--workers", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--normalize", type=_bool, metavar="{on,off}")
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--mem-budget-scalars", dest="mem_budget_scalars", type=int,
                   help="skip points predicted to exceed this many scalars")
    p.add_argument("--deterministic", type=_bool, metavar="{on,off}")
    p.add_argument("--input-layout", dest="input_layout", choices=["feature", "sequence"])
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=_cmd_sweep)


def _cmd_sweep(args) -> int:
    try:
        cfg, out = _sweep_config(args)
        records = bench.run_sweep(cfg)
    except (ValueError, TypeError, LinAttnError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        bench.emit_csv(records, out)
    except OSError as exc:
        print(f"error: cannot write CSV: {exc}", file=sys.stderr)
        return 2
    return 0


def _add_verify(sub):
    p = sub.add_parser("verify", help="check the fast path against the oracles")
    p.add_argument("--suite", action="append", choices=bench.SUITES,
                   help="run only this suite (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--forward-cases", type=int, default=200)
    p.add_argument("--gradient-cases", type=int, default=100)
    p.add_argument("--json", dest="json_path", help="also write the summary JSON here")
    p.set_defaults(func=_cmd_verify)


def _cmd_verify(args) -> int:
    cfg = bench.VerifyConfig(
        suites=tuple(args.suite) if args.suite else bench.SUITES,
        seed=args.seed, workers=args.workers,
        forward_cases=args.forward_cases, gradient_cases=args.gradient_cases,
    )
    report = bench.verify(cfg)
    for r in report.results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<10} cases={r.cases:<4} "
              f"max_dev={r.max_deviation:.3e}  {r.detail}")
    summary = json.dumps(report.as_dict())
    print(summary)
    if args.json_path:
        try:
            with open(args.json_path, "w") as fh:
                fh.write(summary + "\n")
        except OSError as exc:
            print(f"error: cannot write JSON: {exc}", file=sys.stderr)
            return 2
    return 0 if report.passed else 1


def _add_fit(sub):
    p = sub.add_parser("fit", help="log-log slope of wall time against N or D from a sweep CSV")
    p.add_argument("csv")
    p.add_argument("--axis", choices=["N", "D"], default="N")
    p.add_argument("--out", help="write fits as CSV instead of printing")
    p.set_defaults(func=_cmd_fit)


def _cmd_fit(args) -> int:
    try:
        records = bench.read_csv(args.csv)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.impl, r.pass_, r.mask), []).append(r)
    fits, status = [], 0
    for (impl, pass_, mask), recs in groups.items():
        try:
            fit = bench.fit_slope(recs, args.axis)
        except InsufficientData as exc:
            print(f"{impl.value} {pass_.value} {mask.value}: {exc}", file=sys.stderr)
            status = 1
            continue
        fits.append(fit)
        if not args.out:
            print(f"{impl.value:<12} {pass_.value:<9} {mask.value:<7} slope={fit.slope:.4f} "
                  f"r2={fit.r2:.4f} points={len(fit.points)}")
    if args.out:
        try:
            bench.emit_csv(fits, args.out)
        except OSError as exc:
            print(f"error: cannot write CSV: {exc}", file=sys.stderr)
            return 2
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linattn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_sweep(sub)
    _add_verify(sub)
    _add_fit(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
