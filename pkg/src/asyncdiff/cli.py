"""Command-line front end.

Config files are flat ``key = value`` text; values are parsed as JSON, then
as Python literals, and fall back to bare strings.  ``--set key=value``
overrides any key.  Every run writes a manifest holding the resolved
config, so ``simulate --manifest run.json`` reproduces it exactly.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import datetime
import json
import logging
import math
import os
import re
import sys
from typing import Optional, Sequence

from . import __version__
from .simkit import ConfigError, SimConfig, sweep_delay, sweep_snr
from .stcodes import (DEFAULT_QUADRUPLE_CAP, AdmissibilityError, CandidateCapError,
                      OstbcCodec, check_full_diversity, make_psk_constellation)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILS = 2
EXIT_CAP = 3

_FIELDS = {f.name for f in dataclasses.fields(SimConfig)}
_REAL_EXPR = re.compile(r"^([-+]?)(\d*\.?\d*(?:[eE][-+]?\d+)?)\s*\*?\s*(pi)?\s*(?:/\s*(\d+\.?\d*))?$")


def parse_real(text) -> float:
    """Accept plain numbers, ratios and ``pi`` expressions (``pi/4``, ``3pi/8``, ``1/2``)."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _REAL_EXPR.match(str(text).strip())
    if not m or not (m.group(2) or m.group(3)):
        raise ValueError(f"cannot parse {text!r} as a real number")
    sign, coef, pi, den = m.groups()
    value = float(coef) if coef else 1.0
    if pi:
        value *= math.pi
    if den:
        value /= float(den)
    return -value if sign == "-" else value


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(path: str) -> dict:
    """Read a key-value config or a previously written manifest."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    if path.endswith(".json"):
        data = json.loads(text)
        return dict(data.get("config", data))
    return parse_config_text(text)


def parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def build_config(values: dict) -> SimConfig:
    unknown = sorted(set(values) - _FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    values = dict(values)
    for key in ("rotation", "amplitude"):
        if values.get(key) is not None:
            try:
                values[key] = parse_real(values[key])
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from exc
    for key in ("delays", "snr_db"):
        if key in values and not isinstance(values[key], (list, tuple)):
            values[key] = [values[key]]
    try:
        return SimConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(_guess_key(str(exc), values), str(exc)) from exc


def _guess_key(message: str, values: dict) -> str:
    for key in values:
        if key in message:
            return key
    return "config"


def write_manifest(path: str, config: SimConfig, outputs: dict, command: str) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": outputs,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _default_manifest(csv_path: str) -> str:
    return os.path.splitext(csv_path)[0] + ".manifest.json"


def _resolve(args) -> SimConfig:
    values = load_config(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return build_config(values)


def cmd_simulate(args) -> int:
    config = _resolve(args)
    config.check_caps()
    sweep_snr(config, args.out, workers=args.workers)
    manifest = args.manifest or _default_manifest(args.out)
    meta = os.path.splitext(args.out)[0] + ".meta.json"
    write_manifest(manifest, config, {"csv": args.out, "metadata": meta}, "simulate")
    print(f"wrote {args.out} and {manifest}")
    return EXIT_OK


def cmd_sweep_delay(args) -> int:
    config = _resolve(args)
    if args.seed is None and not args.config:
        raise ConfigError("seed", "a seed is required (--seed or a config file)")
    config.check_caps()
    sweep_delay(config, args.snr_db, args.delta_tau, args.out, workers=args.workers)
    manifest = args.manifest or _default_manifest(args.out)
    meta = os.path.splitext(args.out)[0] + ".meta.json"
    write_manifest(manifest, config, {"csv": args.out, "metadata": meta,
                                      "snr_db": args.snr_db, "delta_tau": list(args.delta_tau)},
                   "sweep-delay")
    print(f"wrote {args.out} and {manifest}")
    return EXIT_OK


def cmd_check_diversity(args) -> int:
    try:
        codec = OstbcCodec(args.codec)
        rotation = parse_real(args.rotation)
        amplitude = (parse_real(args.amplitude) if args.amplitude is not None
                     else 1.0 / math.sqrt(codec.K))
        constellation = make_psk_constellation(args.order, rotation, amplitude)
        codec.check_admissible(constellation)
    except AdmissibilityError as exc:
        raise ConfigError("amplitude", str(exc)) from exc
    except ValueError as exc:
        raise ConfigError("constellation", str(exc)) from exc
    report = check_full_diversity(codec, constellation, cap=args.cap)
    print(f"verdict: {report.verdict}")
    print(f"quadruples checked: {report.quadruples_checked}")
    if report.case2_failures:
        print(f"case-2 failures: {report.case2_failures}")
    if report.witness is not None:
        print("witness (candidate indices P1, P2, P3, P4): " + " ".join(map(str, report.witness)))
    return EXIT_OK if report.full_diversity else EXIT_FAILS


def _sim_args(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("config", nargs="?", help="key = value config file or a manifest (.json)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required, help="master seed")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--manifest", help="manifest output path (default: next to the CSV)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: $ASYNCDIFF_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asyncdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="BER versus SNR sweep")
    _sim_args(p, seed_required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-delay", help="two-user BER versus relative delay")
    _sim_args(p, seed_required=False)
    p.add_argument("--snr-db", type=float, required=True)
    p.add_argument("--delta-tau", type=float, nargs="+", required=True,
                   help="offsets tau_2 - tau_1 as fractions of the symbol period")
    p.set_defaults(func=cmd_sweep_delay)

    p = sub.add_parser("check-diversity", help="exhaustive full-diversity certification")
    p.add_argument("--codec", default="alamouti", choices=["alamouti", "rate1real4"])
    p.add_argument("--order", type=int, default=2, help="PSK order")
    p.add_argument("--rotation", default="0", help="constellation rotation, e.g. 0.785 or pi/4")
    p.add_argument("--amplitude", default=None, help="symbol amplitude (default 1/sqrt(K))")
    p.add_argument("--cap", type=int, default=DEFAULT_QUADRUPLE_CAP, help="quadruple cap")
    p.set_defaults(func=cmd_check_diversity)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CandidateCapError as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP


if __name__ == "__main__":
    sys.exit(main())
