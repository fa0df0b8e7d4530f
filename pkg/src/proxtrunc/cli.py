"""Command-line interface: ``estimate``, ``simulate`` and ``curves``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from proxtrunc.bootstrap import BootstrapConfig, attach_inference, bootstrap_estimate
from proxtrunc.bridge import TIME_VARYING, fit_bridge
from proxtrunc.data import EstimandSpec, load_config, load_dataset, schema_from_config
from proxtrunc.errors import DataError, EstimationError
from proxtrunc.estimators import IPQW_O, SIMULATION_ONLY, canonical_method, estimate_many
from proxtrunc.survival import km_ignore_truncation, km_residual_survival, product_limit_truncation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

DEFAULT_METHODS = "pqb,ipqw,pl,km,naive"
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"proxtrunc: {msg}", file=sys.stderr)


def _parse_t0(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--t0 must be a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise ConfigError("--t0 is empty")
    return vals


def _parse_methods(text: str) -> list[str]:
    try:
        methods = [canonical_method(m) for m in text.split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not methods:
        raise ConfigError("no methods selected")
    if IPQW_O in methods:
        raise ConfigError("IPQW-o needs the true nuisance functions and is only available in simulations")
    return list(dict.fromkeys(methods))


def _load_schema(path):
    try:
        cfg = load_config(path)
    except FileNotFoundError:
        raise ConfigError(f"schema file {path} not found") from None
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    try:
        return cfg, schema_from_config(cfg)
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def _estimands(args, cfg) -> list[EstimandSpec]:
    kind = args.estimand or cfg.get("estimand", {}).get("kind") or "survprob"
    if args.t0 is not None:
        t0s = _parse_t0(args.t0)
    elif "estimand" in cfg and "t0" in cfg["estimand"]:
        raw = cfg["estimand"]["t0"]
        t0s = [float(v) for v in (raw if isinstance(raw, list) else [raw])]
    else:
        raise ConfigError("no --t0 given and none in the schema file")
    try:
        return [EstimandSpec(kind, t) for t in t0s]
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def _estimate_rows(args) -> list[dict]:
    cfg, schema = _load_schema(args.schema)
    specs = _estimands(args, cfg)
    methods = _parse_methods(args.methods)
    if args.bootstrap and args.bootstrap < 2:
        raise ConfigError("--bootstrap needs at least 2 replications")
    dataset = load_dataset(args.data, schema, strict=args.strict)
    dropped = {k: v for k, v in dataset.notes.get("dropped", {}).items() if v}
    if dropped:
        _err(f"dropped rows: {dropped}")
    if dataset.u is None and any(m in SIMULATION_ONLY for m in methods):
        raise ConfigError("IPQW-U methods need a U column in the schema")
    for spec in specs:
        spec.check_followup(dataset)
    rows = []
    for spec in specs:
        point = estimate_many(dataset, spec, methods)
        if args.bootstrap:
            bcfg = BootstrapConfig(replications=args.bootstrap, seed=args.seed, ci_level=args.ci_level)
            boot = bootstrap_estimate(dataset, spec, methods, bcfg, point=point)
            point = attach_inference(point, boot)
        rows.extend(point[m].to_dict() for m in methods)
    return rows


def _format_rows(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2)
    header = ["method", "estimand", "t0", "theta_hat", "se", "ci_low", "ci_high", "n_used", "flags"]
    flat = [
        [r["method"], r["estimand"], r["t0"], r["theta_hat"], r["se"], r["ci_low"], r["ci_high"],
         r["n_used"], ";".join(r["flags"])]
        for r in rows
    ]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in flat:
            w.writerow(["" if v is None else v for v in row])
        return buf.getvalue().rstrip("\n")

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [header] + [[cell(v) for v in row] for row in flat]
    widths = [max(len(r[j]) for r in table) for j in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)


def cmd_estimate(args) -> int:
    rows = _estimate_rows(args)
    print(_format_rows(rows, args.format))
    return EXIT_OK


def _resolve_study(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = CONFIG_DIR / (path if path.endswith(".toml") else f"{path}.toml")
    if bundled.exists():
        return bundled
    raise ConfigError(f"study config {path} not found")


def cmd_simulate(args) -> int:
    from proxtrunc.simulation import StudyConfig, run_study

    path = _resolve_study(args.config)
    try:
        raw = load_config(path)
        cfg = StudyConfig.from_mapping(raw)
    except (ValueError, TypeError, KeyError, DataError) as exc:
        raise ConfigError(f"invalid study config {path}: {exc}") from None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.replications is not None:
        overrides["replications"] = args.replications
    if args.bootstrap is not None:
        overrides["bootstrap"] = args.bootstrap
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    _err(f"tau_q_sim={cfg.params.tau_q_sim} seed={cfg.seed} n={cfg.n} "
         f"replications={cfg.replications} bootstrap={cfg.bootstrap} threads={cfg.threads}")
    report = run_study(cfg)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = path.stem
        (out_dir / f"{stem}_report.csv").write_text(report.to_csv())
        (out_dir / f"{stem}_report.json").write_text(report.to_json(include_replicates=args.dump_replicates))
        _err(f"wrote {out_dir / (stem + '_report.csv')} and {out_dir / (stem + '_report.json')}")
    if args.format == "json":
        print(report.to_json(include_replicates=args.dump_replicates))
    elif args.format == "csv":
        print(report.to_csv().rstrip("\n"))
    else:
        print(report.to_table())
    return EXIT_OK


def cmd_curves(args) -> int:
    _, schema = _load_schema(args.schema)
    dataset = load_dataset(args.data, schema, strict=args.strict)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s_d = km_residual_survival(dataset)
    product_limit_truncation(dataset).to_csv(out / "product_limit.csv", ("time", "survival"))
    km_ignore_truncation(dataset).to_csv(out / "kaplan_meier.csv", ("time", "survival"))
    s_d.to_csv(out / "residual_censoring.csv", ("time", "survival"))
    bridge = fit_bridge(dataset, s_d, TIME_VARYING)
    bridge.path.to_csv(out / "bridge_coefficients.csv")
    if bridge.flags:
        _err("bridge flags: " + ", ".join(sorted(bridge.flags)))
    print(str(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxtrunc", description="Survival estimation under left truncation with proxies.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate survival functionals from a CSV file")
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True, help="TOML or JSON file with a [columns] table")
    e.add_argument("--estimand", help="survprob or rmst (default: from schema, else survprob)")
    e.add_argument("--t0", help="comma-separated horizons, e.g. 80,85,90,95")
    e.add_argument("--methods", default=DEFAULT_METHODS)
    e.add_argument("--bootstrap", type=int, default=0, help="bootstrap replications (0 = none)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int, default=1, help="accepted for symmetry; results do not depend on it")
    e.add_argument("--ci-level", type=float, default=0.95)
    e.add_argument("--format", choices=("json", "csv", "table"), default="json")
    e.add_argument("--strict", action="store_true", help="fail on invalid rows instead of dropping them")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a TOML config")
    s.add_argument("config", help="path to a study TOML, or the name of a bundled config")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--replications", type=int)
    s.add_argument("--bootstrap", type=int)
    s.add_argument("--format", choices=("json", "csv", "table"), default="csv")
    s.add_argument("--dump-replicates", action="store_true")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("curves", help="export survival curves and the bridge path as CSV")
    c.add_argument("--data", required=True)
    c.add_argument("--schema", required=True)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--strict", action="store_true")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except DataError as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except EstimationError as exc:
        _err(f"estimation error: {exc}")
        return EXIT_ESTIMATION
    except ValueError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
