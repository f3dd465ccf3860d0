"""Batch experiment runner.

    spinebranch verify --config example10-martingale --out out/
    spinebranch simulate --config my.json --seed 3
    spinebranch list-models

``--config`` takes a JSON file or the name of a canned config.  Exit codes:
0 all checks pass, 1 a check failed, 2 invalid config.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .checks import SUITES, CappedError, CheckResult, run_suite
from .engine import SimConfig, run_replicates
from .io import dumps, trajectory_csv, trajectory_summary, write_json
from .models import (make_compact_beta_bbm, make_inward_ou_quadratic,
                     make_outward_ou_constant, model_from_config, product_p_star)
from .spine import realization_from_run, realization_to_json, run_tilted, spine_conditional_expectation
from .stats import growth_classifier, w_series

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

DEFAULT_CONFIG = {
    "model": {"kind": "inward_ou_quadratic",
              "params": {"sigma": 1.0, "mu": 2.0, "b_quad": 1.0, "beta0": 0.5}},
    "init": [0.0],
    "sim": {"dt": 1e-3, "t_end": 1.0, "snapshot_delta": None, "max_particles": 100_000,
            "use_exact_ou": True},
    "run": {"replicates": 2000, "seed": 0, "parallel": 1, "batch_size": 250},
    "checks": ["martingale-mean"],
    "check_params": {},
    "out": "out",
}

CANNED = {"example10-martingale": {}, "acceptance": {"checks": list(SUITES)}}
CANNED.update({name: {"checks": [name]} for name in SUITES if name != "martingale-mean"})


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: dict
    init: list
    sim: dict
    run: dict
    checks: list
    check_params: dict = field(default_factory=dict)
    out: str = "out"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = copy.deepcopy(DEFAULT_CONFIG)
        for key, val in raw.items():
            if isinstance(merged[key], dict) and key not in ("model", "check_params"):
                extra = set(val) - set(merged[key])
                if extra:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")
                merged[key].update(val)
            else:
                merged[key] = val
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {"model": self.model, "init": self.init, "sim": self.sim, "run": self.run,
                "checks": self.checks, "check_params": self.check_params, "out": self.out}

    def validate(self) -> None:
        run = self.run
        if not isinstance(run["replicates"], int) or run["replicates"] < 1:
            raise ConfigError("run.replicates must be a positive integer")
        if not isinstance(run["seed"], int) or not 0 <= run["seed"] < 2**64:
            raise ConfigError("run.seed must be a 64-bit nonnegative integer")
        if not isinstance(run["parallel"], int) or run["parallel"] < 1:
            raise ConfigError("run.parallel must be a positive integer")
        if not isinstance(run["batch_size"], int) or run["batch_size"] < 1:
            raise ConfigError("run.batch_size must be a positive integer")
        bad = [c for c in self.checks if c not in SUITES]
        if bad:
            raise ConfigError(f"unknown checks {bad}; available: {sorted(SUITES)}")
        bad = [c for c in self.check_params if c not in SUITES]
        if bad:
            raise ConfigError(f"check_params for unknown checks {bad}")
        try:
            self.build_model()
            self.sim_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def build_model(self):
        return model_from_config(self.model)

    def sim_config(self) -> SimConfig:
        s = self.sim
        return SimConfig(dt=float(s["dt"]), t_end=float(s["t_end"]),
                         max_particles=int(s["max_particles"]), seed=self.run["seed"],
                         use_exact_ou=bool(s["use_exact_ou"]),
                         snapshot_delta=None if s["snapshot_delta"] is None else float(s["snapshot_delta"]))

    def suite_params(self, name: str) -> dict:
        params = {}
        if name == "martingale-mean":
            params = {"model": self.model, "x": self.init, "dt": self.sim["dt"],
                      "t_end": self.sim["t_end"], "replicates": self.run["replicates"],
                      "max_particles": self.sim["max_particles"],
                      "snapshot_delta": self.sim["snapshot_delta"]}
        params.update(self.check_params.get(name, {}))
        return params

    def hash(self) -> str:
        """SHA-256 of the canonical config, ignoring the output directory and thread count."""
        body = self.to_dict()
        body.pop("out")
        body["run"] = {k: v for k, v in body["run"].items() if k != "parallel"}
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if path.is_file():
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        elif args.config in CANNED:
            raw = copy.deepcopy(CANNED[args.config])
        else:
            raise ConfigError(f"no config file or canned config named {args.config!r}; "
                              f"canned: {sorted(CANNED)}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = copy.deepcopy(raw)
    run = dict(raw.get("run", {}))
    if args.seed is not None:
        run["seed"] = args.seed
    if args.parallel is not None:
        run["parallel"] = args.parallel
    if run:
        raw["run"] = run
    if args.out is not None:
        raw["out"] = args.out
    return ExperimentConfig.from_dict(raw)


def _manifest(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.run["seed"],
        "versions": {"spinebranch": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: ExperimentConfig, out) -> int:
    model = cfg.build_model()
    run = run_replicates(model, cfg.init, cfg.sim_config(), cfg.run["replicates"],
                         batch_size=cfg.run["batch_size"], parallel=cfg.run["parallel"])
    d = _outdir(cfg)
    trajectory_csv(run, d / "trajectories.csv")
    w_series(run).to_csv(d / "w_phi.csv")
    write_json(d / "summary.json", trajectory_summary(run))
    write_json(d / "manifest.json", _manifest(cfg, "simulate"))
    n_capped = int(np.sum(run.capped))
    print(f"simulated {run.n_replicates} replicates to t={cfg.sim['t_end']} "
          f"({n_capped} capped); wrote {d}", file=out)
    return EXIT_OK


def cmd_spine(cfg: ExperimentConfig, out) -> int:
    model = cfg.build_model()
    sim = cfg.sim_config()
    run = run_tilted(model, cfg.init, sim, cfg.run["replicates"], batch_size=cfg.run["batch_size"],
                     parallel=cfg.run["parallel"], record_spine=True)
    reals = []
    for r in range(run.n_replicates):
        real = realization_from_run(run, r)
        item = realization_to_json(real)
        item["replicate"] = r
        item["conditional_expectation"] = spine_conditional_expectation(real, model, sim.n_steps * sim.dt)
        reals.append(item)
    d = _outdir(cfg)
    write_json(d / "spine.json", {"model": model.kind, "realizations": reals})
    write_json(d / "manifest.json", _manifest(cfg, "spine"))
    print(f"wrote {len(reals)} spine realizations to {d / 'spine.json'}", file=out)
    return EXIT_OK


def _summary_text(rows: list) -> str:
    lines = [f"{'PASS' if r['pass'] else 'FAIL'}  {r['check']}: statistic={r['statistic']} "
             f"{r['comparison']} threshold={r['threshold']}" for r in rows]
    n_fail = sum(not r["pass"] for r in rows)
    lines.append(f"{len(rows) - n_fail}/{len(rows)} checks passed")
    return "\n".join(lines) + "\n"


def cmd_verify(cfg: ExperimentConfig, out) -> int:
    d = _outdir(cfg)
    checks_dir = d / "checks"
    checks_dir.mkdir(exist_ok=True)
    results: list[CheckResult] = []
    for name in cfg.checks:
        try:
            res = run_suite(name, cfg.suite_params(name), seed=cfg.run["seed"],
                            parallel=cfg.run["parallel"])
        except CappedError as exc:
            res = [CheckResult(name, math.nan, 0.5, False, "<=",
                               {"error": str(exc)})]
        for r in res:
            results.append(r)
            write_json(checks_dir / f"{r.check}.json", r.to_json())
            for s in r.series:
                s.to_csv(checks_dir / f"{r.check}.{s.label}.csv")
            print(f"{r.line()}  ({r.runtime:.1f}s)", file=out)
    rows = [r.to_json() for r in results]
    write_json(d / "report.json", rows)
    (d / "summary.txt").write_text(_summary_text(rows))
    write_json(d / "manifest.json", _manifest(cfg, "verify"))
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed", file=out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(cfg: ExperimentConfig, out) -> int:
    path = Path(cfg.out) / "report.json"
    if not path.is_file():
        print(f"no report at {path}; run 'verify' first", file=sys.stderr)
        return EXIT_CONFIG
    rows = json.loads(path.read_text())
    text = _summary_text(rows)
    (Path(cfg.out) / "summary.txt").write_text(text)
    out.write(text)
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL


def list_models() -> list:
    """Metadata rows for the built-in models at their default parameters."""
    rows = []
    for model in (make_inward_ou_quadratic(), make_outward_ou_constant(), make_compact_beta_bbm()):
        p_star = product_p_star(model)
        rows.append({"kind": model.kind, "params": model.params, "lambda_c": model.lambda_c,
                     "growth": growth_classifier(model), "p_star": p_star,
                     "p_range": f"(1, {p_star:.4g})" if math.isfinite(p_star) else "(1, inf)"})
    return rows


def cmd_list_models(cfg, out) -> int:
    rows = list_models()
    out.write(f"{'kind':<22}{'lambda_c':>12}  {'growth':<22}{'admissible p':<16}\n")
    for r in rows:
        out.write(f"{r['kind']:<22}{r['lambda_c']:>12.6f}  {r['growth']:<22}{r['p_range']:<16}\n")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "spine": cmd_spine, "verify": cmd_verify,
            "report": cmd_report, "list-models": cmd_list_models}


OPTIONS = ("config", "seed", "out", "parallel", "print_defaults")


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering top-level ones.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="JSON config file or canned config name")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--parallel", type=int, metavar="N", help="worker threads")
    common.add_argument("--print-defaults", action="store_true",
                        help="print the default config and exit")
    parser = argparse.ArgumentParser(prog="spinebranch", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command")
    helps = {"simulate": "simulate the branching process and export trajectories",
             "spine": "simulate the tilted process and export spine realizations",
             "verify": "run the named verification suites",
             "list-models": "list the built-in models",
             "report": "print the summary of a previous verify run"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in OPTIONS:
        if not hasattr(args, name):
            setattr(args, name, False if name == "print_defaults" else None)
    if args.print_defaults:
        out.write(dumps(DEFAULT_CONFIG))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("spinebranch: error: a subcommand is required", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "list-models":
        return cmd_list_models(None, out)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.command](cfg, out)


if __name__ == "__main__":
    sys.exit(main())
