"""Command-line entry point.

``kronsr run`` executes one scenario and writes ``records.csv``,
``summary.json`` and ``provenance.json`` to the output directory.
``kronsr info`` prints problem sizes for a configuration.

Config files are INI with sections ``[run]``, ``[synthetic]``, ``[channel]``,
``[denoise-table]`` and ``[solver]``.  Flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .experiments import (ALGORITHMS, DEFAULT_GRIDS, SCENARIOS, ChannelConfig, SyntheticConfig,
                          aggregate, check_algorithms, run_sweep, write_csv, write_summary)
from .irs import SystemGeometry
from .solvers import SolverConfig

log = logging.getLogger("kronsr")

EXIT_OK, EXIT_USAGE, EXIT_FAILED_TRIALS = 0, 1, 2
PROVENANCE_SCHEMA = "kronsr/provenance@1"
DEFAULT_TRIALS = {"synthetic": 100, "channel": 50, "denoise-table": 100}


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


# keys accepted per section, with their parsers
_RUN_KEYS = {"scenario": str, "algorithms": str, "seed": int, "trials": int, "out": str,
             "parallel": int, "sweep": str, "snr": str, "m": str, "sparsity": str}
_SYN_KEYS = {"m": int, "S": int, "N": int, "snr_db": float}
_CH_KEYS = {"R": int, "T": int, "L": int, "N": int, "P_BS": int, "P_MS": int, "K_I": int, "K_P": int,
            "snr_db": float, "irs_amplitude": float, "ser_symbols": int, "omp_noise_margin": float}
_SOLVER_KEYS = {"max_em_iters": int, "em_tol": float, "prune_threshold": float, "am_inner_iters": int}
_SECTIONS = {"run": _RUN_KEYS, "synthetic": _SYN_KEYS, "channel": _CH_KEYS,
             "denoise-table": _SYN_KEYS, "solver": _SOLVER_KEYS}


@dataclass
class RunConfig:
    scenario: str = "synthetic"
    algorithms: tuple = ALGORITHMS
    sweep_variable: str = "snr"
    grid: tuple = DEFAULT_GRIDS["snr"]
    trials: int = 100
    seed: int = 0
    out: Path = Path("results")
    parallel: int = 1
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    provenance: dict = field(default_factory=dict)

    def experiment_config(self):
        base = self.channel if self.scenario == "channel" else self.synthetic
        return replace(base, n_trials=self.trials, seed=self.seed)

    def snapshot(self) -> dict:
        """Everything that determines the metric columns (output path and parallelism excluded)."""
        return json.loads(json.dumps({
            "scenario": self.scenario,
            "algorithms": list(self.algorithms) if self.scenario != "denoise-table" else [],
            "sweep_variable": self.sweep_variable,
            "grid": list(self.grid),
            "trials": self.trials,
            "seed": self.seed,
            "experiment": asdict(self.experiment_config()),
        }, default=str))

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _split(text, cast):
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    try:
        return tuple(cast(t) for t in items)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}") from None


def _read_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (K_I, P_BS)
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {p}: {exc}") from None
    out = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}] in {p}")
        keys = _SECTIONS[sec]
        vals = {}
        for k, v in cp.items(sec):
            if k not in keys:
                raise ConfigError(f"unknown key {k!r} in section [{sec}]")
            try:
                vals[k] = keys[k](v)
            except ValueError:
                raise ConfigError(f"bad value {v!r} for {sec}.{k}") from None
        out[sec] = vals
    return out


def parse_config(path=None, flags: Optional[dict] = None) -> RunConfig:
    """Merge defaults, an optional config file and flag values into a :class:`RunConfig`.

    ``flags`` uses the long flag names without dashes (``scenario``, ``snr``,
    ``sparsity`` ...); ``None`` values are treated as absent.  Each setting's
    origin is recorded in ``provenance["sources"]`` and flag-over-file
    overrides in ``provenance["overrides"]``.
    """
    file_vals = _read_file(path) if path else {}
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    run_file = file_vals.get("run", {})
    sources, overrides = {}, []

    def pick(key):
        if key in flags:
            if key in run_file and str(run_file[key]) != str(flags[key]):
                overrides.append({"key": key, "file": run_file[key], "flag": flags[key]})
            sources[key] = "flag"
            return flags[key]
        if key in run_file:
            sources[key] = "file"
            return run_file[key]
        return None

    scenario = pick("scenario") or "synthetic"
    if scenario not in SCENARIOS:
        raise ConfigError(f"invalid scenario {scenario!r}; choose from {list(SCENARIOS)}")

    algs = pick("algorithms")
    if algs is None:
        algorithms = ALGORITHMS
    else:
        algorithms = _split(algs, str)
        try:
            check_algorithms(algorithms)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    seed = pick("seed")
    trials = pick("trials")
    parallel = pick("parallel")
    out = pick("out")
    seed = 0 if seed is None else int(seed)
    trials = DEFAULT_TRIALS[scenario] if trials is None else int(trials)
    parallel = 1 if parallel is None else int(parallel)
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if parallel < 1:
        raise ConfigError("parallel must be >= 1")

    lists = {}
    for key, cast in (("snr", float), ("m", int), ("sparsity", int)):
        v = pick(key)
        if v is not None:
            lists[key] = _split(v, cast)
            if not lists[key]:
                raise ConfigError(f"empty grid for {key}")
    if scenario != "synthetic":
        bad = [k for k in ("m", "sparsity") if k in lists and scenario == "channel"]
        if bad:
            raise ConfigError(f"--{bad[0]} does not apply to scenario {scenario!r}")
    multi = [k for k, v in lists.items() if len(v) > 1]
    requested = pick("sweep")
    if len(multi) > 1:
        raise ConfigError(f"only one variable can be swept, got several lists: {multi}")
    var = {"snr": "snr", "m": "m", "sparsity": "S", "S": "S"}
    if requested is not None:
        if requested not in var:
            raise ConfigError(f"invalid sweep variable {requested!r}")
        sweep = var[requested]
        if multi and var[multi[0]] != sweep:
            raise ConfigError(f"sweep={requested!r} conflicts with the list given for {multi[0]!r}")
    elif multi:
        sweep = var[multi[0]]
    else:
        sweep = "snr"
    if scenario != "synthetic" and sweep != "snr":
        raise ConfigError(f"scenario {scenario!r} only sweeps snr")
    key_of = {"snr": "snr", "m": "m", "S": "sparsity"}
    grid = lists.get(key_of[sweep], DEFAULT_GRIDS[sweep])

    solver = SolverConfig(**file_vals.get("solver", {}))
    sec = "denoise-table" if scenario == "denoise-table" else "synthetic"
    syn_vals = dict(file_vals.get(sec, {}))
    for k, fk in (("m", "m"), ("S", "sparsity")):
        if fk in lists and len(lists[fk]) == 1:
            syn_vals[k] = lists[fk][0]
    ch_vals = dict(file_vals.get("channel", {}))
    if "snr" in lists and len(lists["snr"]) == 1:
        syn_vals["snr_db"] = ch_vals["snr_db"] = lists["snr"][0]
    geo_keys = ("R", "T", "L", "N", "P_BS", "P_MS")
    try:
        synthetic = SyntheticConfig(solver=solver, **syn_vals)
        geometry = SystemGeometry(**{k: ch_vals.pop(k) for k in geo_keys if k in ch_vals})
        channel = ChannelConfig(geometry=geometry, solver=solver, **ch_vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(scenario=scenario, algorithms=tuple(algorithms), sweep_variable=sweep,
                    grid=tuple(grid), trials=trials, seed=seed,
                    out=Path(out) if out else Path("results"), parallel=parallel,
                    synthetic=synthetic, channel=channel)
    cfg.provenance = {"config_file": str(path) if path else None, "sources": sources,
                      "overrides": overrides}
    return cfg


def run(cfg: RunConfig) -> int:
    """Execute the configured sweep and write CSV, JSON summary and provenance."""
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", out, exc)
        return EXIT_USAGE
    if not os.access(out, os.W_OK):
        log.error("output directory %s is not writable", out)
        return EXIT_USAGE
    chash = cfg.config_hash
    started = time.time()

    def progress(done, total):
        log.info("trial %d/%d", done, total)

    records = run_sweep(cfg.scenario, cfg.sweep_variable, cfg.algorithms, cfg.experiment_config(),
                        values=cfg.grid, workers=cfg.parallel, progress=progress)
    rows = aggregate(records)
    failed = [r for r in records if not r.ok]
    write_csv(records, out / "records.csv", chash)
    write_summary(rows, out / "summary.json", chash,
                  extra={"n_records": len(records), "n_failed": len(failed)})
    prov = {
        "schema": PROVENANCE_SCHEMA,
        "config_hash": chash,
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "parallel": cfg.parallel,
        "output_dir": str(out),
        "library_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "python_version": platform.python_version(),
        "started_unix": started,
        "wall_clock_s": time.time() - started,
        **cfg.provenance,
    }
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, default=str))
    if cfg.scenario == "denoise-table":
        print(format_denoise_table(rows))
    for r in failed:
        log.warning("failed: %s trial %d (seed %d): %s", r.algorithm, r.trial, r.seed, r.error)
    return EXIT_FAILED_TRIALS if failed else EXIT_OK


def format_denoise_table(rows) -> str:
    lines = [f"{'SNR (dB)':>9} {'before (dB)':>12} {'after (dB)':>11}"]
    for r in sorted(rows, key=lambda r: r["snr_db"]):
        lines.append(f"{r['snr_db']:>9g} {r['denoise_before_db_mean']:>12.3f} {r['denoise_after_db_mean']:>11.3f}")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kronsr", description="Kronecker-structured sparse recovery experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("run", "run a scenario and write results"),
                        ("info", "print measurement and coefficient counts")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--scenario", choices=SCENARIOS)
        s.add_argument("--config", help="INI config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--trials", type=int)
        s.add_argument("--snr", help="comma-separated SNR values in dB")
        s.add_argument("--m", help="comma-separated measurement levels")
        s.add_argument("--sparsity", help="comma-separated per-factor sparsity levels")
        s.add_argument("--algorithms", help=f"comma-separated subset of {','.join(ALGORITHMS)}")
        s.add_argument("--out", help="output directory")
        s.add_argument("--parallel", type=int, help="worker processes")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def info(cfg: RunConfig) -> str:
    if cfg.scenario == "channel":
        c = cfg.channel
        g = c.geometry
        return (f"channel: R={g.R} T={g.T} L={g.L} N={g.N} K_I={c.K_I} K_P={c.K_P}\n"
                f"measurements={c.measurement_count} coefficients={c.coefficient_count} "
                f"ratio={c.undersampling_ratio:.4f}")
    s = cfg.synthetic
    return (f"{cfg.scenario}: dims={list(s.row_dims)} N={s.N} S={s.S}\n"
            f"measurements={s.measurement_count} coefficients={s.coefficient_count} "
            f"ratio={s.measurement_count / s.coefficient_count:.4f}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags = {k: getattr(args, k) for k in ("scenario", "seed", "trials", "snr", "m", "sparsity",
                                                 "algorithms", "out", "parallel")}
        cfg = parse_config(args.config, flags)
    except ConfigError as exc:
        print(f"kronsr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "info":
        print(info(cfg))
        return EXIT_OK
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
