"""Command-line experiment runner.

``rmfg <pipeline> --config FILE [--seed N] [--threads N] [--out DIR]`` runs one
pipeline and writes CSV outputs plus ``manifest.json`` (written last) into the
output directory. ``rmfg diff A B`` compares two runs by manifest.

Exit codes: 0 success, 2 configuration error, 3 pipeline error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from threadpoolctl import threadpool_limits

from . import acceptance, analysis, fbsde_solver, lq_oracle, nash_pde, nplayer_sim
from .game_model import CATALOG, catalog_spec, validate_spec
from .rng import stream

__all__ = ["ConfigError", "PipelineError", "MissingFile", "ExperimentConfig", "load_config", "run",
           "diff_runs", "main", "PIPELINES"]

VERSION = "0.1.0"
PIPELINES = ("validate", "solve-lq", "solve-fbsde", "solve-pde", "simulate", "chaos", "nash-gap",
             "full-lq-acceptance")


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


class MissingFile(FileNotFoundError):
    pass


# --------------------------------------------------------------------------- config


def _pos_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _pos_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) and v > 0


def _int_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_pos_int(x) for x in v)


def _increasing(v):
    return _int_list(v) and all(b > a for a, b in zip(v, v[1:]))


def _matrix(v):
    return (isinstance(v, list) and len(v) > 0
            and all(isinstance(r, list) and len(r) == len(v) for r in v)
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) for r in v for x in r))


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                      for x in v)


SCHEMA = {
    "": {"pipeline": (lambda v: v in PIPELINES, f"one of {', '.join(PIPELINES)}"),
         "seed": (lambda v: _nonneg_int(v) and v < 2**64, "an integer in [0, 2^64)"),
         "out": (lambda v: isinstance(v, str) and v != "", "a nonempty path"),
         "threads": (_pos_int, "a positive integer")},
    "spec": {"catalog": (lambda v: v in CATALOG, f"one of {', '.join(sorted(CATALOG))}"),
             "generator": (_matrix, "a square matrix"),
             "horizon": (_pos_num, "a positive number"),
             "x0": (_num_list, "a list of numbers"),
             "initial_regime": (_nonneg_int, "a nonnegative integer"),
             "params": (lambda v: isinstance(v, dict), "a table")},
    "lq": {"n_grid": (lambda v: _pos_int(v) and v >= 200, "an integer >= 200")},
    "fbsde": {k: (_pos_int, "a positive integer")
              for k in ("blocks", "particles", "n_steps", "max_picard", "degree", "probes", "min_regime_blocks")}
    | {"mean_degree": (_nonneg_int, "a nonnegative integer")}
    | {"tol": (_pos_num, "a positive number"), "damping": (lambda v: _pos_num(v) and v <= 1, "in (0, 1]"),
       "probe_halfwidth": (_pos_num, "a positive number")},
    "pde": {"n_x": (lambda v: _pos_int(v) and v >= 9, "an integer >= 9"),
            "n_t": (lambda v: _pos_int(v) and v >= 2, "an integer >= 2"),
            "players": (lambda v: v in (1, 2), "1 or 2")},
    "sim": {"N": (lambda v: _pos_int(v) and v >= 2, "an integer >= 2"),
            "reps": (lambda v: _pos_int(v) and v >= nplayer_sim.MIN_REPS, f"an integer >= {nplayer_sim.MIN_REPS}"),
            "n_t": (_pos_int, "a positive integer"),
            "strategy": (lambda v: v in ("auto", "oracle", "fbsde"), "auto, oracle or fbsde")},
    "chaos": {"N_list": (lambda v: _increasing(v) and len(v) >= 3, "a strictly increasing list of >= 3 counts"),
              "reps": (lambda v: _pos_int(v) and v >= 2, "an integer >= 2"),
              "n_t": (lambda v: _pos_int(v) and v % 16 == 0, "a positive multiple of 16")},
    "gap": {"N_sweep": (lambda v: _increasing(v) and all(x >= 2 for x in v), "a strictly increasing list of N >= 2"),
            "reps": (lambda v: _pos_int(v) and v >= nplayer_sim.MIN_REPS, f"an integer >= {nplayer_sim.MIN_REPS}"),
            "n_t": (_pos_int, "a positive integer"),
            "infinite_players": (lambda v: _pos_int(v) and v >= 2, "an integer >= 2")},
    "acceptance": {"criteria": (lambda v: isinstance(v, list) and len(v) > 0 and all(x in acceptance.CRITERIA
                                                                                     for x in v),
                                f"a nonempty list drawn from {sorted(acceptance.CRITERIA)}"),
                   "hamiltonian_points": (_pos_int, "a positive integer"),
                   "chain_paths": (lambda v: _pos_int(v) and v >= 2, "an integer >= 2"),
                   "w2_instances": (_pos_int, "a positive integer")},
}

DEFAULTS = {
    "spec": {"catalog": "lq", "initial_regime": 0, "params": {}},
    "lq": {"n_grid": 400},
    "fbsde": {f.name: f.default for f in fields(fbsde_solver.FbsdeBudget)},
    "pde": {"n_x": 201, "n_t": 400, "players": 1},
    "sim": {"N": 64, "reps": 200, "n_t": 64, "strategy": "auto"},
    "chaos": {"N_list": [8, 16, 32, 64, 128], "reps": 200, "n_t": 64},
    "gap": {"N_sweep": [8, 16, 32, 64], "reps": 2000, "n_t": 64, "infinite_players": 2},
    "acceptance": {"criteria": sorted(acceptance.CRITERIA), "hamiltonian_points": 10_000, "chain_paths": 10_000,
                   "w2_instances": 1000},
}


@dataclass
class ExperimentConfig:
    pipeline: str
    seed: int
    out: str
    threads: int
    sections: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.sections[name]

    def echo(self) -> dict:
        return {"pipeline": self.pipeline, "seed": self.seed, "threads": self.threads, **self.sections}


def _check_table(name: str, table: dict) -> None:
    schema = SCHEMA[name]
    for key, value in table.items():
        path = f"{name}.{key}" if name else key
        if key not in schema:
            raise ConfigError(f"config field {path!r}: unknown key")
        ok, what = schema[key]
        if not ok(value):
            raise ConfigError(f"config field {path!r}: expected {what}, got {value!r}")


def load_config(path=None, *, pipeline: str | None = None, seed: int | None = None, threads: int | None = None,
                out: str | None = None, env=None) -> ExperimentConfig:
    """Parse and validate a TOML config; command-line values override file values."""
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path!r} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path!r}: {exc}") from exc
    top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    for k, v in raw.items():
        if isinstance(v, dict) and k not in SCHEMA:
            raise ConfigError(f"config field {k!r}: unknown section")
    _check_table("", top)
    if pipeline is not None:
        if pipeline not in PIPELINES:
            raise ConfigError(f"pipeline {pipeline!r}: expected one of {', '.join(PIPELINES)}")
        if "pipeline" in top and top["pipeline"] != pipeline:
            raise ConfigError(f"config field 'pipeline': file says {top['pipeline']!r}, command line {pipeline!r}")
        top["pipeline"] = pipeline
    for key, value in (("seed", seed), ("threads", threads), ("out", out)):
        if value is not None:
            top[key] = value
    if env.get("RMFG_OUT"):
        top["out"] = env["RMFG_OUT"]
    _check_table("", top)
    if "pipeline" not in top:
        raise ConfigError("config field 'pipeline': missing")
    if "seed" not in top:
        raise ConfigError("config field 'seed': missing (no wall-clock seeding)")
    sections = {}
    for name, defaults in DEFAULTS.items():
        table = raw.get(name, {})
        _check_table(name, table)
        merged = copy.deepcopy(defaults)
        merged.update(table)
        sections[name] = merged
    try:
        build_spec(sections["spec"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"config section 'spec': {exc}") from exc
    try:
        fbsde_solver.FbsdeBudget(**sections["fbsde"]).check()
    except ValueError as exc:
        raise ConfigError(f"config section 'fbsde': {exc}") from exc
    return ExperimentConfig(top["pipeline"], int(top["seed"]), top.get("out", f"rmfg-out/{top['pipeline']}"),
                            int(top.get("threads", os.cpu_count() or 1)), sections)


def build_spec(section: dict):
    kw = {k: section[k] for k in ("generator", "horizon", "x0") if k in section}
    return catalog_spec(section["catalog"], initial_regime=section.get("initial_regime", 0), **kw,
                        **section.get("params", {}))


# --------------------------------------------------------------------------- outputs


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Outputs:
    """Atomic file emission (temp file + rename) with an inventory for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, dict] = {}
        root.mkdir(parents=True, exist_ok=True)

    def emit(self, name: str, writer, *args, **kwargs) -> Path:
        final = self.root / name
        tmp = self.root / f".{name}.tmp"
        writer(*args, tmp, **kwargs)
        os.replace(tmp, final)
        self.files[name] = {"sha256": _sha256(final), "bytes": final.stat().st_size}
        return final

    def text(self, name: str, lines) -> Path:
        def w(path):
            Path(path).write_text("".join(f"{line}\n" for line in lines))
        return self.emit(name, w)

    def rows(self, name: str, header, rows) -> Path:
        def w(path):
            with open(path, "w", newline="") as fh:
                cw = csv.writer(fh)
                cw.writerow(header)
                cw.writerows(rows)
        return self.emit(name, w)


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# --------------------------------------------------------------------------- pipelines


def _strategy(cfg, spec, out, timed):
    choice = cfg.section("sim")["strategy"]
    if choice == "auto":
        choice = "oracle" if spec.lq is not None else "fbsde"
    if choice == "oracle":
        if spec.lq is None:
            raise ConfigError("config field 'sim.strategy': the oracle needs an LQ catalog entry")
        return timed("riccati", lambda: nplayer_sim.OracleStrategy(spec, n_grid=cfg.section("lq")["n_grid"]))
    budget = fbsde_solver.FbsdeBudget(**cfg.section("fbsde"))
    field_, ens, rep = timed("fbsde", lambda: fbsde_solver.solve(spec, budget, cfg.seed))
    out.emit("field.txt", fbsde_solver.write_field, field_)
    return nplayer_sim.FieldStrategy(spec, field_, ens)


def _p_validate(cfg, spec, out, timed):
    rep = timed("validate", lambda: validate_spec(spec, rng=stream(cfg.seed, "cli-validate")))
    out.rows("validation.csv", ["check", "status", "estimate", "message"],
             [[c.name, c.status, "" if c.estimate is None else _num(c.estimate), c.message] for c in rep.checks])
    return {"passed": rep.passed}


def _need_lq(spec):
    if spec.lq is None:
        raise ConfigError("config field 'spec.catalog': this pipeline needs an LQ catalog entry")


def _p_solve_lq(cfg, spec, out, timed):
    _need_lq(spec)
    grid = np.linspace(0.0, spec.horizon, cfg.section("lq")["n_grid"] + 1)
    sol = timed("riccati", lambda: lq_oracle.solve_riccati(spec.lq, spec.regimes, grid))
    out.emit("riccati.csv", lq_oracle.write_riccati_csv, sol)
    return {"residual": lq_oracle.riccati_residual(sol), "max_local_error": sol.max_local_error}


def _p_solve_fbsde(cfg, spec, out, timed):
    budget = fbsde_solver.FbsdeBudget(**cfg.section("fbsde"))
    field_, ens, rep = timed("fbsde", lambda: fbsde_solver.solve(spec, budget, cfg.seed))
    out.emit("field.txt", fbsde_solver.write_field, field_)
    out.emit("picard.csv", fbsde_solver.write_picard_csv, rep, timings=False)
    summary = {"iterations": rep.iterations, "converged": rep.converged,
               "bsde_residual": fbsde_solver.bsde_residual(ens, spec, field_)}
    if spec.lq is not None:
        sol = lq_oracle.solve_riccati(spec.lq, spec.regimes, np.linspace(0, spec.horizon, 401))
        summary["oracle_error"] = acceptance.fbsde_oracle_error(spec, field_, ens, sol)
    return summary


def _p_solve_pde(cfg, spec, out, timed):
    pde = cfg.section("pde")
    params = nash_pde.GridParams(n_x=pde["n_x"], n_t=pde["n_t"])
    vg = timed("pde", lambda: nash_pde.solve_nash_system(spec, pde["players"], params))
    out.emit("values.csv", nash_pde.write_value_csv, vg)
    return {"residual": nash_pde.pde_residual(vg, spec), "substeps": vg.substeps}


def _p_simulate(cfg, spec, out, timed):
    src = _strategy(cfg, spec, out, timed)
    sim = cfg.section("sim")
    runs = timed("simulate", lambda: nplayer_sim.simulate(spec, sim["N"], src, sim["reps"], sim["n_t"], cfg.seed,
                                                          arms=[None] + nplayer_sim.default_deviation_family(spec)))
    out.emit("runs.csv", nplayer_sim.write_runs_csv, spec, runs)
    c = nplayer_sim.estimate_cost(spec, runs[0])
    return {"cost": c.estimate, "stderr": c.stderr}


def _p_chaos(cfg, spec, out, timed):
    src = _strategy(cfg, spec, out, timed)
    ch = cfg.section("chaos")
    table = timed("chaos", lambda: analysis.chaos_sweep(spec, src, ch["N_list"], ch["reps"], ch["n_t"], cfg.seed))
    out.emit("chaos.csv", analysis.write_chaos_csv, table)
    return {"slope": table.slope, "slope_stderr": table.slope_stderr}


def _p_nash_gap(cfg, spec, out, timed):
    src = _strategy(cfg, spec, out, timed)
    g = cfg.section("gap")
    inf = timed("gap-infinite", lambda: nplayer_sim.nash_gap(spec, [g["infinite_players"]], src, reps=g["reps"],
                                                             n_t=g["n_t"], seed=cfg.seed, infinite=True))
    fin = timed("gap", lambda: nplayer_sim.nash_gap(spec, g["N_sweep"], src, reps=g["reps"], n_t=g["n_t"],
                                                    seed=cfg.seed))
    out.emit("gap_infinite.csv", nplayer_sim.write_gap_csv, inf)
    out.emit("gap.csv", nplayer_sim.write_gap_csv, fin)
    return {"gap_last": fin.rows[-1].gap_clamped, "non_increasing": fin.non_increasing_within_ci()}


def _p_full(cfg, spec, out, timed):
    acc = cfg.section("acceptance")
    kwargs = {
        1: {"seed": cfg.seed, "points": acc["hamiltonian_points"]},
        2: {"seed": cfg.seed, "n_paths": acc["chain_paths"]},
        3: {"seed": cfg.seed, "budget": fbsde_solver.FbsdeBudget(**cfg.section("fbsde"))},
        4: {"n_x": cfg.section("pde")["n_x"], "n_t": cfg.section("pde")["n_t"]},
        5: {"seed": cfg.seed, "reps": cfg.section("chaos")["reps"], "N_list": cfg.section("chaos")["N_list"],
            "n_t": cfg.section("chaos")["n_t"]},
        6: {"seed": cfg.seed, "reps": cfg.section("gap")["reps"], "N_sweep": cfg.section("gap")["N_sweep"],
            "n_t": cfg.section("gap")["n_t"]},
        8: {"seed": cfg.seed, "instances": acc["w2_instances"]},
    }
    rows, runtime = [], {}
    for k in acc["criteria"]:
        res = timed(f"criterion-{k}", lambda k=k: acceptance.run_criterion(k, **kwargs[k]))
        print(res.line(), flush=True)
        runtime[f"criterion-{k}"] = {"seconds": res.seconds, "limit": res.limit_seconds, "in_time": res.in_time}
        for name, value in res.metrics.items():
            rows.append([k, res.title, _num(res.numeric_pass), name, _num(value)])
        if k == 3:
            for name, (field_, rep) in res.artifacts.items():
                out.emit(f"field_{name}.txt", fbsde_solver.write_field, field_)
                out.emit(f"picard_{name}.csv", fbsde_solver.write_picard_csv, rep, timings=False)
        if k == 5:
            out.emit("chaos.csv", analysis.write_chaos_csv, res.artifacts["table"])
        if k == 6:
            out.emit("gap.csv", nplayer_sim.write_gap_csv, res.artifacts["finite"])
            out.emit("gap_infinite.csv", nplayer_sim.write_gap_csv, res.artifacts["infinite"])
    out.rows("acceptance.csv", ["criterion", "title", "numeric_pass", "metric", "value"], rows)
    return {"criteria_runtime": runtime}


_PIPELINES = {"validate": _p_validate, "solve-lq": _p_solve_lq, "solve-fbsde": _p_solve_fbsde,
              "solve-pde": _p_solve_pde, "simulate": _p_simulate, "chaos": _p_chaos, "nash-gap": _p_nash_gap,
              "full-lq-acceptance": _p_full}


@contextlib.contextmanager
def _thread_limit(n: int):
    with threadpool_limits(limits=n):
        yield


def run(cfg: ExperimentConfig) -> dict:
    """Execute the configured pipeline; returns the manifest (also written as ``manifest.json``)."""
    root = Path(cfg.out)
    out = _Outputs(root)
    stages: dict[str, float] = {}

    def timed(stage, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except (ConfigError, PipelineError):
            raise
        except Exception as exc:
            raise PipelineError(f"stage {stage!r} failed: {type(exc).__name__}: {exc}") from exc
        finally:
            stages[stage] = stages.get(stage, 0.0) + time.perf_counter() - t0

    spec = build_spec(cfg.section("spec"))
    with _thread_limit(cfg.threads):
        summary = _PIPELINES[cfg.pipeline](cfg, spec, out, timed)
    manifest = {
        "pipeline": cfg.pipeline,
        "config": cfg.echo(),
        "versions": {"rmfg": VERSION, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "stages": stages,
        "summary": json.loads(json.dumps(summary, default=_num)),
        "files": dict(sorted(out.files.items())),
    }
    tmp = root / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_num) + "\n")
    os.replace(tmp, root / "manifest.json")
    return manifest


# --------------------------------------------------------------------------- diff


def _load_manifest(p) -> tuple[dict, Path]:
    p = Path(p)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        return json.loads(p.read_text()), p.parent
    except FileNotFoundError as exc:
        raise MissingFile(f"manifest {str(p)!r} not found") from exc


def _csv_cells(path: Path):
    with open(path, newline="") as fh:
        return [row for row in csv.reader(line for line in fh if not line.startswith("#"))]


def _max_abs_diff(a: Path, b: Path) -> float:
    ra, rb = _csv_cells(a), _csv_cells(b)
    if len(ra) != len(rb):
        return math.inf
    worst = 0.0
    for x, y in zip(ra, rb):
        if len(x) != len(y):
            return math.inf
        for u, v in zip(x, y):
            if u == v:
                continue
            try:
                worst = max(worst, abs(float(u) - float(v)))
            except ValueError:
                return math.inf
    return worst


def diff_runs(manifest_a, manifest_b) -> list[dict]:
    """Files whose checksums differ; CSV mismatches carry the max absolute cell difference."""
    ma, da = _load_manifest(manifest_a)
    mb, db = _load_manifest(manifest_b)
    fa, fb = ma["files"], mb["files"]
    report = []
    for name in sorted(set(fa) | set(fb)):
        if name not in fa or name not in fb:
            report.append({"file": name, "status": "only-a" if name in fa else "only-b"})
            continue
        if fa[name]["sha256"] == fb[name]["sha256"]:
            continue
        entry = {"file": name, "status": "differs"}
        if name.endswith(".csv"):
            for d in (da, db):
                if not (d / name).exists():
                    raise MissingFile(f"{d / name} listed in manifest but missing")
            entry["max_abs_diff"] = _max_abs_diff(da / name, db / name)
        report.append(entry)
    return report


# --------------------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmfg", description="Regime-switching mean-field game experiments.")
    p.add_argument("pipeline", choices=PIPELINES + ("diff",))
    p.add_argument("runs", nargs="*", help="for diff: two run directories or manifest files")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.pipeline == "diff":
        if len(args.runs) != 2:
            print("rmfg diff needs exactly two runs", file=sys.stderr)
            return 2
        try:
            report = diff_runs(*args.runs)
        except MissingFile as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
        for e in report:
            extra = f" max_abs_diff={e['max_abs_diff']:.3g}" if "max_abs_diff" in e else ""
            print(f"{e['status']:8s} {e['file']}{extra}")
        return 0
    if args.runs:
        print(f"unexpected arguments: {' '.join(args.runs)}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, pipeline=args.pipeline, seed=args.seed, threads=args.threads, out=args.out)
        manifest = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps({"out": cfg.out, "summary": manifest["summary"]}, default=_num))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
