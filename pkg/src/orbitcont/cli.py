"""Batch driver: ``run``, ``plotdata`` and ``bench-cis``.

A run is described by an INI file::

    [run]
    model = fhn4
    schedule = 1, 2, 3, accuracy, final
    output = out/fhn

    [model]
    delta = 0.001

    [mesh]
    intervals = 100
    degree = 4

    [continuation]
    ds = 0.05
    ds_max = 5

    [final]
    ds = 0.01
    ds_max = 0.5
    direction = delta:+1
    fold_stop = delta

The ``ORBITCONT_OUTPUT`` environment variable overrides ``[run] output``.
Exit status is 0 on success, 2 when a stage fails (artifacts written so far
are kept) and 3 for configuration errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cis import COMBINATIONS, compare_methods
from .collocation import Mesh
from .continuation import ContinuationSettings
from .errors import ConfigError, OrbitContError
from .models import REGISTRY, get_model
from .orbits import (
    ConnectingOrbitProblem,
    ScheduleResult,
    ScheduleSettings,
    StageRecord,
    equilibrium_bases,
    load_snapshot,
    save_snapshot,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SCHEDULE = 2
EXIT_CONFIG = 3
OUTPUT_ENV = "ORBITCONT_OUTPUT"


def fmt(x: float) -> str:
    """Fixed 17-significant-digit scientific notation."""
    return f"{float(x):.16e}"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class BenchmarkConfig:
    source: str = "synthetic"          # synthetic | jacobians
    jacobians: str | None = None       # npz with A0/A1 stacks, written by ``run``
    n: int = 4
    steps: int = 200
    step: float = 0.02
    stride: int = 1


@dataclass
class RunConfig:
    model: str
    params: dict[str, float] = field(default_factory=dict)
    mode: str = "locate"               # locate | continue | cis-benchmark
    schedule: list[int | str] | None = None
    start: str | None = None
    output: str = "orbitcont-out"
    seed: int = 0
    sign: int = 1
    intervals: int = 60
    degree: int = 4
    orbit_stride: int = 1
    continuation: ContinuationSettings = field(default_factory=ContinuationSettings)
    final: ContinuationSettings | None = None
    final_direction: tuple[str, int] | None = None
    final_fold_stop: str | None = None
    final_locate: tuple[str, float] | None = None
    phase: bool = False
    eps1_small: float | None = None
    cis_method: str = "newton"
    cis_guess: str = "euler"
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output)


_CONT_FIELDS = {f.name: f.type for f in fields(ContinuationSettings)}

# sections with a fixed key set; [model], [continuation] and [final] are checked elsewhere
_KNOWN_KEYS = {
    "run": {"model", "mode", "schedule", "start", "output", "seed", "sign", "orbit_stride"},
    "mesh": {"intervals", "degree"},
    "orbit": {"eps1_small"},
    "cis": {"method", "guess"},
    "benchmark": {"source", "jacobians", "n", "steps", "step", "stride"},
}
_SECTIONS = set(_KNOWN_KEYS) | {"model", "continuation", "final"}


def _cont_settings(section: configparser.SectionProxy, base: ContinuationSettings,
                   extra_keys: Sequence[str] = ()) -> ContinuationSettings:
    unknown = set(section) - set(_CONT_FIELDS) - set(extra_keys)
    if unknown:
        raise ConfigError(f"[{section.name}] unknown keys: {sorted(unknown)}")
    changes = {}
    for key in _CONT_FIELDS:
        if key in section:
            raw = section[key]
            try:
                changes[key] = int(raw) if _CONT_FIELDS[key] in ("int", int) else float(raw)
            except ValueError:
                raise ConfigError(f"[{section.name}] {key} = {raw!r} is not a number") from None
    out = replace(base, **changes)
    if not (0 < out.ds_min <= out.ds <= out.ds_max):
        raise ConfigError(f"[{section.name}] needs 0 < ds_min <= ds <= ds_max")
    if out.max_points < 1 or out.newton_tol <= 0:
        raise ConfigError(f"[{section.name}] max_points and newton_tol must be positive")
    return out


def _schedule(raw: str) -> list[int | str]:
    out: list[int | str] = []
    for tok in (t.strip() for t in raw.replace(";", ",").split(",")):
        if not tok:
            continue
        if tok.isdigit():
            out.append(int(tok))
        elif tok in ("accuracy", "final"):
            out.append(tok)
        else:
            raise ConfigError(f"unknown schedule entry {tok!r}")
    return out


def _named_value(raw: str, what: str, cast) -> tuple[str, object]:
    name, sep, value = raw.partition(":")
    if not sep or not name.strip():
        raise ConfigError(f"{what} must look like name:value, got {raw!r}")
    try:
        return name.strip(), cast(value)
    except ValueError:
        raise ConfigError(f"{what}: bad value in {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if "run" not in cp or "model" not in cp["run"]:
        raise ConfigError("config needs [run] model = <name>")
    extra = set(cp.sections()) - _SECTIONS
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    for name, keys in _KNOWN_KEYS.items():
        if name in cp and set(cp[name]) - keys:
            raise ConfigError(f"[{name}] unknown keys: {sorted(set(cp[name]) - keys)}")
    run = cp["run"]
    model = run["model"].strip()
    if model not in REGISTRY:
        raise ConfigError(f"unknown model {model!r}; known: {sorted(REGISTRY)}")
    cfg = RunConfig(model=model)
    try:
        cfg.mode = run.get("mode", cfg.mode).strip()
        if cfg.mode not in ("locate", "continue", "cis-benchmark"):
            raise ConfigError(f"unknown mode {cfg.mode!r}")
        if "schedule" in run:
            cfg.schedule = _schedule(run["schedule"])
        cfg.start = run.get("start") or None
        if cfg.mode == "continue" and cfg.start is None:
            raise ConfigError("mode = continue needs [run] start = <snapshot.npz>")
        cfg.output = run.get("output", cfg.output)
        cfg.seed = run.getint("seed", cfg.seed)
        cfg.sign = run.getint("sign", cfg.sign)
        if cfg.sign not in (1, -1):
            raise ConfigError("[run] sign must be 1 or -1")
        cfg.orbit_stride = run.getint("orbit_stride", cfg.orbit_stride)
        if cfg.orbit_stride < 0:
            raise ConfigError("[run] orbit_stride must be >= 0 (0 disables profiles)")
        if "model" in cp:
            cfg.params = {k: float(v) for k, v in cp["model"].items()}
        if "mesh" in cp:
            cfg.intervals = cp["mesh"].getint("intervals", cfg.intervals)
            cfg.degree = cp["mesh"].getint("degree", cfg.degree)
        if cfg.intervals < 4 or not 2 <= cfg.degree <= 7:
            raise ConfigError("[mesh] needs intervals >= 4 and 2 <= degree <= 7")
        if "continuation" in cp:
            cfg.continuation = _cont_settings(cp["continuation"], cfg.continuation)
        if "final" in cp:
            sec = cp["final"]
            cfg.final = _cont_settings(sec, cfg.continuation,
                                       ("direction", "fold_stop", "locate", "phase"))
            if "direction" in sec:
                nm, v = _named_value(sec["direction"], "[final] direction", int)
                cfg.final_direction = (nm, 1 if v >= 0 else -1)
            cfg.final_fold_stop = sec.get("fold_stop") or None
            if "locate" in sec:
                cfg.final_locate = _named_value(sec["locate"], "[final] locate", float)
            cfg.phase = sec.getboolean("phase", cfg.phase)
        if "orbit" in cp:
            if "eps1_small" in cp["orbit"]:
                cfg.eps1_small = cp["orbit"].getfloat("eps1_small")
        if "cis" in cp:
            cfg.cis_method = cp["cis"].get("method", cfg.cis_method)
            cfg.cis_guess = cp["cis"].get("guess", cfg.cis_guess)
        if cfg.cis_method not in ("simple", "newton") or cfg.cis_guess not in ("zero", "euler"):
            raise ConfigError("[cis] method must be simple|newton and guess zero|euler")
        if "benchmark" in cp:
            sec = cp["benchmark"]
            b = cfg.benchmark
            b.source = sec.get("source", b.source)
            b.jacobians = sec.get("jacobians") or None
            b.n = sec.getint("n", b.n)
            b.steps = sec.getint("steps", b.steps)
            b.step = sec.getfloat("step", b.step)
            b.stride = sec.getint("stride", b.stride)
            if b.source not in ("synthetic", "jacobians"):
                raise ConfigError("[benchmark] source must be synthetic or jacobians")
            if b.source == "jacobians" and not b.jacobians:
                raise ConfigError("[benchmark] source = jacobians needs jacobians = <file>")
            if b.n < 2 or b.steps < 1 or b.step <= 0 or b.stride < 1:
                raise ConfigError("[benchmark] n >= 2, steps >= 1, step > 0, stride >= 1")
    except ValueError as exc:
        raise ConfigError(f"bad value in config: {exc}") from None
    get_model(cfg.model, **cfg.params)  # parameter names checked here
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# artifacts

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


CIS_COLUMNS = ["end", "label", "method", "guess", "iterations", "kappa", "kappa_tilde",
               "sep", "distance", "accepted", "safeguard_ok"]


def branch_header(problem: ConnectingOrbitProblem) -> list[str]:
    return ["row", "stage", "index", "arclength", *problem.layout.names, "residual",
            "iterations"]


def write_run_artifacts(out: Path, problem: ConnectingOrbitProblem,
                        result: ScheduleResult | None, orbit_stride: int = 1) -> dict:
    """Write branch.csv, orbits/, snapshots/, cis_diag.csv and jacobians.npz."""
    out.mkdir(parents=True, exist_ok=True)
    if orbit_stride:
        (out / "snapshots").mkdir(exist_ok=True)
    model = problem.model
    rows = []
    A0, A1 = [], []
    reference = None
    if result is not None:
        row = 0
        for rec in result.stages:
            for i, pt in enumerate(rec.branch.points):
                st = pt.data["state"]
                rows.append([row, rec.name, i, float(pt.arclength),
                             *[float(v) for v in st.scalars], float(pt.residual),
                             int(pt.iterations)])
                A0.append(model.f_u(st.u0, st.params))
                A1.append(model.f_u(st.u1, st.params))
                if orbit_stride and (row % orbit_stride == 0):
                    t = st.mesh.nodes
                    _write_csv(out / "orbits" / f"{row:04d}.csv",
                               ["t", *[f"u{k + 1}" for k in range(problem.n)]],
                               [[float(a), *map(float, u)] for a, u in zip(t, st.U)])
                    F0, F1 = pt.data["bases"]
                    ref = reference if rec.spec.equations.count("phase") else None
                    save_snapshot(out / "snapshots" / f"{row:04d}.npz", st, F0, F1, ref)
                row += 1
            reference = rec.end.U.copy()
    _write_csv(out / "branch.csv", branch_header(problem), rows)
    hist = [] if result is None else result.cis_history
    _write_csv(out / "cis_diag.csv", CIS_COLUMNS,
               [[h.get(k, "") for k in CIS_COLUMNS] for h in hist])
    n = problem.n
    np.savez(out / "jacobians.npz", A0=np.array(A0).reshape(-1, n, n),
             A1=np.array(A1).reshape(-1, n, n))
    return {"rows": len(rows)}


def _summary(cfg: RunConfig, problem: ConnectingOrbitProblem,
             result: ScheduleResult | None, status: int) -> dict:
    out: dict[str, object] = {
        "model": cfg.model,
        "mode": cfg.mode,
        "status": status,
        "mesh": {"intervals": cfg.intervals, "degree": cfg.degree},
        "n0": problem.n0,
        "n1": problem.n1,
        "lambda": list(problem.lambda_names),
    }
    if result is None:
        out.update({"completed": True, "stages": [], "final": None, "message": "empty schedule"})
        return out
    fin = result.final
    out["completed"] = result.completed
    out["message"] = result.message
    out["stages"] = result.transcript()
    out["final"] = {
        "scalars": {nm: float(v) for nm, v in zip(fin.layout.names, fin.scalars)},
        "spectrum_u0": _spectrum(problem, fin.u0, fin.params),
        "spectrum_u1": _spectrum(problem, fin.u1, fin.params),
    }
    return out


def _spectrum(problem: ConnectingOrbitProblem, u: np.ndarray, p: np.ndarray) -> list:
    w = np.linalg.eigvals(problem.model.f_u(u, p))
    w = w[np.lexsort((w.imag, w.real))]
    return [[float(z.real), float(z.imag)] for z in w]


# ---------------------------------------------------------------------------
# commands

def _schedule_settings(cfg: RunConfig) -> ScheduleSettings:
    stage_cont = {} if cfg.final is None else {"final": cfg.final}
    return ScheduleSettings(
        continuation=cfg.continuation, stage_continuation=stage_cont,
        eps1_small=cfg.eps1_small, final_direction=cfg.final_direction,
        final_fold_stop=cfg.final_fold_stop, final_locate=cfg.final_locate, phase=cfg.phase,
        cis_method=cfg.cis_method, cis_guess=cfg.cis_guess)


def execute(cfg: RunConfig) -> int:
    """Run a locate/continue configuration and write all artifacts."""
    from .orbits import run_schedule

    if cfg.mode == "cis-benchmark":
        return benchmark(cfg)
    model = get_model(cfg.model, **cfg.params)
    problem = ConnectingOrbitProblem.from_model(model)
    mesh = Mesh.uniform(cfg.intervals, cfg.degree)
    start = None
    if cfg.mode == "continue":
        try:
            start, *_ = load_snapshot(cfg.start, problem.layout)
        except (OSError, KeyError) as exc:
            raise ConfigError(f"cannot load start snapshot {cfg.start}: {exc}") from None
        mesh = start.mesh
    schedule = cfg.schedule
    if schedule is None:
        schedule = ["final"] if cfg.mode == "continue" else None
    out = cfg.output_dir()

    def progress(rec: StageRecord) -> None:
        log.info("stage %s: %d points, %s", rec.name, len(rec.branch.points), rec.branch.reason)

    result = None
    if schedule is None or len(schedule) > 0:
        result = run_schedule(problem, mesh, _schedule_settings(cfg), schedule=schedule,
                              sign=cfg.sign, start=start, on_stage=progress)
    status = EXIT_OK if result is None or result.completed else EXIT_SCHEDULE
    write_run_artifacts(out, problem, result, cfg.orbit_stride)
    if result is not None:
        save_snapshot(out / "final.npz", result.final, *_final_bases(result, problem))
    summary = _summary(cfg, problem, result, status)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return status


def _final_bases(result: ScheduleResult, problem: ConnectingOrbitProblem):
    for rec in reversed(result.stages):
        if rec.branch.points:
            return rec.branch.last.data["bases"]
    fin = result.final
    A0 = problem.model.f_u(fin.u0, fin.params)
    A1 = problem.model.f_u(fin.u1, fin.params)
    return equilibrium_bases(A0, "unstable"), equilibrium_bases(A1, "stable")


def synthetic_path(n: int, steps: int, step: float, rng: np.random.Generator
                   ) -> tuple[list[np.ndarray], int]:
    """Smooth path ``A(s) = V(s) diag(d(s)) V(s)^-1`` with a persistent sign split."""
    m = max(1, n // 2)
    d0 = np.concatenate([rng.uniform(0.2, 2.0, m), -rng.uniform(0.2, 2.0, n - m)])
    d1 = d0 * rng.uniform(0.5, 1.5, n)
    V0 = np.eye(n) + 0.3 * rng.standard_normal((n, n))
    W = 0.3 * rng.standard_normal((n, n))
    mats = []
    for k in range(steps + 1):
        s = k * step
        w = 0.5 * (1 - np.cos(np.pi * min(s, 1.0)))
        V = V0 + np.sin(s) * W
        mats.append(V @ np.diag(d0 + w * (d1 - d0)) @ np.linalg.inv(V))
    return mats, m


def benchmark(cfg: RunConfig) -> int:
    """Compare the four refinement variants along matrix paths; write cis_bench.csv."""
    b = cfg.benchmark
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if b.source == "jacobians":
        try:
            z = np.load(b.jacobians)
            stacks = [(z["A0"], "unstable"), (z["A1"], "stable")]
        except (OSError, KeyError) as exc:
            raise ConfigError(f"cannot read jacobians {b.jacobians}: {exc}") from None
        for mats, which in stacks:
            mats = list(mats[::b.stride])
            if len(mats) > 1:
                paths.append((mats, equilibrium_bases(mats[0], which)))
    else:
        rng = np.random.default_rng(cfg.seed)
        mats, _ = synthetic_path(b.n, b.steps, b.step, rng)
        mats = mats[::b.stride]
        paths.append((mats, equilibrium_bases(mats[0], "unstable")))
    stats = compare_methods(paths)
    cols = ["method", "guess", "steps", "mean_iterations", "max_iterations", "failures"]
    _write_csv(out / "cis_bench.csv", cols, [[s.as_row()[c] for c in cols] for s in stats])
    diag = []
    for s in stats:
        diag.extend([r[c] for c in CIS_COLUMNS[2:10]] for r in s.rows)
    _write_csv(out / "cis_diag.csv", CIS_COLUMNS[2:10], diag)
    table = {f"{s.method}+{s.guess}": s.as_row() for s in stats}
    (out / "summary.json").write_text(json.dumps(
        {"mode": "cis-benchmark", "source": b.source, "combinations": len(COMBINATIONS),
         "table": table}, indent=2, sort_keys=True) + "\n")
    for s in stats:
        print(f"{s.method:>6}+{s.guess:<5} mean {s.mean:6.3f}  max {s.max:3d}  "
              f"failures {s.failures}")
    return EXIT_OK


def emit_plotdata(branch_csv: str | Path, x: str, y: str, out: str | Path | None = None) -> Path:
    """Extract two columns of a branch file into a whitespace-separated ``.dat`` file."""
    path = Path(branch_csv)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        for col in (x, y):
            if col not in header:
                raise ConfigError(f"column {col!r} not in {path}; have {header}")
        ix, iy = header.index(x), header.index(y)
        lines = [f"# {x} {y}"]
        for k, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ConfigError(f"{path}:{k}: expected {len(header)} fields, got {len(row)}")
            lines.append(f"{fmt(float(row[ix]))} {fmt(float(row[iy]))}")
    target = Path(out) if out is not None else path.with_name(f"{path.stem}_{x}_{y}.dat")
    target.write_text("\n".join(lines) + "\n")
    return target


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="orbitcont", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="locate or continue a connecting orbit")
    p.add_argument("config")
    p = sub.add_parser("plotdata", help="two-column file from branch.csv")
    p.add_argument("branch")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("-o", "--output")
    p = sub.add_parser("bench-cis", help="compare CIS refinement variants")
    p.add_argument("config")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plotdata":
            print(emit_plotdata(args.branch, args.x, args.y, args.output))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "bench-cis":
            return benchmark(cfg)
        status = execute(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OrbitContError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_SCHEDULE
    if status != EXIT_OK:
        print("schedule did not complete; partial artifacts written", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
