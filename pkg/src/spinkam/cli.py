"""Command-line front end: ``spinkam rotation | basin | continue | analyze``.

Settings come from built-in defaults, then an optional flat ``key = value``
file (``--config``), then command-line flags.  Every run that writes files
also writes ``manifest.txt``, which is itself a valid config file.
"""
from __future__ import annotations

import logging
import re
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import click
from mpmath import mp

from . import analysis, bundles, kam
from .flowmap import TaylorConfig, default_workers
from .model import ModelParams, Variant
from .numerics import format_scalar, set_precision

EXIT_OK, EXIT_NONCONVERGENCE, EXIT_STALL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("spinkam")


@dataclass
class RunConfig:
    precision: int = 40
    variant: str = Variant.NON_AVERAGED.value
    mu: str = "1e-3"
    omega: str = "omega1"
    taylor_order: int = 0          # 0 picks the order from the precision
    taylor_tol: str = ""           # empty means 10^-precision
    newton_tol: str = "1e-30"
    tail_lo: str = "1e-38"
    tail_hi: str = "1e-28"
    L_min: int = 32
    L_max: int = 2048
    eps_step_init: str = "1e-3"
    eps_step_min: str = "1e-7"
    eps_step_max: str = "2e-3"
    max_newton_iters: int = 10
    workers: int = 0               # 0 reads SPINKAM_WORKERS
    output_dir: str = "."

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and not isinstance(v, int):
                setattr(self, f.name, int(v))
        Variant(self.variant)
        if self.precision < 10:
            raise ValueError("precision must be at least 10 digits")

    # resolved views, valid once the working precision is set
    def frequency(self):
        if self.omega in ("omega1", "omega2"):
            return kam.frequency(self.omega)
        return kam.frequency_from_continued_fraction(self.omega)

    def taylor(self) -> TaylorConfig:
        cfg = TaylorConfig.for_precision(self.precision, self.taylor_tol or None)
        if self.taylor_order:
            cfg.order = self.taylor_order
        return cfg

    def continuation(self) -> kam.ContinuationConfig:
        return kam.ContinuationConfig(
            newton_tol=self.newton_tol, tail_lo=self.tail_lo, tail_hi=self.tail_hi,
            L_max=self.L_max, L_min=self.L_min, eps_step_init=self.eps_step_init,
            eps_step_min=self.eps_step_min, eps_step_max=self.eps_step_max,
            max_newton_iters=self.max_newton_iters)

    def n_workers(self) -> int:
        return self.workers or default_workers()

    def params(self, eps="0", ecc="0") -> ModelParams:
        return ModelParams(eps=eps, ecc=ecc, mu=self.mu, variant=Variant(self.variant))


_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if m is None:
            raise ValueError(f"{source}:{n}: expected 'key = value'")
        key, value = m.groups()
        if key not in known:
            raise ValueError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def config_text(cfg: RunConfig, extra: dict | None = None) -> str:
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items()]
    lines += [f"# {k} = {v}" for k, v in (extra or {}).items()]
    return "\n".join(lines) + "\n"


def write_manifest(cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.txt"
    path.write_text(config_text(cfg, {"command": command, **(extra or {})}))
    return path


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _run(body):
    """Map domain failures to exit codes."""
    try:
        body()
    except _Fail as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except kam.ContinuationStall as exc:
        click.echo(f"stall: {exc}; last good eps = {format_scalar(exc.last_eps)}", err=True)
        sys.exit(EXIT_STALL)
    except kam.ConvergenceError as exc:
        click.echo(f"no convergence: {exc}", err=True)
        sys.exit(EXIT_NONCONVERGENCE)
    except (OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)


# --- click wiring -----------------------------------------------------------------

_FLAG_HELP = {
    "precision": "working precision in decimal digits",
    "variant": "nonaveraged or averaged tidal torque",
    "mu": "dissipation constant",
    "omega": "omega1, omega2 or a continued fraction like '[1; 2, 1, 1]'",
    "workers": "parallel workers (default from SPINKAM_WORKERS)",
    "output_dir": "directory for output files",
}


def _config_options(f):
    for fld in reversed(fields(RunConfig)):
        name = "--" + fld.name.replace("_", "-")
        f = click.option(name, fld.name, default=None, help=_FLAG_HELP.get(fld.name))(f)
    return click.option("--config", "config_file", type=click.Path(dir_okay=False),
                        help="flat key = value settings file")(f)


def _build_config(config_file, overrides: dict) -> RunConfig:
    values = {}
    if config_file:
        try:
            values.update(parse_config_text(Path(config_file).read_text(), config_file))
        except OSError as exc:
            raise _Fail(EXIT_IO, str(exc))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc))
    set_precision(cfg.precision)
    return cfg


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for Newton detail")
def main(verbose):
    """Invariant attractors of the dissipative spin-orbit problem."""
    level = logging.WARNING if not verbose else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)


def _rotation_config(n1, n2, delta, n0) -> analysis.RotationConfig:
    try:
        return analysis.RotationConfig(n1=n1, n2=n2, delta=delta, n0_override=n0)
    except ValueError as exc:
        raise click.UsageError(str(exc))


@main.command()
@click.argument("x0")
@click.argument("y0")
@click.option("--eps", required=True)
@click.option("--ecc", required=True)
@click.option("--n1", default=4500, show_default=True)
@click.option("--n2", default=4600, show_default=True)
@click.option("--delta", default=10, show_default=True)
@click.option("--n0", type=int, default=None, help="transient length (default from lambda)")
@_config_options
def rotation(x0, y0, eps, ecc, n1, n2, delta, n0, config_file, **overrides):
    """Rotation number of the orbit through (X0, Y0)."""
    def body():
        cfg = _build_config(config_file, overrides)
        rcfg = _rotation_config(n1, n2, delta, n0)
        rho, ok = analysis.rotation_number(x0, y0, cfg.params(eps, ecc), rcfg, cfg.taylor())
        click.echo(format_scalar(rho))
        if not ok:
            raise _Fail(EXIT_NONCONVERGENCE, "weighted average did not settle before n2")
    _run(body)


@main.command()
@click.option("--window", nargs=4, required=True, help="x_lo x_hi y_lo y_hi")
@click.option("--nx", type=int, required=True)
@click.option("--ny", type=int, required=True)
@click.option("--eps", required=True)
@click.option("--ecc", required=True)
@click.option("--n1", default=4500, show_default=True)
@click.option("--n2", default=4600, show_default=True)
@click.option("--delta", default=10, show_default=True)
@click.option("--n0", type=int, default=None)
@click.option("--start", type=int, default=0, help="first node (row-major) to compute")
@click.option("--stop", type=int, default=None, help="one past the last node")
@click.option("--out", "out_name", default="basin.csv", show_default=True)
@_config_options
def basin(window, nx, ny, eps, ecc, n1, n2, delta, n0, start, stop, out_name, config_file, **overrides):
    """Rotation numbers on a grid of initial conditions; resumable by node range."""
    def body():
        cfg = _build_config(config_file, overrides)
        rcfg = _rotation_config(n1, n2, delta, n0)
        params = cfg.params(eps, ecc)
        try:
            analysis.basin_nodes(window, nx, ny)
        except ValueError as exc:
            raise click.UsageError(str(exc))
        total = nx * ny
        stop_ = total if stop is None else min(stop, total)
        if not 0 <= start <= stop_:
            raise click.UsageError("need 0 <= start <= stop")
        write_manifest(cfg, "basin", {"window": " ".join(window), "nx": nx, "ny": ny, "eps": eps,
                                      "ecc": ecc, "start": start, "stop": stop_})
        path = Path(cfg.output_dir) / out_name
        nodes = analysis.basin_grid(window, nx, ny, params, rcfg, cfg.taylor(), cfg.n_workers(),
                                    node_range=(start, stop_))
        rows = analysis.basin_rows(nodes)
        if start == 0 or not path.exists():
            text = analysis.basin_header(params, rcfg, window, nx, ny) + rows
            path.write_text("\n".join(text) + "\n")
        else:
            with path.open("a") as fh:
                fh.write("\n".join(rows) + ("\n" if rows else ""))
        click.echo(f"wrote {len(rows)} nodes to {path}")
    _run(body)


TORUS_PATTERN = "torus_{:04d}.txt"
LOG_NAME = "continuation.log"


def _checkpoint_history(start_path: Path, limit: int = 4) -> list:
    """The start torus and up to three numbered predecessors beside it."""
    m = re.fullmatch(r"torus_(\d+)\.txt", start_path.name)
    if m is None:
        return [kam.read_torus(start_path)]
    k = int(m.group(1))
    out = []
    for j in range(max(0, k - limit + 1), k + 1):
        p = start_path.with_name(TORUS_PATTERN.format(j))
        if p.exists():
            out.append(kam.read_torus(p))
    return out


@main.command(name="continue")
@click.option("--from-integrable", is_flag=True, help="seed from the averaged eps = 0 torus")
@click.option("--start", "start_file", type=click.Path(dir_okay=False), help="restart from a torus file")
@click.option("--eps-target", required=True)
@click.option("--L", "L0", type=int, default=32, show_default=True, help="mesh of the integrable seed")
@_config_options
def continue_(from_integrable, start_file, eps_target, L0, config_file, **overrides):
    """Continue a torus family in eps, writing one torus file per step plus a log."""
    def body():
        cfg = _build_config(config_file, overrides)
        if from_integrable == bool(start_file):
            raise click.UsageError("give exactly one of --from-integrable and --start")
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, "continue", {"eps_target": eps_target,
                                         "start": start_file or "integrable", "L": L0})
        log_path = out / LOG_NAME
        if from_integrable:
            start = kam.integrable_torus(cfg.frequency(), cfg.params(), L=L0)
            history, records, index = [], [], 0
            kam.write_log(log_path, [])
        else:
            hist = _checkpoint_history(Path(start_file))
            start = hist[-1]
            records = kam.read_log(log_path) if log_path.exists() else []
            match = [r for r in records if r.eps == start.eps]
            if match:
                start.residual = match[-1].residual
                records = [r for r in records if r.eps <= start.eps]
                kam.write_log(log_path, records)
            history = hist[:-1]
            m = re.fullmatch(r"torus_(\d+)\.txt", Path(start_file).name)
            index = int(m.group(1)) + 1 if m else len(records)
        counter = [index]

        def on_accept(sol, rec):
            kam.write_torus(out / TORUS_PATTERN.format(counter[0]), sol)
            kam.append_log(log_path, rec)
            counter[0] += 1
            click.echo(f"eps = {mp.nstr(sol.eps, 12)}  e = {mp.nstr(sol.ecc, 20)}  "
                       f"residual = {mp.nstr(sol.residual, 3)}  L = {sol.L}")

        kam.continue_family(start, eps_target, cfg.continuation(), cfg.taylor(), cfg.n_workers(),
                            on_accept=on_accept, records=records, history=history)
    _run(body)


@main.command()
@click.argument("log_file", type=click.Path(dir_okay=False))
@click.option("--torus", "torus_files", multiple=True, type=click.Path(dir_okay=False),
              help="torus files to export bundles for (repeatable)")
@click.option("--angle-floor", default=str(analysis.DEFAULT_ANGLE_FLOOR), show_default=True)
@_config_options
def analyze(log_file, torus_files, angle_floor, config_file, **overrides):
    """Breakdown report, seminorm and observable tables, bundle exports."""
    def body():
        cfg = _build_config(config_file, overrides)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        records = kam.read_log(log_file)
        write_manifest(cfg, "analyze", {"log": log_file, "torus": " ".join(torus_files)})
        report = analysis.breakdown_report(records, angle_floor)
        (out / "report.txt").write_text("\n".join(report.lines()) + "\n")
        click.echo("\n".join(report.lines()))
        orders = range(1, len(records[0].seminorms) + 1)
        rows = ["eps," + ",".join(f"H{r}" for r in orders)]
        rows += [",".join([format_scalar(r.eps)] + [format_scalar(h) for h in r.seminorms]) for r in records]
        (out / "seminorms.csv").write_text("\n".join(rows) + "\n")
        specs = [analysis.ObservableSpec.parse(s) for s in analysis.STANDARD_OBSERVABLES]
        rows = ["eps," + ",".join(analysis.STANDARD_OBSERVABLES)]
        rows += [",".join([format_scalar(eps)] + [format_scalar(v) for v in vals])
                 for eps, vals in analysis.observable_table(records, specs)]
        (out / "observables.csv").write_text("\n".join(rows) + "\n")
        for name in torus_files:
            sol = kam.read_torus(name)
            pair = bundles.reduce_bundles(bundles.adapted_frame(sol, cfg.taylor(), cfg.n_workers()), sol.lam)
            stem = Path(name).stem
            bundles.export_bundles(out / f"bundles_{stem}.txt", pair)
            bundles.export_bundles(out / f"bundles_{stem}_normalized.txt", pair, normalized=True)
            tc, ts = bundles.bundle_angles_vs_axis(pair)
            lines = ["theta theta_c theta_s"]
            for j, (a, b) in enumerate(zip(tc.to_grid(), ts.to_grid())):
                lines.append(" ".join(format_scalar(v) for v in (mp.mpf(j) / sol.L, a, b)))
            (out / f"angles_{stem}.txt").write_text("\n".join(lines) + "\n")
            click.echo(f"{name}: min |alpha|/pi = {mp.nstr(bundles.min_angle(pair), 10)}")
    _run(body)


if __name__ == "__main__":
    main()
