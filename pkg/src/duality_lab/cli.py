"""``duality-lab`` command line: run configs, list experiments, plot results, run the acceptance suite."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from xml.sax.saxutils import escape

import click
import numpy as np
import tomli

from . import __version__, acceptance
from .experiments import REGISTRY, Outcome
from .interface import fan_svg
from .stochastic_core import ParameterError, RngStream, worker_count

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2
CSV_COLUMNS = ["metric_name", "value", "stderr", "ci_low", "ci_high", "n_samples"]
TOP_KEYS = {"experiment", "seed", "replicates", "output_dir", "params"}
PLOT_KINDS = ("histogram", "curve", "fan")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config


def load_config(path, seed_override: int | None = None) -> dict:
    """Parse and validate a TOML experiment config.

    Returns a dict with ``experiment``, ``seed``, ``replicates``,
    ``output_dir`` and the validated ``params``.
    """
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return validate_config(raw, seed_override, base=Path(path).parent)


def validate_config(raw: dict, seed_override: int | None = None, base: Path | None = None) -> dict:
    extra = sorted(set(raw) - TOP_KEYS)
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
    if "experiment" not in raw:
        raise ConfigError("missing required key 'experiment'")
    name = raw["experiment"]
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; see `duality-lab list`")
    exp = REGISTRY[name]
    seed = raw.get("seed", acceptance.SEED) if seed_override is None else seed_override
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("'seed' must be an integer in [0, 2^64)")
    reps = raw.get("replicates", exp.default_replicates)
    if isinstance(reps, bool) or not isinstance(reps, int) or reps < 1:
        raise ConfigError("'replicates' must be a positive integer")
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("'params' must be a table")
    try:
        params = exp.validate(params)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    out_dir = Path(raw.get("output_dir", f"results/{name}"))
    if base is not None and not out_dir.is_absolute():
        out_dir = base / out_dir
    return {"experiment": name, "seed": seed, "replicates": reps, "output_dir": out_dir, "params": params}


def _canonical(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {k: _canonical(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_canonical(x) for x in v]
    return v


def config_hash(cfg: dict) -> str:
    """sha256 of the semantic fields (everything except ``output_dir``)."""
    sem = {k: cfg[k] for k in ("experiment", "seed", "replicates", "params")}
    text = json.dumps(_canonical(sem), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Running and writing


def execute(cfg: dict, workers: int | None = None) -> tuple[Outcome, dict]:
    exp = REGISTRY[cfg["experiment"]]
    rng = RngStream(cfg["seed"], 0)
    t0 = time.perf_counter()
    outcome = exp.runner(cfg["params"], cfg["replicates"], rng, workers)
    wall = time.perf_counter() - t0
    meta = {"experiment": exp.name, "operation": exp.operation, "config_hash": config_hash(cfg),
            "version": __version__, "seed": cfg["seed"], "replicates": cfg["replicates"],
            "params": _canonical(cfg["params"]), "wall_time_s": wall}
    return outcome, meta


def _fmt(v: float) -> str:
    return repr(float(v))


def write_results(outcome: Outcome, meta: dict, out_dir: Path) -> list[str]:
    """Write results.csv, results.json and any tables.  Returns violated invariants."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in outcome.metrics:
        lo, hi = m.ci
        rows.append({"metric_name": m.name, "value": m.value, "stderr": m.stderr,
                     "ci_low": lo, "ci_high": hi, "n_samples": m.n})
    with open(out_dir / "results.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            wr.writerow([r["metric_name"], _fmt(r["value"]), _fmt(r["stderr"]), _fmt(r["ci_low"]),
                         _fmt(r["ci_high"]), r["n_samples"]])
    invariants = dict(outcome.invariants)
    invariants["ci_brackets_value"] = all(
        r["ci_low"] <= r["value"] <= r["ci_high"] for r in rows if not math.isnan(r["value"]))
    for name, (header, table) in outcome.tables.items():
        with open(out_dir / name, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            wr.writerows(table)
    doc = {"metadata": meta, "rows": _canonical(rows), "series": _canonical(outcome.series),
           "invariants": invariants}
    with open(out_dir / "results.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [k for k, ok in invariants.items() if not ok]


# ---------------------------------------------------------------------------
# SVG plots


class PlotError(Exception):
    pass


def _svg_open(w, h):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
            f'<rect width="{w}" height="{h}" fill="white"/>']


def _scaler(lo, hi, a, b):
    span = (hi - lo) or 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def curve_svg(series: dict, width=480, height=320, pad=40) -> str:
    x = np.asarray(series["x"], dtype=float)
    y = np.asarray(series["y"], dtype=float)
    se = np.asarray(series.get("stderr") or [], dtype=float)
    band = se.size == y.size and np.any(se > 0)
    lo_y = y - 1.96 * se if band else y
    hi_y = y + 1.96 * se if band else y
    fx = _scaler(x.min(), x.max(), pad, width - pad)
    fy = _scaler(float(np.min(lo_y)), float(np.max(hi_y)), height - pad, pad)
    out = _svg_open(width, height)
    if band:
        pts = [(fx(a), fy(b)) for a, b in zip(x, hi_y)] + [(fx(a), fy(b)) for a, b in zip(x[::-1], lo_y[::-1])]
        out.append('<polygon class="ci-band" fill="#9ecae1" fill-opacity="0.5" stroke="none" points="'
                   + " ".join(f"{a:.2f},{b:.2f}" for a, b in pts) + '"/>')
    out.append('<polyline class="curve" fill="none" stroke="#08519c" stroke-width="1.5" points="'
               + " ".join(f"{fx(a):.2f},{fy(b):.2f}" for a, b in zip(x, y)) + '"/>')
    out.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
    out.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
    out.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">{escape(series.get("label", ""))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_svg(samples, bins=30, width=480, height=320, pad=40) -> str:
    counts, edges = np.histogram(np.asarray(samples, dtype=float), bins=bins)
    fx = _scaler(edges[0], edges[-1], pad, width - pad)
    fy = _scaler(0, counts.max(), height - pad, pad)
    out = _svg_open(width, height)
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        x0, x1, top = float(fx(a)), float(fx(b)), float(fy(c))
        out.append(f'<rect class="bar" x="{x0:.2f}" y="{top:.2f}" width="{x1 - x0:.2f}" '
                   f'height="{height - pad - top:.2f}" fill="#6baed6" stroke="white"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_plot(doc: dict, kind: str) -> str:
    series = doc.get("series") or {}
    if not doc.get("rows") and not series:
        raise PlotError("result is empty")
    if kind == "curve":
        s = series.get("curve")
        if not s or not s.get("x"):
            raise PlotError("result has no curve series")
        return curve_svg(s)
    if kind == "histogram":
        s = series.get("samples")
        if not s:
            raise PlotError("result has no samples for a histogram")
        return histogram_svg(s)
    s = series.get("fan")
    if not s or not s.get("rows"):
        raise PlotError("result has no particle trajectories")
    C = s.get("circumference")
    C = float(C) if C not in (None, "inf") else None
    rows = [(float(r[0]), int(r[1]), float(r[2]) if r[2] is not None else math.nan, bool(r[3]))
            for r in s["rows"]]
    return fan_svg(rows, C)


def _load_result(path: Path) -> dict:
    if path.is_dir():
        path = path / "results.json"
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise PlotError(f"no result at {path}") from None
    if not text.strip():
        raise PlotError("result is empty")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlotError(f"cannot parse {path}: {exc}") from None


# ---------------------------------------------------------------------------
# Commands


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Duality experiments for voter, branching and interface models."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("config", type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--plot", "plot_kind", type=click.Choice(PLOT_KINDS), default=None,
              help="Also write plots/<kind>.svg.")
def run(config, seed, plot_kind):
    """Run the experiment described by CONFIG (TOML)."""
    try:
        cfg = load_config(config, seed)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        outcome, meta = execute(cfg, worker_count())
    except ParameterError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    bad = write_results(outcome, meta, cfg["output_dir"])
    for m in outcome.metrics:
        click.echo(f"{m.name:32s} {m.value: .6g} +- {m.stderr:.3g}")
    if plot_kind:
        try:
            svg = render_plot(_load_result(cfg["output_dir"]), plot_kind)
        except PlotError as exc:
            click.echo(f"plot error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        (cfg["output_dir"] / "plots").mkdir(exist_ok=True)
        (cfg["output_dir"] / "plots" / f"{plot_kind}.svg").write_text(svg)
    click.echo(f"wrote {cfg['output_dir']}")
    if bad:
        click.echo(f"invariant failure: {', '.join(bad)}", err=True)
        sys.exit(EXIT_INVARIANT)


@main.command("list")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable schemas.")
def list_cmd(as_json):
    """List registered experiments and their parameters."""
    if as_json:
        doc = {n: {"operation": e.operation, "default_replicates": e.default_replicates,
                   "params": _canonical(e.schema())} for n, e in sorted(REGISTRY.items())}
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
        return
    for name, exp in sorted(REGISTRY.items()):
        click.echo(f"{name}  ->  {exp.operation}")
        for key, p in exp.params.items():
            d = "required" if p.required else f"default={p.default!r}"
            ch = f" one of {list(p.choices)}" if p.choices else ""
            click.echo(f"    {key}: {p.kind} ({d}){ch}")


@main.command()
@click.argument("result", type=click.Path(path_type=Path))
@click.option("--kind", type=click.Choice(PLOT_KINDS), required=True)
@click.option("-o", "--output", type=click.Path(path_type=Path), default=None,
              help="SVG path (default: <result dir>/plots/<kind>.svg).")
def plot(result, kind, output):
    """Render RESULT (results.json or its directory) as an SVG."""
    try:
        svg = render_plot(_load_result(result), kind)
    except PlotError as exc:
        click.echo(f"plot error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if output is None:
        base = result if result.is_dir() else result.parent
        output = base / "plots" / f"{kind}.svg"
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(svg)
    click.echo(f"wrote {output}")


@main.command()
@click.option("--criteria", "-c", multiple=True, type=click.IntRange(1, 20), help="Subset to run.")
@click.option("--scale", type=float, default=1.0, show_default=True, help="Replicate-count multiplier.")
@click.option("--seed", type=int, default=acceptance.SEED, show_default=True)
@click.option("--json", "json_path", type=click.Path(path_type=Path), default=None,
              help="Also write the results table as JSON.")
def accept(criteria, scale, seed, json_path):
    """Run the acceptance suite and print one PASS/FAIL line per criterion."""
    res = acceptance.run_suite(sorted(set(criteria)) or None, scale, worker_count(), seed, echo=click.echo)
    n_pass = sum(r.passed for r in res)
    click.echo(f"{n_pass}/{len(res)} criteria passed")
    if json_path:
        json_path.write_text(json.dumps([{"criterion": r.number, "title": r.title, "passed": r.passed,
                                          "detail": r.detail, "note": r.note, "seconds": r.seconds}
                                         for r in res], indent=2) + "\n")
    if n_pass < len(res):
        sys.exit(EXIT_INVARIANT)


if __name__ == "__main__":  # pragma: no cover
    main()
