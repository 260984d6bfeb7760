"""Command line entry point: ``driftselect {generate,run,plot,flops,validate}``."""

from __future__ import annotations

import json
import logging
import os
import platform
import sys
from pathlib import Path

import click
import numpy as np
import pydantic
import yaml

from . import __version__, kernels
from .config import ExperimentConfig, load_config
from .flops import CostModel, flops_table, forward_cost
from .protocol import (IntervalReport, ProtocolError, annotate, read_reports, run_protocol,
                       summary_table)
from .stream import ConfigError, EventStream, generate_stream

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("driftselect")


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load(config, overrides) -> ExperimentConfig:
    try:
        return load_config(config, list(overrides))
    except pydantic.ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        _fail(EXIT_CONFIG, "invalid configuration\n" + "\n".join(lines))
    except (yaml.YAMLError, ValueError, OSError) as exc:
        _fail(EXIT_CONFIG, f"cannot load configuration: {exc}")


def _out_dir(cfg: ExperimentConfig, out: str | None) -> Path:
    if out:
        return Path(out)
    root = os.environ.get("DRIFTSELECT_OUT")
    return Path(root) / Path(cfg.output_dir).name if root else Path(cfg.output_dir)


config_opt = click.option("--config", "-c", type=click.Path(dir_okay=False), default=None,
                          help="YAML config (default: bundled desk-scale config).")
set_opt = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                       help="Override a config scalar, e.g. --set train.epochs=3.")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Drift-aware data selection experiments."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_opt
@set_opt
def validate(config, overrides):
    """Check a configuration file and print its digest."""
    cfg = _load(config, overrides)
    click.echo(f"ok {cfg.digest()[:16]} arms={len(cfg.arms)} seeds={len(cfg.seeds)}")


@main.command()
@config_opt
@set_opt
@click.option("--seed", type=int, default=None, help="Seed offset (default: first configured seed).")
@click.option("--out", "-o", type=click.Path(dir_okay=False), required=True)
def generate(config, overrides, seed, out):
    """Write the synthetic event stream as CSV lines."""
    cfg = _load(config, overrides)
    seed = cfg.seeds[0] if seed is None else seed
    try:
        stream = generate_stream(cfg.world.build(seed), cfg.world.start, cfg.world.end)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    stream.write(out)
    click.echo(f"{len(stream)} events, {len(np.unique(stream.user_id))} users, "
               f"{int(stream.item_id.max()) + 1 if len(stream) else 0} items -> {out}")


def _plan(cfg: ExperimentConfig) -> list[tuple[int, str, int]]:
    return [(s, a.name, t) for s in cfg.seeds for a in cfg.arms
            for t in range(cfg.protocol.horizon_intervals + 1)]


def _manifest(cfg: ExperimentConfig) -> dict:
    return {
        "config_digest": cfg.digest(),
        "config": cfg.model_dump(mode="json"),
        "seeds": cfg.seeds,
        "version": __version__,
        "backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@main.command()
@config_opt
@set_opt
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: config output_dir, under $DRIFTSELECT_OUT if set).")
@click.option("--resume", is_flag=True, help="Continue from persisted reports and checkpoints.")
@click.option("--dry-run", is_flag=True, help="Print the arm/interval plan and exit.")
@click.option("--stop-after", type=int, default=None, help="Stop after writing this many new reports.")
@click.option("--stream", "stream_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Use an existing event file instead of generating one (single seed only).")
def run(config, overrides, out, resume, dry_run, stop_after, stream_path):
    """Run the full protocol for every seed and arm."""
    cfg = _load(config, overrides)
    plan = _plan(cfg)
    if dry_run:
        for s, a, t in plan:
            click.echo(f"seed={s} arm={a} t={t}")
        click.echo(f"{len(plan)} reports planned")
        return
    out_dir = _out_dir(cfg, out)
    report_path, timing_path = out_dir / "reports.jsonl", out_dir / "timings.jsonl"
    if report_path.exists() and not resume:
        _fail(EXIT_CONFIG, f"{report_path} exists; pass --resume or choose another --out")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg)
    mpath = out_dir / "manifest.json"
    if resume and mpath.exists():
        old = json.loads(mpath.read_text(encoding="utf-8"))
        if old.get("config_digest") != manifest["config_digest"]:
            _fail(EXIT_CONFIG, "config differs from the run being resumed")
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    existing = read_reports(report_path) if resume else []
    done = {(r.seed, r.arm, r.t) for r in existing}
    written = [0]

    class _Stop(Exception):
        pass

    registry: list[IntervalReport] = list(existing)

    def emit(r: IntervalReport):
        registry.append(r)
        annotate([x for x in registry if x.seed == r.seed and x.t == r.t])
        with open(report_path, "a", encoding="utf-8") as fh:
            fh.write(r.line())
        with open(timing_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"seed": r.seed, "arm": r.arm, "t": r.t, "wall_time": r.wall_time}) + "\n")
        written[0] += 1
        click.echo(f"seed={r.seed} arm={r.arm} t={r.t} ndcg@50={r.metrics['ndcg@50']:.4f}")
        if stop_after is not None and written[0] >= stop_after:
            raise _Stop

    pcfg, hyper = cfg.protocol_config(), cfg.model.build()
    try:
        for s in cfg.seeds:
            if stream_path:
                if len(cfg.seeds) > 1:
                    _fail(EXIT_CONFIG, "--stream works with a single seed")
                stream = EventStream.read(stream_path)
            else:
                stream = generate_stream(cfg.world.build(s), cfg.world.start, cfg.world.end)
            run_protocol(pcfg, stream, hyper, seed=s, out_dir=out_dir, done=done, emit=emit)
    except _Stop:
        click.echo(f"stopped after {written[0]} reports")
        return
    except (ConfigError, ProtocolError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except FloatingPointError as exc:
        _fail(EXIT_NUMERIC, str(exc))
    except (ValueError, IndexError, OSError) as exc:
        _fail(EXIT_DATA, str(exc))
    reports = read_reports(report_path)
    summary = summary_table(reports)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for arm, row in summary.items():
        fmt = lambda v, f: "n/a" if v is None else format(v, f)
        click.echo(f"{arm:24s} ndcg@50={fmt(row['mean_ndcg@50'], '.4f')} "
                   f"error_reduction={fmt(row['error_reduction'], '.3f')}")


@main.command()
@click.argument("reports_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "-o", type=click.Path(file_okay=False), default=None)
def plot(reports_dir, out):
    """Render SVG figures from REPORTS_DIR/reports.jsonl."""
    from .plotting import plot_all

    reports = read_reports(Path(reports_dir) / "reports.jsonl")
    if not reports:
        _fail(EXIT_DATA, f"no reports in {reports_dir}")
    paths, notices = plot_all(reports, out or Path(reports_dir) / "figures")
    for n in notices:
        click.echo(f"notice: {n}")
    for p in paths:
        click.echo(str(p))


@main.command()
@config_opt
@set_opt
@click.option("-n", type=int, default=1000, help="Candidate pool size.")
@click.option("-r", type=int, default=100, help="Reference set size.")
@click.option("-k", type=int, default=None, help="Selected samples (default 20%% of n).")
@click.option("--f-fwd", type=float, default=None, help="Forward FLOPs per sequence (default: from model).")
def flops(config, overrides, n, r, k, f_fwd):
    """Print the analytic selection / training cost table as CSV."""
    cfg = _load(config, overrides)
    h = cfg.model.build()
    if f_fwd is None:
        f_fwd = forward_cost(h.d, h.depth, h.max_len, cfg.train.negative_samples, h.num_actions)
    k = int(0.2 * n) if k is None else k
    rows = flops_table(n, r, k, {"f_fwd": f_fwd, "d_rep": h.d, "d_grad": 4 * h.d, "epochs": cfg.train.epochs})
    cols = ["method", "n", "r", "select_flops", "train_flops", "total", "ratio_to_repsim"]
    click.echo(",".join(cols))
    for row in rows:
        click.echo(",".join(str(row[c]) if isinstance(row[c], (int, str)) else f"{row[c]:.6g}" for c in cols))
    full = CostModel(f_fwd, n, r, h.d, 4 * h.d, epochs=cfg.train.epochs)
    click.echo(f"# full retraining on n={n}: {full.epochs * n * (full.f_fwd + full.f_bwd):.6g}")


if __name__ == "__main__":
    main()
