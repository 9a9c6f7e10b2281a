"""Command-line entry points for the full workflow."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import CordwarpError
from .pipeline import (
    PipelineConfig,
    rank_stats_csv,
    render_montages,
    run_correction,
    run_evaluation,
    write_phantom_fixture,
)
from .simulate import PhantomSpec


@click.group()
def main():
    """Distortion simulation, correction, and evaluation for spinal-cord EPI."""


def _fail(exc: Exception, code: int = 1):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--dims", nargs=3, type=int, default=(80, 80, 16), show_default=True)
@click.option("--field-peak", default=6.0, show_default=True,
              help="Peak displacement in voxels.")
@click.option("--noise-sigma", default=2.0, show_default=True)
@click.option("--levels", "num_levels", default=5, show_default=True)
def phantom(out_dir, seed, dims, field_peak, noise_sigma, num_levels):
    """Write a synthetic acquisition fixture with ground truth."""
    spec = PhantomSpec(dims=tuple(dims), seed=seed, field_peak_voxels=field_peak,
                       noise_sigma=noise_sigma, num_levels=num_levels)
    try:
        paths = write_phantom_fixture(spec, out_dir)
    except CordwarpError as exc:
        _fail(exc)
    click.echo(f"fixture written to {out_dir} ({len(paths)} files)")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def correct(config_path):
    """Estimate displacement fields and unwarp the series."""
    try:
        cfg = PipelineConfig.from_json(config_path)
        outputs = run_correction(cfg)
    except CordwarpError as exc:
        _fail(exc)
    bad = [m for m, o in outputs.items() if not o.get("converged", True)]
    for method in outputs:
        click.echo(f"{method}: {outputs[method]['series']}")
    if bad:
        click.echo(f"warning: did not converge: {', '.join(bad)}", err=True)
        sys.exit(2)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
def evaluate(config_path):
    """Tensor fits, alignment metrics, similarity, and Tukey comparisons."""
    try:
        cfg = PipelineConfig.from_json(config_path)
        summary = run_evaluation(cfg)
    except CordwarpError as exc:
        _fail(exc)
    click.echo(f"evaluated {len(summary['conditions'])} conditions -> "
               f"{Path(cfg.out_dir) / 'summary.json'}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--case", "case_id", default="phantom", show_default=True)
def montage(config_path, case_id):
    """Render blinded rating panels for one case."""
    try:
        cfg = PipelineConfig.from_json(config_path)
        info = render_montages(cfg, case_id=case_id)
    except CordwarpError as exc:
        _fail(exc)
    click.echo(f"case {info['case']}: {len(info['labels'])} panels in {info['dir']}")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(config_path, port, host):
    """Serve the rating API and UI."""
    import uvicorn

    from .server import create_app

    cfg = PipelineConfig.from_json(config_path)
    rating_dir = Path(cfg.out_dir) / "rating"
    frontend = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    try:
        app = create_app(str(rating_dir),
                         str(frontend) if frontend.is_dir() else None)
    except FileNotFoundError as exc:
        _fail(exc)
    uvicorn.run(app, host=host, port=port)


@main.command("rank-stats")
@click.argument("rankings_csv", type=click.Path(exists=True))
@click.option("--out", "out_csv", default="rank_stats.csv", show_default=True)
def rank_stats(rankings_csv, out_csv):
    """Pairwise logistic summary of collected rankings."""
    try:
        summaries = rank_stats_csv(rankings_csv, out_csv)
    except CordwarpError as exc:
        _fail(exc)
    for s in summaries:
        flag = " (separation fallback)" if s.fallback else ""
        click.echo(f"{s.method1} vs {s.method2}: {s.wins1}-{s.wins2} "
                   f"p={s.p_value:.3g}{flag}")
    click.echo(f"written {out_csv}")


if __name__ == "__main__":
    main()
