from __future__ import annotations

import functools
import sys
from typing import Any, Callable, List, Optional, Sequence

import click
from loguru import logger

from .config import PipelineConfig, load_config
from .errors import ConfigError, DistGeoError, InvalidArgumentError, InvalidInputError, StageError
from .log import configure_logging
from .pipeline import evaluate_run, minisets_run, reconstruct_run, report_run, synth_run, verify_run

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _exit_code(e: BaseException) -> int:
    if isinstance(e, StageError):
        return EXIT_RUNTIME
    if isinstance(e, (ConfigError, InvalidInputError, InvalidArgumentError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def _guarded(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Maps library errors onto the exit-code contract: 2 for bad config or input, 1 otherwise."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except DistGeoError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(_exit_code(e))
        except OSError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def _config(
    config_path: Optional[str],
    seed: Optional[int],
    overrides: Sequence[str],
    **flags: Any,
) -> PipelineConfig:
    extra: List[str] = list(overrides)
    for key, value in flags.items():
        if value is not None:
            extra.append(f"{key}={value}")
    return load_config(config_path, overrides=extra, seed=seed)


def common_options(fn: Callable[..., Any]) -> Callable[..., Any]:
    fn = click.option("--set", "overrides", help="Override one config key (dotted.key=value); repeatable", metavar="KEY=VALUE", multiple=True)(fn)
    fn = click.option("--threads", help="Worker threads for per-patch prediction", metavar="INT", type=click.IntRange(min=1), default=None)(fn)
    fn = click.option("--seed", help="Seed for every seeded section", metavar="INT", type=int, default=None)(fn)
    fn = click.option("--out", "out_dir", help="Output directory  [default: config output_dir]", metavar="DIR", type=str, default=None)(fn)
    fn = click.option("--config", "config_path", help="JSON config document", metavar="PATH", type=click.Path(dir_okay=False), default=None)(fn)
    return fn


@click.group()
@click.option("--log-level", help="Log level  [default: $DISTGEO_LOG or INFO]", metavar="LEVEL", type=str, default=None)
def main(log_level: Optional[str]) -> None:
    """Distance-first spatial reconstruction: synthesize, reconstruct, evaluate, report."""
    configure_logging(log_level)


@main.command()
@common_options
@_guarded
def synth(config_path, out_dir, seed, threads, overrides) -> None:
    """Write a synthetic slide (coords, expression, domains) and its manifest."""
    cfg = _config(config_path, seed, overrides, threads=threads)
    out = out_dir or cfg.output_dir
    synth_run(cfg, out)
    click.echo(f"synthetic slide written to {out}")


@main.command()
@common_options
@click.option("--input", "input_dir", help="Slide directory with coords.csv and expression.csv", metavar="DIR", type=str, default=None)
@click.option("--patch-size", help="Cells per patch", metavar="INT", type=click.IntRange(min=2), default=None)
@click.option("--weighting", help="Per-patch reliability weighting", type=click.Choice(["weighted", "uniform"]), default=None)
@click.option("--predictor", help="Per-patch geometry predictor", type=click.Choice(["oracle", "analytic"]), default=None)
@_guarded
def reconstruct(config_path, out_dir, seed, threads, overrides, input_dir, patch_size, weighting, predictor) -> None:
    """Reconstruct coordinates from expression through patches, stitching and a global solve."""
    cfg = _config(
        config_path, seed, overrides,
        threads=threads, weighting=weighting, predictor=predictor, **{"patch.n_patch": patch_size},
    )
    source = input_dir or cfg.input_dir
    if source is None:
        raise ConfigError("reconstruct needs --input or input_dir in the config")
    out = out_dir or cfg.output_dir
    recon = reconstruct_run(cfg, source, out)
    d = recon.diagnostics
    click.echo(
        f"{len(recon.cover)} patches, {recon.stitched.graph.n_edges} edges, "
        f"edge stress {d.final_stress:.4g}; written to {out}"
    )


@main.command()
@common_options
@click.option("--input", "input_dir", help="Slide directory with coords.csv and expression.csv", metavar="DIR", type=str, default=None)
@click.option("--count", help="Number of miniset pairs", metavar="INT", type=click.IntRange(min=1), default=None)
@_guarded
def minisets(config_path, out_dir, seed, threads, overrides, input_dir, count) -> None:
    """Draw paired overlapping minisets with canonical Gram targets from a slide."""
    cfg = _config(config_path, seed, overrides, threads=threads)
    source = input_dir or cfg.input_dir
    if source is None:
        raise ConfigError("minisets needs --input or input_dir in the config")
    path = minisets_run(cfg, source, out_dir or cfg.output_dir, count or cfg.minisets.minisets_per_epoch)
    click.echo(f"minisets written to {path}")


@main.command()
@common_options
@click.option("--pred", "pred_path", help="Predicted coordinates CSV", metavar="PATH", type=click.Path(dir_okay=False), required=True)
@click.option("--gt", "gt_path", help="Ground-truth coordinates CSV", metavar="PATH", type=click.Path(dir_okay=False), required=True)
@click.option("--distortion", help="Also write the block distortion map", is_flag=True)
@click.option("--distances", help="--pred holds an id-labeled N x N distance matrix instead of coordinates", is_flag=True)
@_guarded
def evaluate(config_path, out_dir, seed, threads, overrides, pred_path, gt_path, distortion, distances) -> None:
    """Score predicted coordinates (or distances) against ground-truth coordinates."""
    cfg = _config(config_path, seed, overrides, threads=threads)
    out = out_dir or cfg.output_dir
    report, undefined = evaluate_run(cfg, pred_path, gt_path, out, distortion=distortion, distances=distances)
    for name, value in report.model_dump().items():
        if name == "lrmse":
            for k, v in value.items():
                click.echo(f"lrmse@{k}\t{v:.6g}")
        else:
            click.echo(f"{name}\t{value:.6g}")
    if undefined:
        logger.warning("{} metrics undefined", len(undefined))


@main.command()
@click.argument("reports", nargs=-1, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", help="Output directory", metavar="DIR", type=str, default="report", show_default=True)
@_guarded
def report(reports, out_dir) -> None:
    """Tabulate several metrics.json files with best and second-best flags."""
    frame = report_run(list(reports), out_dir)
    click.echo(f"{len(frame)} runs tabulated in {out_dir}")


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@_guarded
def verify(run_dir) -> None:
    """Check every file digest recorded in a run manifest."""
    problems = verify_run(run_dir)
    if problems:
        for name in problems:
            click.echo(f"mismatch: {name}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo("ok")


if __name__ == "__main__":
    main()
