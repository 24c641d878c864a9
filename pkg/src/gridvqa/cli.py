"""Command-line interface: compose, synth, train, eval, bench."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import checkpoint, cost
from .data import RunConfig, Task, generate_synthetic, load_config, load_manifest, parse_config
from .frames import ArrangementOrder, Layout, composite, load_frames, prepare_frames, write_image
from .model import init_weights
from .qa import evaluate, fit, prepare
from .vision import Regime


class _Fail(click.ClickException):
    exit_code = 1

    def show(self, file=None):
        click.echo(f"error: {self.message}", err=True)


def _order(ctx, param, value):
    if value is None:
        return None
    try:
        return ArrangementOrder.parse(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _regime(ctx, param, value):
    if value is None:
        return None
    try:
        return Regime.parse(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _int_list(ctx, param, value):
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None
    if not out or min(out) < 1:
        raise click.BadParameter("frame counts must be positive")
    return out


def _guard(fn, *args, **kwargs):
    """Turn library errors into a one-line message and exit code 1."""
    try:
        return fn(*args, **kwargs)
    except (ValueError, OSError, KeyError) as exc:
        raise _Fail(str(exc).splitlines()[0] if str(exc) else type(exc).__name__) from None


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Grid-composite VideoQA toolkit."""


@main.command()
@click.option("--frames", "frames_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--order", default=str(ArrangementOrder(Layout.MATRIX_HORIZONTAL_DESCENT)), callback=_order,
              show_default=True)
@click.option("--resolution", default=224, type=click.IntRange(min=1), show_default=True)
@click.option("--count", type=click.IntRange(min=1), help="Sample this many frames (default: all).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def compose(frames_dir, order, resolution, count, out):
    """Tile the frames of a directory into one grid image."""

    def run():
        seq = load_frames(frames_dir)
        picked = prepare_frames(seq, count or len(seq), order)
        image = composite(picked, order, resolution)
        write_image(out, image.pixels)
        return image

    image = _guard(run)
    click.echo(f"wrote {out} ({resolution}x{resolution}, grid {image.layout_used.tolist()})")


@main.command()
@click.option("--task", required=True, type=click.Choice([t.value for t in Task]))
@click.option("--count", required=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--frames-per-video", default=9, show_default=True, type=click.IntRange(min=1))
@click.option("--frame-size", default=32, show_default=True, type=click.IntRange(min=2))
def synth(task, count, seed, out, frames_per_video, frame_size):
    """Generate a synthetic VideoQA dataset with a manifest."""
    examples = _guard(generate_synthetic, task, count, out, frames_per_video, seed, frame_size)
    click.echo(f"wrote {len(examples)} examples to {Path(out) / 'manifest.jsonl'}")


def _prepared(examples, cfg: RunConfig, order: ArrangementOrder, regime: Regime):
    return [prepare(ex, regime, order, cfg.frames, cfg.encoder.resolution) for ex in examples]


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--quiet", is_flag=True, help="Do not print per-epoch losses.")
def train(manifest, config_path, out, quiet):
    """Train from scratch and write a checkpoint."""
    cfg = _guard(load_config, config_path)
    examples = _guard(load_manifest, manifest)
    if not examples:
        raise _Fail(f"{manifest}: no examples")
    items = _guard(_prepared, examples, cfg, cfg.order, cfg.regime)
    weights = init_weights(cfg.encoder, cfg.seed)
    log = None if quiet else (lambda e, loss: click.echo(f"epoch {e + 1:3d}  loss {loss:.4f}"))
    history = fit(items, weights, cfg.regime, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed,
                  cfg.weight_decay, cfg.max_grad_norm, cfg.adam_eps, log)
    checkpoint.save(out, weights, cfg.to_pairs())
    final = f", final loss {history[-1]:.4f}" if history else ""
    click.echo(f"wrote {out} ({weights.num_parameters()} parameters{final})")


def _run_config(run: dict) -> RunConfig:
    keys = ("order", "regime", "frames", "epochs", "lr", "batch_size", "seed")
    return parse_config("\n".join(f"{k} = {run[k]}" for k in keys if k in run))


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--order", callback=_order, help="Arrangement order (default: the training order).")
@click.option("--regime", callback=_regime, help="Encoding regime (default: the training regime).")
@click.option("--frames", "frame_count", type=click.IntRange(min=1), help="Frames per video (default: training).")
@click.option("--compare-orders", is_flag=True, help="Also report accuracy under every arrangement order.")
def evaluate_cmd(manifest, ckpt, order, regime, frame_count, compare_orders):
    """Print multiple-choice accuracy of a checkpoint."""
    weights, run = _guard(checkpoint.load, ckpt)
    cfg = _guard(_run_config, run).replace(encoder=weights.config)
    if frame_count:
        cfg = cfg.replace(frames=frame_count)
    order = order or cfg.order
    regime = regime or cfg.regime
    examples = _guard(load_manifest, manifest)
    if not examples:
        raise _Fail(f"{manifest}: no examples")
    frames = _guard(lambda: [ex.load_frames() for ex in examples])

    def score(o: ArrangementOrder) -> float:
        items = [prepare(ex, regime, o, cfg.frames, cfg.encoder.resolution, f) for ex, f in zip(examples, frames)]
        return evaluate(items, weights, regime)

    acc = _guard(score, order)
    click.echo(f"accuracy {acc:.4f} ({len(examples)} examples, regime {regime.value}, order {order})")
    if compare_orders:
        if regime is not Regime.SINGLE_GRID:
            raise _Fail("--compare-orders only applies to the single-grid regime")
        click.echo("arrangement comparison (report only):")
        for layout in Layout:
            o = ArrangementOrder(layout, order.seed if layout is Layout.MATRIX_RANDOM else 0)
            click.echo(f"  {str(o):<28}{_guard(score, o):.4f}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--frames", "frame_counts", default="1,4,9", show_default=True, callback=_int_list)
@click.option("--trials", default=5, show_default=True, type=click.IntRange(min=5))
@click.option("--regimes", default=",".join(r.value for r in Regime), show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Also write the CSV to this file.")
@click.option("--sweep-train", type=click.Path(exists=True, dir_okay=False),
              help="Manifest for a frame-count accuracy sweep (needs --sweep-eval).")
@click.option("--sweep-eval", type=click.Path(exists=True, dir_okay=False))
@click.option("--sweep-out", type=click.Path(dir_okay=False), help="Write the sweep CSV here.")
def bench(config_path, frame_counts, trials, regimes, csv_path, sweep_train, sweep_eval, sweep_out):
    """Measure FLOPs, peak activations and wall clock per regime."""
    if bool(sweep_train) != bool(sweep_eval):
        raise click.UsageError("--sweep-train and --sweep-eval go together")
    cfg = _guard(load_config, config_path)
    chosen = _guard(lambda: [Regime.parse(r) for r in regimes.split(",") if r.strip()])
    reports = _guard(cost.measure_all, cfg.encoder, frame_counts, trials, cfg.seed, tuple(chosen))
    text = cost.cost_csv(reports)
    if csv_path:
        Path(csv_path).write_text(text, encoding="utf-8")
    click.echo(text, nl=False)
    click.echo()
    click.echo(cost.cost_table(reports))
    if sweep_train:

        def pairs(path):
            return [(ex, ex.load_frames()) for ex in load_manifest(path)]

        result = _guard(
            cost.bench_sweep, frame_counts, chosen, _guard(pairs, sweep_train), _guard(pairs, sweep_eval), cfg.encoder,
            cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed, cfg.order, trials,
        )
        sweep_csv = result.to_csv()
        if sweep_out:
            Path(sweep_out).write_text(sweep_csv, encoding="utf-8")
        click.echo()
        click.echo(sweep_csv, nl=False)


def run(argv=None) -> int:
    """Invoke the CLI and return its exit code instead of exiting."""
    try:
        main.main(args=argv, prog_name="gridvqa", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(run())
