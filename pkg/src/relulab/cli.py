"""Command-line surface: every experiment as a reproducible command.

All randomness is pinned by explicit seed flags (no implicit entropy), so
any command rerun with the same flags reproduces its scalar outputs
bitwise, regardless of ``--workers``.  Exit codes: 0 success, 2 usage
error, 3 I/O error, 4 numerical divergence (exploding gradients), 1 for a
failed check (gradcheck).
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__, kernels
from .bifurcation import estimate_volume, plane_scan, sweep
from .data import IdxFormatError, SyntheticSpec, load_idx, make_synthetic
from .network import NetworkSpec, load_checkpoint, save_checkpoint
from .precision import Precision
from .reports import (
    trajectory_summary,
    write_plane_csv,
    write_report,
    write_trajectory_csv,
)
from .training import GradientExplosionError, TrainConfig, evaluate, run_paired

EXIT_IO = 3
EXIT_DIVERGENCE = 4


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (IdxFormatError, OSError) as err:
            click.echo(f"I/O error: {err}", err=True)
            sys.exit(EXIT_IO)
        except GradientExplosionError as err:
            click.echo(f"numerical divergence: {err}", err=True)
            sys.exit(EXIT_DIVERGENCE)
    return wrapper


def parse_layers(text: str) -> tuple:
    try:
        sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise click.BadParameter(f"layers must be comma-separated integers, got {text!r}")
    if len(sizes) < 2:
        raise click.BadParameter("need at least two layer sizes")
    return sizes


def parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}")


def parse_synthetic(text: str) -> SyntheticSpec:
    fields = {}
    for part in text.split(","):
        if "=" not in part:
            raise click.BadParameter(f"synthetic spec entries look like k=v, got {part!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        return SyntheticSpec(
            n=int(fields.get("n", 5000)),
            d0=int(fields.get("d0", 784)),
            k=int(fields.get("k", 10)),
            seed=int(fields.get("seed", 0)),
            kind=fields.get("kind", "gaussian-blobs"),
        )
    except (KeyError, ValueError) as err:
        raise click.BadParameter(f"bad synthetic spec: {err}")


def resolve_dataset(images, labels, synthetic, precision, split="train",
                    limit=None):
    if (images is None) != (labels is None):
        raise click.UsageError("--data-images and --data-labels go together")
    if images is not None and synthetic is not None:
        raise click.UsageError("pass either IDX paths or --synthetic, not both")
    if images is not None:
        return load_idx(images, labels, precision=precision, split=split,
                        limit=limit)
    if synthetic is None:
        raise click.UsageError("no dataset: pass --data-images/--data-labels "
                               "or --synthetic")
    return make_synthetic(parse_synthetic(synthetic), precision, split=split)


def out_dir(path_opt) -> Path:
    path = Path(path_opt)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path, command, params, outputs, started):
    manifest = {
        "command": command,
        "parameters": params,
        "outputs": [str(o) for o in outputs],
        "library_version": __version__,
        "wall_clock_seconds": time.time() - started,
    }
    write_report(path, "run_manifest", manifest)


dataset_options = [
    click.option("--data-images", type=click.Path(exists=False), default=None,
                 help="IDX image file (big-endian, magic 2051)."),
    click.option("--data-labels", type=click.Path(exists=False), default=None,
                 help="IDX label file (magic 2049)."),
    click.option("--synthetic", default=None,
                 help="Synthetic dataset, e.g. 'n=5000,d0=784,k=10,seed=0,"
                      "kind=gaussian-blobs'."),
]


def add_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
@click.version_option(__version__)
def main():
    """Precision-emulated ReLU training lab."""
    kernels.warmup()


@main.command("train-pair")
@click.option("--layers", required=True, help="Comma-separated sizes, e.g. 784,2000,128,10.")
@click.option("--precision", type=click.Choice(["b16", "b32", "b64"]), default="b32")
@click.option("--s", "s_values", default="0,1", help="Subderivative values to compare.")
@click.option("--batch", default=128, show_default=True)
@click.option("--gamma-lo", default=0.01, show_default=True)
@click.option("--gamma-hi", default=0.012, show_default=True)
@click.option("--alpha", default=1.0, show_default=True)
@click.option("--epochs", default=1, show_default=True)
@click.option("--optimizer", type=click.Choice(["sgd", "adam"]), default="sgd")
@click.option("--batchnorm", is_flag=True)
@click.option("--dropout", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True,
              help="Master seed for the init/shuffle/gamma/dropout streams.")
@click.option("--max-iterations", type=int, default=None)
@click.option("--stop-after-divergence", type=int, default=None,
              help="Stop this many iterations after every pair has split.")
@click.option("--capture-bifurcation", is_flag=True,
              help="Checkpoint the weights/batch of the first exact-zero event.")
@click.option("--no-sanity", is_flag=True, help="Skip the duplicate reference run.")
@add_options(dataset_options)
@click.option("--out", envvar="RELULAB_OUT", default="relulab-out", show_default=True)
@click.option("--name", default="train_pair", show_default=True)
@handles_errors
def cmd_train_pair(layers, precision, s_values, batch, gamma_lo, gamma_hi,
                   alpha, epochs, optimizer, batchnorm, dropout, seed,
                   max_iterations, stop_after_divergence, capture_bifurcation,
                   no_sanity, data_images, data_labels, synthetic, out, name):
    """Paired lockstep SGD runs differing only in ReLU'(0)."""
    started = time.time()
    p = Precision.from_tag(precision)
    sizes = parse_layers(layers)
    spec = NetworkSpec(sizes, use_batchnorm=batchnorm, dropout_prob=dropout,
                       precision=p)
    dataset = resolve_dataset(data_images, data_labels, synthetic, p)
    if dataset.n_features != sizes[0]:
        raise click.UsageError(
            f"dataset has {dataset.n_features} features but layers start at {sizes[0]}")
    config = TrainConfig(
        s_values=parse_floats(s_values), gamma_interval=(gamma_lo, gamma_hi),
        alpha=alpha, batch_size=batch, epochs=epochs, optimizer=optimizer,
        precision=p, init_seed=seed, shuffle_seed=seed, gamma_seed=seed,
        dropout_seed=seed)

    directory = out_dir(out)
    csv_path = directory / f"{name}.csv"
    summary_path = directory / f"{name}.summary.json"
    manifest_path = directory / f"{name}.manifest.json"
    outputs = [csv_path, summary_path]
    try:
        record = run_paired(config, spec, dataset,
                            include_sanity=not no_sanity,
                            max_iterations=max_iterations,
                            stop_after_divergence=stop_after_divergence,
                            capture_bifurcation=capture_bifurcation)
    except GradientExplosionError as err:
        record = getattr(err, "record", None)
        if record is not None and record.iterations:
            write_trajectory_csv(csv_path, record)
            write_report(summary_path, "trajectory_summary",
                         trajectory_summary(record, csv_path))
        write_manifest(manifest_path, "train-pair", config.to_json(),
                       outputs, started)
        raise

    extra = {}
    if record.bifurcation_point is not None:
        ckpt_path = directory / f"{name}.bifurcation.ckpt"
        bp = record.bifurcation_point
        save_checkpoint(ckpt_path, spec, bp.theta, metadata={
            "iteration": bp.iteration,
            "batch_indices": [int(i) for i in bp.batch_indices],
            "target": [bp.layer, bp.sample, bp.neuron],
        })
        extra["bifurcation_checkpoint"] = str(ckpt_path)
        outputs.append(ckpt_path)
    write_trajectory_csv(csv_path, record)
    write_report(summary_path, "trajectory_summary",
                 trajectory_summary(record, csv_path, extra=extra))
    write_manifest(manifest_path, "train-pair", config.to_json(), outputs, started)
    first = record.first_divergence_iteration
    click.echo(f"iterations: {record.n_iterations}  gamma: {record.gamma:.6g}")
    click.echo(f"first zero: {record.first_zero_iteration}  "
               f"first divergence: {first if first else 'none'}")
    click.echo(f"wrote {csv_path}")


@main.command("volume")
@click.option("--layers", required=True)
@click.option("--precision", type=click.Choice(["b16", "b32", "b64"]), default="b32")
@click.option("--draws", default=100, show_default=True)
@click.option("--batch", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--alpha", "risk", default=0.05, show_default=True,
              help="Hoeffding risk level.")
@click.option("--early-exit", is_flag=True,
              help="Stop each draw at its first hit (weight fraction only).")
@click.option("--workers", default=1, show_default=True)
@click.option("--sweep", "sweep_axis",
              type=click.Choice(["train_size", "width", "depth", "batch_size"]),
              default=None)
@click.option("--grid", default=None, help="Comma-separated sweep values.")
@click.option("--batchnorm", is_flag=True)
@add_options(dataset_options)
@click.option("--out", envvar="RELULAB_OUT", default="relulab-out", show_default=True)
@click.option("--name", default="volume", show_default=True)
@handles_errors
def cmd_volume(layers, precision, draws, batch, seed, risk, early_exit,
               workers, sweep_axis, grid, batchnorm, data_images, data_labels,
               synthetic, out, name):
    """Monte Carlo relative volume of the backprop0 != backprop1 zone."""
    started = time.time()
    if draws < 1:
        raise click.BadParameter("--draws must be at least 1")
    p = Precision.from_tag(precision)
    spec = NetworkSpec(parse_layers(layers), use_batchnorm=batchnorm, precision=p)
    dataset = resolve_dataset(data_images, data_labels, synthetic, p)
    directory = out_dir(out)
    report_path = directory / f"{name}.json"
    manifest_path = directory / f"{name}.manifest.json"
    params = {"layers": spec.layer_sizes, "precision": precision,
              "draws": draws, "batch": batch, "seed": seed, "alpha": risk,
              "early_exit": early_exit, "sweep": sweep_axis, "grid": grid,
              "batchnorm": batchnorm}

    if sweep_axis is not None:
        if grid is None:
            raise click.UsageError("--sweep needs --grid")
        values = [int(v) for v in parse_floats(grid)]
        reports = sweep(sweep_axis, values, spec, dataset, m_draws=draws,
                        batch_size=batch, seed=seed, alpha=risk,
                        early_exit=early_exit, workers=workers)
        write_report(report_path, "bifurcation_sweep",
                     {"axis": sweep_axis, "reports": reports})
        for value, rep in zip(values, reports):
            click.echo(f"{sweep_axis}={value}: weight_hit_fraction="
                       f"{rep.weight_hit_fraction:.3f} +/- {rep.weight_margin:.3f}")
    else:
        report = estimate_volume(spec, dataset, m_draws=draws, batch_size=batch,
                                 seed=seed, alpha=risk, early_exit=early_exit,
                                 workers=workers)
        write_report(report_path, "bifurcation_report", report)
        click.echo(f"weight_hit_fraction={report.weight_hit_fraction:.3f} "
                   f"+/- {report.weight_margin:.3f}")
        if report.pair_hit_fraction is not None:
            click.echo(f"pair_hit_fraction={report.pair_hit_fraction:.6f} "
                       f"quartiles={report.rel_diff_quartiles}")
    write_manifest(manifest_path, "volume", params, [report_path], started)
    click.echo(f"wrote {report_path}")


@main.command("hyperplane")
@click.option("--checkpoint", required=True, type=click.Path(exists=True),
              help="Checkpoint from train-pair --capture-bifurcation.")
@click.option("--radius", default=1e-4, show_default=True)
@click.option("--resolution", default=41, show_default=True)
@click.option("--precision", default=None,
              type=click.Choice(["b16", "b32", "b64"]),
              help="Override the checkpoint's precision for the rescan.")
@click.option("--target", default=None, help="layer,sample,neuron override.")
@click.option("--seed", default=0, show_default=True)
@add_options(dataset_options)
@click.option("--out", envvar="RELULAB_OUT", default="relulab-out", show_default=True)
@click.option("--name", default="hyperplane", show_default=True)
@handles_errors
def cmd_hyperplane(checkpoint, radius, resolution, precision, target, seed,
                   data_images, data_labels, synthetic, out, name):
    """Scan one neuron's |pre-activation| over a random weight 2-plane."""
    started = time.time()
    spec, theta, meta = load_checkpoint(checkpoint)
    p = spec.precision if precision is None else Precision.from_tag(precision)
    if p != spec.precision:
        from dataclasses import replace
        from .network import WeightVector
        spec = replace(spec, precision=p)
        # moving to a wider format is exact; narrowing re-rounds
        theta = WeightVector(theta.values.astype(p.dtype), p)
    dataset = resolve_dataset(data_images, data_labels, synthetic, p)
    indices = meta.get("batch_indices")
    if indices:
        xb = dataset.inputs.data[np.asarray(indices)]
    else:
        xb = dataset.inputs.data[:256]
    if target is not None:
        target = tuple(int(v) for v in target.split(","))
    elif meta.get("target"):
        target = tuple(meta["target"])
    scan = plane_scan(spec, theta, xb, radius=radius, resolution=resolution,
                      target=target, seed=seed)
    directory = out_dir(out)
    json_path = directory / f"{name}.json"
    csv_path = directory / f"{name}.csv"
    write_report(json_path, "plane_scan", scan)
    write_plane_csv(csv_path, scan)
    write_manifest(directory / f"{name}.manifest.json", "hyperplane",
                   {"checkpoint": str(checkpoint), "radius": radius,
                    "resolution": resolution, "precision": p.value,
                    "target": list(scan.target), "seed": seed},
                   [json_path, csv_path], started)
    click.echo(f"zero cells: {int(scan.zero_mask.sum())} of {scan.zero_mask.size}")
    click.echo(f"wrote {json_path}")


@main.command("gradcheck")
@click.option("--layers", default="10,32,16,3", show_default=True)
@click.option("--instances", default=20, show_default=True)
@click.option("--batch", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--tolerance", default=1e-5, show_default=True)
@click.option("--out", envvar="RELULAB_OUT", default="relulab-out", show_default=True)
@click.option("--name", default="gradcheck", show_default=True)
@handles_errors
def cmd_gradcheck(layers, instances, batch, seed, tolerance, out, name):
    """Check backprop against central finite differences at binary64."""
    from .engine import SubgradientPolicy, backprop
    from .network import WeightVector, forward, gradient_vector, init_kaiming_uniform

    started = time.time()
    sizes = parse_layers(layers)
    spec = NetworkSpec(sizes, precision=Precision.B64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        theta = init_kaiming_uniform(spec, seed=seed * 1000 + i)
        x = rng.random((batch, sizes[0]))
        y = rng.integers(0, sizes[-1], batch)
        trace, tape = forward(spec, theta, x, y)
        if trace.total_zero_count:  # not a smooth point; skip this draw
            continue
        g = gradient_vector(spec, tape, backprop(tape, SubgradientPolicy(0.0)).grads)
        base = theta.as_float64()
        ganalytic = g.as_float64()
        for j in range(base.size):
            h = 1e-6 * (1.0 + abs(base[j]))
            up, down = base.copy(), base.copy()
            up[j] += h
            down[j] -= h
            lu, _ = forward(spec, WeightVector(up, Precision.B64), x, y)
            ld, _ = forward(spec, WeightVector(down, Precision.B64), x, y)
            fd = (lu.loss - ld.loss) / (2 * h)
            err = abs(fd - ganalytic[j]) / (1.0 + abs(ganalytic[j]))
            worst = max(worst, err)
    passed = worst <= tolerance
    directory = out_dir(out)
    report_path = directory / f"{name}.json"
    write_report(report_path, "train_eval_report",
                 {"kind": "gradcheck", "max_relative_error": worst,
                  "tolerance": tolerance, "instances": instances,
                  "passed": passed})
    write_manifest(directory / f"{name}.manifest.json", "gradcheck",
                   {"layers": sizes, "instances": instances, "seed": seed,
                    "tolerance": tolerance}, [report_path], started)
    click.echo(f"max relative error: {worst:.3g} (tolerance {tolerance:g})")
    if not passed:
        sys.exit(1)


@main.command("train-eval")
@click.option("--layers", required=True)
@click.option("--precision", type=click.Choice(["b16", "b32", "b64"]), default="b32")
@click.option("--s-grid", default="-1,0,1", show_default=True)
@click.option("--repeats", default=5, show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--batch", default=128, show_default=True)
@click.option("--gamma-lo", default=0.01, show_default=True)
@click.option("--gamma-hi", default=0.012, show_default=True)
@click.option("--optimizer", type=click.Choice(["sgd", "adam"]), default="sgd")
@click.option("--batchnorm", is_flag=True)
@click.option("--dropout", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@add_options(dataset_options)
@click.option("--test-images", type=click.Path(exists=False), default=None)
@click.option("--test-labels", type=click.Path(exists=False), default=None)
@click.option("--test-synthetic", default=None)
@click.option("--out", envvar="RELULAB_OUT", default="relulab-out", show_default=True)
@click.option("--name", default="train_eval", show_default=True)
@handles_errors
def cmd_train_eval(layers, precision, s_grid, repeats, epochs, batch,
                   gamma_lo, gamma_hi, optimizer, batchnorm, dropout, seed,
                   data_images, data_labels, synthetic, test_images,
                   test_labels, test_synthetic, out, name):
    """Accuracy-vs-s sweep: R independent runs per subderivative value."""
    started = time.time()
    p = Precision.from_tag(precision)
    sizes = parse_layers(layers)
    spec = NetworkSpec(sizes, use_batchnorm=batchnorm, dropout_prob=dropout,
                       precision=p)
    train = resolve_dataset(data_images, data_labels, synthetic, p)
    if test_images or test_synthetic:
        test = resolve_dataset(test_images, test_labels, test_synthetic, p,
                               split="test")
    else:
        raise click.UsageError("train-eval needs a test set "
                               "(--test-images/--test-labels or --test-synthetic)")

    results = {}
    loss_streams = {}
    for s in parse_floats(s_grid):
        accuracies = []
        final_losses = []
        for r in range(repeats):
            config = TrainConfig(
                s_values=(s,), gamma_interval=(gamma_lo, gamma_hi),
                batch_size=batch, epochs=epochs, optimizer=optimizer,
                precision=p, init_seed=seed + r, shuffle_seed=seed + r,
                gamma_seed=seed, dropout_seed=seed + r)
            try:
                record = run_paired(config, spec, train, include_sanity=False)
            except GradientExplosionError as err:
                accuracies.append(None)  # unlearnable at this s: no accuracy
                loss_streams[(s, r)] = {"exploded_at": err.iteration}
                continue
            theta = record.final_weights["ref"]
            bn = record.final_bn_states["ref"]
            acc, test_loss = evaluate(spec, theta, test, bn_state=bn)
            accuracies.append(acc)
            final_losses.append(test_loss)
            loss_streams[(s, r)] = [row["losses"]["ref"]
                                    for row in record.iterations]
        ok = [a for a in accuracies if a is not None]
        results[repr(s)] = {
            "accuracies": accuracies,
            "median_accuracy": float(np.median(ok)) if ok else None,
            "mean_test_loss": float(np.mean(final_losses)) if final_losses else None,
            "exploded_runs": sum(1 for a in accuracies if a is None),
        }
        click.echo(f"s={s}: median accuracy "
                   f"{results[repr(s)]['median_accuracy']}")

    directory = out_dir(out)
    report_path = directory / f"{name}.json"
    losses_path = directory / f"{name}.losses.json"
    write_report(report_path, "train_eval_report", {
        "s_grid": list(parse_floats(s_grid)), "repeats": repeats,
        "epochs": epochs, "precision": precision, "optimizer": optimizer,
        "batchnorm": batchnorm, "dropout": dropout, "results": results,
    })
    with open(losses_path, "w") as f:
        json.dump({f"s={s},rep={r}": v for (s, r), v in loss_streams.items()},
                  f, indent=2)
    write_manifest(directory / f"{name}.manifest.json", "train-eval",
                   {"layers": sizes, "s_grid": s_grid, "repeats": repeats,
                    "epochs": epochs, "seed": seed, "precision": precision,
                    "optimizer": optimizer, "batchnorm": batchnorm,
                    "dropout": dropout},
                   [report_path, losses_path], started)
    click.echo(f"wrote {report_path}")


if __name__ == "__main__":
    main()
