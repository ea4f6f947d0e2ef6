"""Command-line entry point: ``adk <synth|train|infer|eval|bench> --config FILE [--key value ...]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data, imageio, metrics, pipeline, synth
from .config import RunConfig, dump_config, load_config
from .models import ModelBundle
from .numerics import Rng

log = logging.getLogger("adk")

COMMANDS = ("synth", "train", "infer", "eval", "bench")


@contextmanager
def staged_outputs(config: RunConfig, command: str):
    """Collect a command's files in a staging directory; publish on success, drop on failure."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    staging = out / f".staging-{command}"
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    for item in staging.iterdir():
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        item.rename(target)
    staging.rmdir()


def dataset_index(config: RunConfig) -> data.DatasetIndex:
    root = config.data_root()
    if not config.dataset_root and not (root / config.category).is_dir():
        log.info("generating toy dataset under %s", root)
        partial = root / ".partial"
        shutil.rmtree(partial, ignore_errors=True)
        try:
            data.make_toy_dataset(
                partial,
                config.category,
                n_train=config.toy_train,
                n_test=config.toy_test,
                anomaly_fraction=config.toy_anomaly_fraction,
                size=config.image_size,
                seed=config.seed,
                synth_config=config.synth_config(),
            )
            (partial / config.category).rename(root / config.category)
        finally:
            shutil.rmtree(partial, ignore_errors=True)
    return data.ingest(root, config.category)


def load_bundle(checkpoint: str | None, config: RunConfig) -> ModelBundle:
    if checkpoint is None:
        return config.bundle()
    bundle = ModelBundle.load(checkpoint)
    bundle.denoiser.eval()
    bundle.segmenter.eval()
    return bundle


def cmd_synth(config: RunConfig, args, staging: Path) -> None:
    index = dataset_index(config)
    normals = index.load_train(config.image_size, config.channels)
    rng = Rng(config.seed, "synth")
    corpus = config.corpus()
    samples = []
    n_normal = round(config.n_synth * config.normals_per_batch / max(config.batch_size, 1))
    for i in range(config.n_synth):
        sample_rng = rng.child(f"sample-{i}")
        source = normals[sample_rng.integers(0, len(normals))]
        if i < n_normal:
            samples.append(synth.normal_sample(source))
        else:
            samples.append(synth.make_synthetic(source, sample_rng, corpus, config.synth_config()))
    manifest = synth.export_dataset(samples, staging / "synth")
    print(f"wrote {len(samples)} samples; manifest {Path(config.output_dir) / 'synth' / manifest.name}")


def _validation_loss(bundle, normals, sched, config: RunConfig) -> float:
    if not normals:
        return float("nan")
    tc = config.train_config()
    sampler = pipeline.BatchSampler(
        normals, tc, Rng(config.seed, "validation"), config.corpus(), config.synth_config(), bundle.dtype
    )
    batch = sampler.next_batch(np.arange(len(normals)))
    with torch.no_grad():
        noise, mask, _ = pipeline.compute_losses(
            bundle, batch, sched, config.loss_weights(), tc, Rng(config.seed, "validation/noise")
        )
    return float(noise + mask)


def _plot_curve(path: Path, rows: list[tuple]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        steps = [r[0] for r in rows]
        for col, name in ((1, "noise"), (2, "mask"), (3, "total")):
            ax.plot(steps, [r[col] for r in rows], label=name)
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_train(config: RunConfig, args, staging: Path) -> None:
    index = dataset_index(config)
    normals = index.load_train(config.image_size, config.channels)
    n_val = int(len(normals) * config.val_fraction) if len(normals) >= 10 else 0
    train_normals, val_normals = normals[n_val:], normals[:n_val]
    sched = config.schedule()
    bundle = config.bundle()
    tc = config.train_config()
    rows: list[tuple] = []
    best = float("inf")
    steps_per_epoch = pipeline.BatchSampler(train_normals, tc, Rng(0)).steps_per_epoch()

    def on_step(step, comp):
        nonlocal best
        rows.append((step, comp.noise, comp.mask, comp.total))
        last_step = tc.max_steps is not None and step + 1 == tc.max_steps
        if val_normals and ((step + 1) % steps_per_epoch == 0 or last_step):
            val = _validation_loss(bundle, val_normals, sched, config)
            log.info("step %d  train %.4f  validation %.4f", step, comp.total, val)
            if val < best:
                best = val
                bundle.save(staging / "best.ckpt")

    try:
        if config.epochs > 0:
            pipeline.train(
                bundle, train_normals, sched, config.loss_weights(), tc, config.corpus(), config.synth_config(), on_step
            )
    except pipeline.TrainingDiverged as exc:
        dump = Path(config.output_dir) / "divergence.json"
        dump.write_text(json.dumps(exc.state, indent=2))
        raise RuntimeError(f"{exc}; diagnostic state written to {dump}") from exc

    bundle.save(staging / "model.ckpt")
    with open(staging / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "noise", "mask", "total"])
        writer.writerows(rows)
    _plot_curve(staging / "loss_curve.png", rows)
    (staging / "config.yaml").write_text(dump_config(config))
    print(f"trained {len(rows)} steps; checkpoint {Path(config.output_dir) / 'model.ckpt'}")


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.rglob("*.png"))
    if path.is_file():
        return [path]
    raise FileNotFoundError(f"input {path} does not exist")


def cmd_infer(config: RunConfig, args, staging: Path) -> None:
    if args.checkpoint is None:
        raise ValueError("infer needs --checkpoint")
    bundle = load_bundle(args.checkpoint, config)
    sched = config.schedule()
    tc = config.train_config()
    tc.validate(sched)
    out = staging / "infer"
    out.mkdir()
    rows = []
    for path in _inputs(Path(args.input)):
        image = imageio.read_image(path, config.image_size, config.channels)
        result = pipeline.infer(bundle, image, sched, tc, Rng(config.seed, f"infer/{path.name}"))
        imageio.write_heatmap(out / f"{path.stem}_heatmap.png", result.heatmap)
        imageio.write_image(out / f"{path.stem}_recon.png", np.clip(result.reconstruction, -1, 1))
        rows.append((str(path), f"{result.image_score:.6f}"))
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "score"])
        writer.writerows(rows)
    print(f"scored {len(rows)} images into {Path(config.output_dir) / 'infer'}")


def evaluate_index(bundle, index: data.DatasetIndex, config: RunConfig) -> metrics.EvalReport:
    sched = config.schedule()
    tc = config.train_config()
    tc.validate(sched)
    images, masks = index.load_test(config.image_size, config.channels)
    results = []
    for i, image in enumerate(images):
        results.append(pipeline.infer(bundle, image, sched, tc, Rng(config.seed, f"eval/{i}")))
    return metrics.evaluate(results, masks, index.labels, config.fpr_limit, [index.category] * len(images))


def cmd_eval(config: RunConfig, args, staging: Path) -> None:
    if args.checkpoint is None:
        raise ValueError("eval needs --checkpoint")
    bundle = load_bundle(args.checkpoint, config)
    report = evaluate_index(bundle, dataset_index(config), config)
    (staging / "report.json").write_text(report.to_json())
    (staging / "report.txt").write_text(report.to_table() + "\n")
    print(report.to_table())


def cmd_bench(config: RunConfig, args, staging: Path) -> None:
    bundle = load_bundle(args.checkpoint, config)
    index = dataset_index(config)
    images = index.load_train(config.image_size, config.channels)[: config.bench_images]
    tc = config.train_config()
    sched = config.schedule()
    tc.validate(sched)
    rows = pipeline.bench_paradigms(bundle, pipeline.to_tensor(images, bundle.dtype), sched, tc, config.seed)
    (staging / "bench.json").write_text(json.dumps([asdict(r) for r in rows], indent=2))
    lines = [f"{'paradigm':<12} {'forwards/image':>15} {'FPS':>10}"]
    lines += [f"{r.paradigm:<12} {r.forwards_per_image:>15.1f} {r.wall_fps:>10.3f}" for r in rows]
    (staging / "bench.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


def parse_overrides(extra: list[str]) -> dict[str, str]:
    if len(extra) % 2:
        raise ValueError(f"flags must come in --key value pairs, got {extra}")
    overrides = {}
    for key, value in zip(extra[::2], extra[1::2]):
        if not key.startswith("--"):
            raise ValueError(f"expected a --key, got {key!r}")
        overrides[key[2:]] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adk", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--checkpoint", help="model checkpoint (infer, eval, bench)")
    parser.add_argument("--input", help="image file or directory (infer)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, parse_overrides(extra))
        config.validate()
        if args.command == "infer" and not args.input:
            raise ValueError("infer needs --input")
        torch.manual_seed(config.seed)
        start = time.perf_counter()
        with staged_outputs(config, args.command) as staging:
            HANDLERS[args.command](config, args, staging)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 1
        print(f"adk {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
