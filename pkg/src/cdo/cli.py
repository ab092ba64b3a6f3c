"""Command-line entry points: train, eval, infer, sweep, bench.

A job config is a JSON file with a ``dataset`` section (toy generator or an
MVTec-layout directory) and a ``run`` section mirroring RunConfig. Every
command is deterministic given identical inputs and seed; timestamps appear
only in run-directory names. The dataset root may come from the
``CDO_DATA_ROOT`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import report as report_mod
from .data import (
    DatasetSpec,
    IMAGENET_MEAN,
    IMAGENET_STD,
    Sample,
    denormalize,
    generate_toy_dataset,
    load_mvtec_category,
    split_samples,
)
from .metrics import DEFAULT_FPR_LIMIT, validate_report
from .models import (
    ExpertModel,
    apprentice_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .scoring import AnomalyMap, anomaly_map_batch, write_heatmap_png
from .training import (
    RunConfig,
    evaluate_last_k,
    read_epoch_log_csv,
    score_test_set,
    train,
    write_epoch_log_csv,
    _preprocess_image,
)

DATA_ROOT_ENV = "CDO_DATA_ROOT"

TOY_DATASET_DEFAULTS = {
    "seed": 0,
    "n_train": 16,
    "n_test_normal": 8,
    "n_test_abnormal": 8,
    "resolution": 64,
}


@dataclasses.dataclass
class JobConfig:
    dataset: dict
    run: RunConfig

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "run": self.run.to_dict()}


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def parse_job_config(raw: dict) -> JobConfig:
    _require(isinstance(raw, dict), "config must be a JSON object")
    unknown = set(raw) - {"dataset", "run"}
    _require(not unknown, f"unknown top-level config field(s): {sorted(unknown)}")
    _require("dataset" in raw, "missing 'dataset' section (object)")
    _require("run" in raw, "missing 'run' section (object)")
    ds = raw["dataset"]
    _require(isinstance(ds, dict), "field 'dataset' must be an object")
    kind = ds.get("kind")
    _require(kind in ("toy", "mvtec"), "field 'dataset.kind' must be 'toy' or 'mvtec'")
    if kind == "toy":
        allowed = {"kind", *TOY_DATASET_DEFAULTS}
        unknown = set(ds) - allowed
        _require(not unknown, f"unknown dataset field(s): {sorted(unknown)}")
        for key in TOY_DATASET_DEFAULTS:
            if key in ds:
                _require(
                    isinstance(ds[key], int), f"field 'dataset.{key}' must be int"
                )
    else:
        allowed = {"kind", "root", "category", "resolution"}
        unknown = set(ds) - allowed
        _require(not unknown, f"unknown dataset field(s): {sorted(unknown)}")
        _require(
            isinstance(ds.get("category"), str), "field 'dataset.category' must be str"
        )
    _require(isinstance(raw["run"], dict), "field 'run' must be an object")
    run = RunConfig.from_dict(raw["run"])
    return JobConfig(dataset=dict(ds), run=run)


def load_job_config(path: Path | str) -> JobConfig:
    with open(path) as f:
        raw = json.load(f)
    return parse_job_config(raw)


def build_dataset(ds: dict) -> tuple[list[Sample], list[Sample]]:
    """Returns (train samples, test samples) for a dataset section."""
    if ds["kind"] == "toy":
        opts = {**TOY_DATASET_DEFAULTS, **{k: v for k, v in ds.items() if k != "kind"}}
        samples = generate_toy_dataset(
            seed=opts["seed"],
            n_train=opts["n_train"],
            n_test_normal=opts["n_test_normal"],
            n_test_abnormal=opts["n_test_abnormal"],
            resolution=opts["resolution"],
        )
        return split_samples(samples, "train"), split_samples(samples, "test")
    root = ds.get("root") or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ValueError(
            f"mvtec dataset needs 'root' in the config or ${DATA_ROOT_ENV} set"
        )
    spec = DatasetSpec(
        root=Path(root), category=ds["category"], resolution=ds.get("resolution", 256)
    )
    return (
        load_mvtec_category(spec, "train"),
        load_mvtec_category(spec, "test"),
    )


def _save_image_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _dump_perturbation_pairs(job: JobConfig, run_dir: Path, count: int) -> None:
    from .perturbation import perturb

    out = run_dir / "perturbations"
    out.mkdir(exist_ok=True)
    train_samples, _ = build_dataset(job.dataset)
    rng = np.random.default_rng([job.run.seed, 99])
    spec = DatasetSpec(root=Path("."), category="debug", resolution=job.run.resolution)
    for i, sample in enumerate(train_samples[:count]):
        x = _preprocess_image(
            sample.image, job.run.resolution, IMAGENET_MEAN, IMAGENET_STD
        )
        outcome = perturb(x, job.run.perturbation, rng)
        img = denormalize(outcome.perturbed_image, spec).clamp(0, 1)
        _save_image_png(img.permute(1, 2, 0).numpy(), out / f"{i:03d}_image.png")
        _save_image_png(
            outcome.mask.numpy().astype(np.float32), out / f"{i:03d}_mask.png"
        )


def cmd_train(args: argparse.Namespace) -> Path:
    job = load_job_config(args.config)
    if args.seed is not None:
        job = JobConfig(
            job.dataset, RunConfig.from_dict({**job.run.to_dict(), "seed": args.seed})
        )
    if args.device is not None:
        job = JobConfig(
            job.dataset, RunConfig.from_dict({**job.run.to_dict(), "device": args.device})
        )

    if args.run_dir is not None:
        run_dir = Path(args.run_dir)
    else:
        name = job.dataset.get("category", job.dataset["kind"])
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(args.out) / f"{name}-{job.run.loss_mode.value}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)

    (run_dir / "config.json").write_text(
        json.dumps(job.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    train_samples, _ = build_dataset(job.dataset)
    result = train(
        train_samples,
        job.run,
        log_fn=None
        if args.quiet
        else lambda log: print(
            f"epoch {log.epoch:3d}  mu_n={log.mu_n:.5f}  mu_s={log.mu_s:.5f}  "
            f"loss={log.loss:+.5f}",
            flush=True,
        ),
    )
    write_epoch_log_csv(result.logs, run_dir / "train_log.csv")
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir()
    for epoch, state in result.epoch_states:
        save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.pt", state, job.run.to_dict())
    save_checkpoint(ckpt_dir / "final.pt", result.final_state, job.run.to_dict())
    if args.dump_perturbations:
        _dump_perturbation_pairs(job, run_dir, args.dump_perturbations)
    if not args.quiet:
        print(f"run directory: {run_dir}")
    return run_dir


def _load_run(run_dir: Path) -> tuple[JobConfig, list[tuple[int, dict]], dict]:
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.json under {run_dir}")
    job = parse_job_config(json.loads(cfg_path.read_text()))
    ckpt_dir = run_dir / "checkpoints"
    epoch_states = []
    for path in sorted(ckpt_dir.glob("epoch_*.pt")):
        payload = load_checkpoint(path)
        epoch = int(path.stem.split("_")[1])
        epoch_states.append((epoch, payload["apprentice_state"]))
    final_path = ckpt_dir / "final.pt"
    if not final_path.exists():
        raise FileNotFoundError(f"no final checkpoint under {ckpt_dir}")
    return job, epoch_states, load_checkpoint(final_path)


def cmd_eval(args: argparse.Namespace) -> Path:
    run_dir = Path(args.run_dir)
    job, epoch_states, final_payload = _load_run(run_dir)
    _, test_samples = build_dataset(job.dataset)
    if not epoch_states:
        epoch_states = [(job.run.epochs, final_payload["apprentice_state"])]

    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    metrics = evaluate_last_k(
        epoch_states, test_samples, job.run, k=args.k, fpr_limit=args.fpr_limit
    )
    payload = metrics.to_dict()
    validate_report(payload)
    metrics_path = report_dir / "metrics.json"
    metrics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    # plots + triptychs from the final checkpoint
    expert = ExpertModel(job.run.backbone_id, job.run.hierarchies)
    apprentice = apprentice_from_checkpoint(final_payload)
    scored = score_test_set(
        test_samples, expert, apprentice, job.run.resolution,
        squared=job.run.squared_discrepancy, batch_size=job.run.batch_size,
    )
    pooled_scores, pooled_masks = scored.pooled()
    dd_path = report_mod.plot_dd_histograms(
        pooled_scores[pooled_masks == 0],
        pooled_scores[pooled_masks == 1],
        report_dir / "dd_histogram.png",
    )
    log_path = run_dir / "train_log.csv"
    logs = read_epoch_log_csv(log_path) if log_path.exists() else []
    curves_path = report_mod.plot_epoch_curves(logs, report_dir / "training_curves.png")

    heatmap_dir = report_dir / "heatmaps"
    heatmap_dir.mkdir(exist_ok=True)
    heatmap_paths = []
    for sample, (scores, _mask) in list(zip(test_samples, scored.pairs))[: args.n_heatmaps]:
        amap = AnomalyMap(scores=scores, source_id=sample.id)
        safe = sample.id.replace("/", "_")
        heatmap_paths.append(
            report_mod.save_triptych(
                sample, amap, heatmap_dir / f"{safe}.png", job.run.resolution
            )
        )
    bundle = report_mod.ReportBundle(
        metrics_json=metrics_path,
        dd_plot=dd_path,
        curves_plot=curves_path,
        heatmaps=heatmap_paths,
    )
    bundle.verify()
    if not args.quiet:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return metrics_path


def cmd_infer(args: argparse.Namespace) -> list[Path]:
    run_dir = Path(args.run_dir)
    job, _, final_payload = _load_run(run_dir)
    expert = ExpertModel(job.run.backbone_id, job.run.hierarchies)
    apprentice = apprentice_from_checkpoint(final_payload)
    out_dir = Path(args.out) if args.out else run_dir / "inferred"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for image_path in args.images:
        image_path = Path(image_path)
        with Image.open(image_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        x = _preprocess_image(arr, job.run.resolution, IMAGENET_MEAN, IMAGENET_STD)
        scores = anomaly_map_batch(
            x[None], expert, apprentice, squared=job.run.squared_discrepancy
        )[0].numpy()
        amap = AnomalyMap(scores=scores, source_id=image_path.stem)
        out = out_dir / f"{image_path.stem}_heatmap.png"
        write_heatmap_png(amap, out)
        written.append(out)
        if not args.quiet:
            print(f"{image_path} -> {out} (max score {scores.max():.5f})")
    return written


SWEEP_AXES = ("gamma", "backbone", "resolution")


def cmd_sweep(args: argparse.Namespace) -> Path:
    job = load_job_config(args.config)
    if args.axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("no sweep values given")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        run_dict = job.run.to_dict()
        if args.axis == "gamma":
            run_dict["gamma"] = float(value)
        elif args.axis == "backbone":
            run_dict["backbone_id"] = value
        else:
            run_dict["resolution"] = int(value)
        if args.seed is not None:
            run_dict["seed"] = args.seed
        cfg = RunConfig.from_dict(run_dict)
        train_samples, test_samples = build_dataset(job.dataset)
        result = train(train_samples, cfg)
        metrics = evaluate_last_k(
            result.epoch_states, test_samples, cfg, k=args.k, fpr_limit=args.fpr_limit
        )
        rows.append((value, metrics.auroc.mean, metrics.aupro.mean))
        if not args.quiet:
            print(
                f"{args.axis}={value}: auroc={metrics.auroc.mean:.4f} "
                f"aupro={metrics.aupro.mean:.4f}",
                flush=True,
            )
    csv_path = out_dir / f"sweep_{args.axis}.csv"
    with open(csv_path, "w") as f:
        f.write("value,auroc,aupro\n")
        for value, auroc, aupro_v in rows:
            f.write(f"{value},{auroc!r},{aupro_v!r}\n")
    return csv_path


def cmd_bench(args: argparse.Namespace) -> dict:
    if args.n_images < 1:
        raise ValueError("n_images must be >= 1")
    run_dir = Path(args.run_dir)
    job, _, final_payload = _load_run(run_dir)
    expert = ExpertModel(job.run.backbone_id, job.run.hierarchies)
    apprentice = apprentice_from_checkpoint(final_payload)

    # the benchmark includes data input: images are decoded from PNG on disk
    image_dir = run_dir / "bench_images"
    image_dir.mkdir(exist_ok=True)
    _, test_samples = build_dataset(job.dataset)
    if not test_samples:
        raise ValueError("dataset has no test images to benchmark on")
    paths = []
    for i in range(args.n_images):
        sample = test_samples[i % len(test_samples)]
        path = image_dir / f"{i:04d}.png"
        if not path.exists():
            _save_image_png(sample.image, path)
        paths.append(path)

    t0 = time.perf_counter()
    for path in paths:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        x = _preprocess_image(arr, job.run.resolution, IMAGENET_MEAN, IMAGENET_STD)
        anomaly_map_batch(x[None], expert, apprentice, squared=job.run.squared_discrepancy)
    elapsed = time.perf_counter() - t0

    n_bytes = sum(
        p.numel() * p.element_size()
        for model in (expert, apprentice)
        for p in model.parameters()
        if p.is_floating_point()
    )
    result = {
        "fps": args.n_images / elapsed,
        "model_size_mb": n_bytes / 2**20,
        "n_images": args.n_images,
    }
    (run_dir / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if not args.quiet:
        print(json.dumps(result, indent=2, sort_keys=True))
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdo",
        description="Train, evaluate, and run expert/apprentice anomaly localization.",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train an apprentice from a job config")
    p_train.add_argument("--config", required=True, help="job config JSON")
    p_train.add_argument("--run-dir", default=None, help="exact run directory to create")
    p_train.add_argument("--out", default="runs", help="parent for timestamped run dirs")
    p_train.add_argument("--seed", type=int, default=None, help="override run seed")
    p_train.add_argument("--device", default=None, help="override compute device")
    p_train.add_argument(
        "--dump-perturbations", type=int, default=0, metavar="N",
        help="debug: dump N perturbed image/mask PNG pairs",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate the last-k checkpoints of a run")
    p_eval.add_argument("--run-dir", required=True)
    p_eval.add_argument("--k", type=int, default=5)
    p_eval.add_argument("--fpr-limit", type=float, default=DEFAULT_FPR_LIMIT)
    p_eval.add_argument("--n-heatmaps", type=int, default=4)
    p_eval.set_defaults(func=cmd_eval)

    p_infer = sub.add_parser("infer", help="write heatmaps for image files")
    p_infer.add_argument("--run-dir", required=True)
    p_infer.add_argument("--out", default=None)
    p_infer.add_argument("images", nargs="+")
    p_infer.set_defaults(func=cmd_infer)

    p_sweep = sub.add_parser("sweep", help="train/eval across one config axis")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--out", default="sweeps")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--k", type=int, default=5)
    p_sweep.add_argument("--fpr-limit", type=float, default=DEFAULT_FPR_LIMIT)
    p_sweep.set_defaults(func=cmd_sweep)

    p_bench = sub.add_parser("bench", help="inference throughput and model size")
    p_bench.add_argument("--run-dir", required=True)
    p_bench.add_argument("--n-images", type=int, required=True)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
