"""Command-line surface: dataset generation, training, evaluation and
trajectory export.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command is
deterministic under an explicit --seed; PINFLOW_THREADS caps BLAS worker
threads when threadpoolctl is available.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

__all__ = ["main", "cmd_gen", "cmd_train", "cmd_eval", "cmd_trajectory"]


def _apply_thread_cap():
    cap = os.environ.get("PINFLOW_THREADS")
    if not cap:
        return None
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=int(cap))
    except Exception:
        return None


def cmd_gen(args) -> int:
    from . import taskgen

    dataset = taskgen.generate(args.family, args.n, args.seed)
    paths = taskgen.write_dataset(dataset, args.out)
    counts = dataset.manifest.counts
    print(f"gen {args.family}: " + " ".join(f"{k}={counts[k]}" for k in ("train", "val", "test")))
    for split in ("train", "val", "test", "manifest"):
        print(f"  {split}: {paths[split]}")
    return 0


def _resolve_val_path(dataset_path: Path) -> Path | None:
    name = dataset_path.name
    if "_train" in name:
        cand = dataset_path.with_name(name.replace("_train", "_val"))
        if cand.exists():
            return cand
    return None


def cmd_train(args) -> int:
    from . import taskgen, trainer

    tasks = taskgen.load_tasks(args.dataset)
    if args.config:
        config = trainer.load_train_config(args.config, seed=args.seed)
    else:
        config = trainer.TrainConfig.preset(args.preset, seed=args.seed)
    if args.feature_mode:
        from dataclasses import replace

        config = replace(config, feature_mode=args.feature_mode)
    if args.epochs is not None:
        from dataclasses import replace

        config = replace(config, epochs=args.epochs)

    val_path = Path(args.val) if args.val else _resolve_val_path(Path(args.dataset))
    val_tasks = taskgen.load_tasks(val_path) if val_path else None

    print(f"train: {len(tasks)} tasks, preset={config.scale_preset}, epochs={config.epochs}, "
          f"N={config.n_particles}, L={config.n_steps}, batch={config.batch_tasks}, "
          f"lr={config.lr} (decay {config.lr_decay}/{config.lr_decay_every}), "
          f"clip={config.clip}, features={config.feature_mode}, seed={config.seed}")
    net, log = trainer.train(
        tasks, config,
        val_dataset=val_tasks,
        log_path=args.log,
        checkpoint_path=args.out,
        resume_from=args.resume,
    )
    import numpy as np

    from . import neuralflow

    neuralflow.save_checkpoint(net, args.out)
    losses = [r.loss for r in log.records]
    print(f"train: done, epochs={net.trained_epochs}, "
          f"loss first={losses[0]:.6g} last={losses[-1]:.6g} min={np.min(losses):.6g}")
    if log.best_val_ed is not None:
        print(f"train: best validation ED {log.best_val_ed:.6g}")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import metrics, neuralflow, reports, taskgen

    tasks = taskgen.load_tasks(args.dataset)
    if args.limit:
        tasks = tasks[: args.limit]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods) - set(reports.METHODS))
    if unknown:
        print(f"error: unknown methods {unknown}", file=sys.stderr)
        return 2
    net = None
    if "pinpf" in methods:
        if not args.checkpoint:
            print("error: --checkpoint is required when evaluating pinpf", file=sys.stderr)
            return 2
        net = neuralflow.load_checkpoint(args.checkpoint)
    mcfg = metrics.MetricConfig(swd_order=args.swd_order, gt_samples=args.gt_samples)
    rows = reports.run_eval(
        tasks, methods, net=net, metric_config=mcfg, seed=args.seed,
        wall_clock=not args.no_wall_clock, dump_dir=args.dump_particles,
    )
    reports.write_report_csv(args.out, rows, mcfg)
    if args.summary:
        reports.write_summary_csv(args.summary, rows)
    failures = [r for r in rows if r.error]
    print(f"eval: {len(rows)} rows ({len(failures)} failed) -> {args.out}")
    for method, ed, swd, wall, n in reports.summarize(rows):
        print(f"  {method:>14}  ED={ed:.4f}  SWD={swd:.4f}  time={wall:.1f} ms  (n={n})")
    return 0


def cmd_trajectory(args) -> int:
    from . import neuralflow, reports, taskgen, transporter
    from .trainer import derive_rng_seed

    tasks = taskgen.load_tasks(args.dataset)
    matches = [t for t in tasks if t.id == args.task_id]
    if not matches:
        print(f"error: task id {args.task_id!r} not found in {args.dataset}", file=sys.stderr)
        return 1
    task = matches[0]
    net = neuralflow.load_checkpoint(args.checkpoint)
    preset = taskgen.inference_preset(task.family)
    n = args.n if args.n else preset.n_particles
    cfg = transporter.TransportConfig(delta_L=preset.delta_L, n_particles=max(n, 2))
    result = transporter.transport(
        task, net, cfg, derive_rng_seed(args.seed, "trajectory", task.id), record_trace=True
    )
    d = result.ensemble.shape[1]
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("particle,lambda," + ",".join(f"x{k}" for k in range(d)) + "\n")
        for step, lam in enumerate(result.schedule):
            snap = result.trace[step]
            for i in range(snap.shape[0]):
                coords = ",".join(repr(float(v)) for v in snap[i])
                fh.write(f"{i},{repr(float(lam))},{coords}\n")
    print(f"trajectory: {result.trace.shape[1]} particles x {len(result.schedule)} stations "
          f"(nfe={result.nfe}) -> {args.out}")
    if args.svg:
        reports.write_scatter_svg(args.svg, result.ensemble, title=f"{task.id} final ensemble")
        print(f"svg: {args.svg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pinflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a benchmark dataset")
    g.add_argument("--family", required=True, choices=("gmm4d", "gmm4d_ood", "tdoa", "gauss1d"))
    g.add_argument("--n", type=int, required=True, help="total task count (split 10/1/1)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the flow network")
    t.add_argument("--dataset", required=True, help="train-split NDJSON file")
    t.add_argument("--val", help="validation-split NDJSON (default: sibling _val file)")
    t.add_argument("--preset", choices=("paper", "desk"), default="desk")
    t.add_argument("--config", help="key = value config file overriding the preset")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, help="override epoch count")
    t.add_argument("--feature-mode", choices=("full", "no_gradients"))
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="NDJSON training log path")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate methods on a test split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--methods", default="pinpf,svgd,annealed_mala,oracle")
    e.add_argument("--checkpoint")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--swd-order", type=int, default=2, choices=(1, 2))
    e.add_argument("--gt-samples", type=int, default=10000)
    e.add_argument("--limit", type=int, help="evaluate only the first K tasks")
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--summary", help="summary CSV path (per-method means)")
    e.add_argument("--dump-particles", help="directory for per-(task,method) ensembles")
    e.add_argument("--no-wall-clock", action="store_true",
                   help="write 0 in timing columns for byte-reproducible output")
    e.set_defaults(func=cmd_eval)

    j = sub.add_parser("trajectory", help="export per-lambda particle traces")
    j.add_argument("--dataset", required=True)
    j.add_argument("--task-id", required=True)
    j.add_argument("--checkpoint", required=True)
    j.add_argument("--seed", type=int, default=0)
    j.add_argument("--n", type=int, help="particle count (default: family preset)")
    j.add_argument("--out", required=True)
    j.add_argument("--svg", help="also write a scatter SVG of the final ensemble")
    j.set_defaults(func=cmd_trajectory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limiter = _apply_thread_cap()
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
