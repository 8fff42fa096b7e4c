"""Command-line entry points."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from . import evaluation, strokes, training, vaskegan
from .config import PROFILES, skegan_config, vaskegan_config
from .errors import SkeganError, TrainingDivergedError


def _resolve(path: str | None) -> str | None:
    """Resolve relative paths under SKEGAN_DATA_DIR when it is set."""
    data_dir = os.environ.get("SKEGAN_DATA_DIR")
    if path is None or not data_dir or os.path.isabs(path):
        return path
    return os.path.join(data_dir, path)


def _load_dataset(path: str, normalize: bool = True) -> strokes.SketchDataset:
    with open(_resolve(path), "r", encoding="utf-8") as f:
        dataset = strokes.parse_stroke3_lines(f)
    if dataset.skipped_count:
        print(f"skipped {dataset.skipped_count} malformed line(s)", file=sys.stderr)
    return strokes.normalize_offsets(dataset) if normalize else dataset


def _metrics_logger(path: str | None) -> training.MetricsLogger:
    if path is None:
        return training.MetricsLogger()
    return training.MetricsLogger(stream=open(path, "a", encoding="utf-8"))


def _maybe_single_thread(args) -> None:
    if not getattr(args, "parallel", False):
        torch.set_num_threads(1)


def cmd_ingest(args) -> int:
    raw = _load_dataset(args.dataset, normalize=False)
    normalized = strokes.normalize_offsets(raw)
    report = evaluation.dataset_ske_score(raw)
    print(
        f"sketches={len(raw)} skipped={raw.skipped_count} n_max={raw.n_max} "
        f"offset_scale={normalized.offset_scale:.6g}"
    )
    print(f"ske-score: {report}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            strokes.write_stroke3_lines(normalized, f)
        print(f"wrote normalized dataset to {args.out}")
    if args.meta:
        with open(args.meta, "w", encoding="utf-8") as f:
            json.dump(
                {
                    "n_max": raw.n_max,
                    "offset_scale": normalized.offset_scale,
                    "count": len(raw),
                    "skipped": raw.skipped_count,
                },
                f,
                indent=2,
            )
        print(f"wrote metadata to {args.meta}")
    return 0


def _init_skegan_state(args) -> training.SkeganTrainState:
    cfg = skegan_config(args.profile)
    if args.g_iters is not None:
        cfg.pretrain_g_iters = args.g_iters
    if args.d_iters is not None:
        cfg.pretrain_d_iters = args.d_iters
    if getattr(args, "rounds", None) is not None:
        cfg.rounds = args.rounds
    dataset = _load_dataset(args.dataset)
    state = training.init_skegan(
        dataset, cfg, seed=args.seed, metrics=_metrics_logger(args.metrics)
    )
    if getattr(args, "init", None):
        init_ckpt = ckpt_io.load_checkpoint(args.init)
        state = training.load_skegan_state(
            init_ckpt, dataset=dataset, metrics=_metrics_logger(args.metrics)
        )
    return state


def cmd_pretrain(args) -> int:
    _maybe_single_thread(args)
    state = _init_skegan_state(args)
    try:
        training.pretrain_generator(state)
        ckpt = training.pretrain_discriminator(state)
    except TrainingDivergedError as e:
        ckpt_io.save_checkpoint(e.checkpoint, args.out)
        print(f"training diverged: {e}; last finite checkpoint at {args.out}", file=sys.stderr)
        return 1
    ckpt_io.save_checkpoint(ckpt, args.out)
    print(f"pre-trained checkpoint written to {args.out}")
    return 0


def cmd_train_skegan(args) -> int:
    _maybe_single_thread(args)
    state = _init_skegan_state(args)
    try:
        if not args.skip_pretrain:
            training.pretrain_generator(state)
            training.pretrain_discriminator(state)
        for _ in range(state.cfg.rounds):
            training.train_round(state)
            if args.checkpoint_every_round:
                ckpt_io.save_checkpoint(training.skegan_checkpoint(state), args.out)
    except TrainingDivergedError as e:
        ckpt_io.save_checkpoint(e.checkpoint, args.out)
        print(f"training diverged: {e}; last finite checkpoint at {args.out}", file=sys.stderr)
        return 1
    ckpt_io.save_checkpoint(training.skegan_checkpoint(state), args.out)
    print(f"trained checkpoint written to {args.out}")
    return 0


def cmd_train_vaskegan(args) -> int:
    _maybe_single_thread(args)
    cfg = vaskegan_config(args.profile)
    cfg.disc_kind = args.disc_kind
    if args.iters is not None:
        cfg.total_iters = args.iters
    dataset = _load_dataset(args.dataset)
    state = vaskegan.init_vaskegan(
        dataset, cfg, seed=args.seed, metrics=_metrics_logger(args.metrics)
    )
    if args.init:
        state = vaskegan.load_vaskegan_state(
            ckpt_io.load_checkpoint(args.init),
            dataset=dataset,
            metrics=_metrics_logger(args.metrics),
        )
        state.cfg.total_iters = cfg.total_iters
    try:
        ckpt = vaskegan.train_vaskegan(state)
    except TrainingDivergedError as e:
        ckpt_io.save_checkpoint(e.checkpoint, args.out)
        print(f"training diverged: {e}; last finite checkpoint at {args.out}", file=sys.stderr)
        return 1
    ckpt_io.save_checkpoint(ckpt, args.out)
    print(f"trained checkpoint written to {args.out}")
    return 0


def _load_sampler(path: str):
    ckpt = ckpt_io.load_checkpoint(path)
    kind = ckpt.config["kind"]
    if kind == "skegan":
        state = training.load_skegan_state(ckpt)
        return evaluation.skegan_sampler(state.generator, state.n_max), state
    state = vaskegan.load_vaskegan_state(ckpt)
    return evaluation.vaskegan_sampler(state), state


def cmd_sample(args) -> int:
    sampler, _ = _load_sampler(args.model)
    rng = torch.Generator().manual_seed(args.seed)
    sketches = sampler(args.count, args.tau, rng)
    svg = evaluation.render_grid_svg([sketches])
    Path(args.out).write_text(svg, encoding="utf-8")
    report = evaluation.score_sketches(sketches)
    print(f"wrote {args.count} samples at tau={args.tau} to {args.out}")
    print(f"ske-score: {report}")
    return 0


def cmd_complete(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.model)
    if ckpt.config["kind"] != "skegan":
        print("completion needs a skegan checkpoint", file=sys.stderr)
        return 1
    state = training.load_skegan_state(ckpt)
    with open(args.input, "r", encoding="utf-8") as f:
        dataset = strokes.parse_stroke3_lines(f)
    sketch = dataset.sketches[args.index]
    prefix = strokes.Sketch(points=sketch.real_points(), label=sketch.label)
    scale = state.offset_scale or 1.0
    scaled = strokes.Sketch(
        points=tuple(
            strokes.StrokePoint5(pt.dx / scale, pt.dy / scale, pt.q1, pt.q2, pt.q3)
            for pt in prefix.points
        ),
        label=prefix.label,
    )
    from .generator import complete as complete_op

    rng = torch.Generator().manual_seed(args.seed)
    completed = complete_op(state.generator, scaled, args.tau, state.n_max, rng)
    Path(args.out).write_text(strokes.render_svg(completed), encoding="utf-8")
    print(
        f"completed {len(prefix.points)} -> {len(completed.real_points())} points "
        f"(ske-score {strokes.ske_score(completed):.3f}); svg at {args.out}"
    )
    return 0


def cmd_score(args) -> int:
    rows = {}
    if args.dataset:
        rows["dataset"] = evaluation.dataset_ske_score(_load_dataset(args.dataset, normalize=False))
    if args.model:
        sampler, _ = _load_sampler(args.model)
        rng = torch.Generator().manual_seed(args.seed)
        rows["model"] = evaluation.model_ske_score(sampler, args.count, args.tau, rng)
    if not rows:
        print("nothing to score: pass --dataset and/or --model", file=sys.stderr)
        return 1
    print(evaluation.format_report_table(rows))
    if len(rows) == 2:
        ok = evaluation.goodness(rows["dataset"], rows["model"], args.epsilon)
        print(f"goodness(epsilon={args.epsilon}): {'yes' if ok else 'no'}")
    return 0


def cmd_sweep(args) -> int:
    sampler, _ = _load_sampler(args.model)
    taus = [float(t) for t in args.taus.split(",")]
    rng = torch.Generator().manual_seed(args.seed)
    svg, reports = evaluation.temperature_sweep(sampler, taus, args.count, rng)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(evaluation.format_report_table({f"tau={t:g}": r for t, r in reports.items()}))
    print(f"grid written to {args.out}")
    return 0


def cmd_render(args) -> int:
    with open(args.dataset, "r", encoding="utf-8") as f:
        dataset = strokes.parse_stroke3_lines(f)
    sketch = dataset.sketches[args.index]
    Path(args.out).write_text(
        strokes.render_svg(sketch, args.stroke_width, args.canvas), encoding="utf-8"
    )
    print(f"rendered sketch {args.index} ({sketch.label!r}) to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .serve import build_registry, create_app

    registry = build_registry(args.models)
    app = create_app(registry, seed=args.seed, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skegan", description="stroke-format sketch generation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_train(p):
        p.add_argument("--dataset", required=True, help="line-delimited stroke-3 records")
        p.add_argument("--out", required=True, help="checkpoint output path")
        p.add_argument("--profile", choices=PROFILES, default="toy")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--metrics", default=None, help="append metrics records to this file")
        p.add_argument("--parallel", action="store_true", help="allow multi-threaded kernels")

    p = sub.add_parser("ingest", help="validate, normalize, and report a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="write the normalized dataset here")
    p.add_argument("--meta", default=None, help="write n_max/offset_scale metadata here")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("pretrain", help="likelihood pre-training of generator + discriminator")
    add_common_train(p)
    p.add_argument("--g-iters", type=int, default=None)
    p.add_argument("--d-iters", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain, init=None)

    p = sub.add_parser("train-skegan", help="two-stage adversarial training")
    add_common_train(p)
    p.add_argument("--g-iters", type=int, default=None, help="override pretrain G iterations")
    p.add_argument("--d-iters", type=int, default=None, help="override pretrain D iterations")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--init", default=None, help="start from this checkpoint")
    p.add_argument("--skip-pretrain", action="store_true")
    p.add_argument("--checkpoint-every-round", action="store_true")
    p.set_defaults(fn=cmd_train_skegan)

    p = sub.add_parser("train-vaskegan", help="VAE-GAN training")
    add_common_train(p)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--disc-kind", choices=("gru", "lstm"), default="gru")
    p.add_argument("--init", default=None, help="initialize from this checkpoint (transfer)")
    p.set_defaults(fn=cmd_train_vaskegan)

    p = sub.add_parser("sample", help="unconditional samples to an SVG grid")
    p.add_argument("--model", required=True)
    p.add_argument("--tau", type=float, default=0.4)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("complete", help="complete a partial sketch")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="stroke-3 records; the prefix to complete")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("score", help="Ske-score reports for a dataset and/or model")
    p.add_argument("--dataset", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("sweep", help="temperature sweep grid + per-tau reports")
    p.add_argument("--model", required=True)
    p.add_argument("--taus", default="0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("render", help="render one dataset sketch to SVG")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--stroke-width", type=float, default=2.0)
    p.add_argument("--canvas", type=float, default=256.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("serve", help="HTTP sampling/completion service")
    p.add_argument("--models", nargs="+", required=True, metavar="NAME=CKPT")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--seed", type=int, default=None, help="deterministic request mode")
    p.add_argument(
        "--static",
        default=os.environ.get("SKEGAN_STATIC"),
        help="serve this directory (the sketchpad UI build) at /",
    )
    p.set_defaults(fn=cmd_serve)
    return parser


_PATH_ARGS = ("dataset", "out", "meta", "model", "input", "metrics", "init", "static")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in _PATH_ARGS:
        if getattr(args, name, None) is not None:
            setattr(args, name, _resolve(getattr(args, name)))
    try:
        return args.fn(args)
    except (SkeganError, FileNotFoundError, IndexError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
