"""Command line entry point: generate, train, eval, analyze, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    GeneratorParams,
    atomic_write_text,
    generate_scenes,
    load_dataset,
    load_scene_file,
    predictions_to_dict,
)
from .evaluation import (
    EvalError,
    detections_from_scenes,
    loc_quality_histogram,
    map_report,
    recall_vs_score,
    score_histograms,
)
from .geometry import GeometryError
from .matching import MatchingError
from .model import ModelError, read_checkpoint
from .train import TrainConfig, TrainingError, predict_dataset, train


class CliError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vecmap", description="Vectorized map decoder lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scene dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-sigma", type=float, default=GeneratorParams.noise_sigma)
    g.add_argument("--min-instances", type=int, default=GeneratorParams.min_instances)
    g.add_argument("--max-instances", type=int, default=GeneratorParams.max_instances)
    g.add_argument("--n-points", type=int, default=GeneratorParams.n_points)

    t = sub.add_parser("train", help="train a decoder; writes checkpoint.npz, metrics.csv, run_meta.json")
    t.add_argument("--config", required=True, help="flat JSON of TrainConfig fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="mAP report of a checkpoint or a prediction file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--preds", help="scene JSON with a score per instance")
    e.add_argument("--data", required=True, help="ground-truth scene JSON")
    e.add_argument("--report", required=True, help="output report JSON")
    e.add_argument("--preds-out", help="also write the checkpoint's predictions here")

    a = sub.add_parser("analyze", help="recall-vs-score, TP/FP score and localization histograms as CSV")
    a.add_argument("--preds", required=True)
    a.add_argument("--gts", required=True)
    a.add_argument("--recall-threshold", type=float, default=0.5)
    a.add_argument("--score-cut", type=float, default=0.9)
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--score-grid", type=int, default=21, help="number of evenly spaced score cuts in [0, 1]")
    a.add_argument("--out", default=".", help="output directory")

    c = sub.add_parser("gradcheck", help="run the finite-difference suite")
    c.add_argument("--only", nargs="*", help="restrict to these check names")
    c.add_argument("--seed", type=int, default=0)
    return p


def cmd_generate(args) -> int:
    params = GeneratorParams(
        min_instances=args.min_instances,
        max_instances=args.max_instances,
        n_points=args.n_points,
        noise_sigma=args.noise_sigma,
    )
    if args.scenes < 0:
        raise CliError("--scenes must be non-negative")
    data = generate_scenes(args.seed, args.scenes, params)
    atomic_write_text(args.out, data.to_json())
    print(f"wrote {len(data)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    cfg = TrainConfig.from_json(text)
    data = load_dataset(args.data)
    progress = None if args.quiet else (lambda r: print(f"step {r['step']:>6}  loss {r['total']:.4f}", flush=True))
    result = train(cfg, data, out_dir=args.out, progress=progress)
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s; outputs in {args.out}")
    return 0


def _report_with_predictions(pred_scenes, pred_scores, gt_scenes):
    if len(pred_scenes) != len(gt_scenes):
        raise CliError(f"{len(pred_scenes)} prediction scenes vs {len(gt_scenes)} ground-truth scenes")
    return map_report(detections_from_scenes(pred_scenes, pred_scores), gt_scenes)


def cmd_eval(args) -> int:
    gt = load_dataset(args.data)
    if args.ckpt:
        try:
            model = read_checkpoint(args.ckpt)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot read checkpoint {args.ckpt}: {exc}") from exc
        preds = [p.to_scene() for p in predict_dataset(model, gt)]
        scenes, scores = [s for s, _ in preds], [sc for _, sc in preds]
        source = {"checkpoint": str(args.ckpt)}
    else:
        scenes, scores, _ = load_scene_file(args.preds)
        if scores is None:
            raise CliError(f"{args.preds}: every predicted instance needs a 'score'")
        source = {"predictions": str(args.preds)}
    report = _report_with_predictions(scenes, scores, gt.scenes)
    report.metadata.update(source)
    if args.preds_out:
        atomic_write_text(args.preds_out, json.dumps(predictions_to_dict(scenes, scores)))
    atomic_write_text(args.report, report.to_json())
    print(f"mAP_hard {report.map_hard:.4f}  mAP_easy {report.map_easy:.4f}  -> {args.report}")
    return 0


def cmd_analyze(args) -> int:
    scenes, scores, _ = load_scene_file(args.preds)
    if scores is None:
        raise CliError(f"{args.preds}: every predicted instance needs a 'score'")
    gts, _, _ = load_scene_file(args.gts)
    if len(scenes) != len(gts):
        raise CliError(f"{len(scenes)} prediction scenes vs {len(gts)} ground-truth scenes")
    if args.score_grid < 2:
        raise CliError("--score-grid needs at least 2 cuts")
    dets = detections_from_scenes(scenes, scores)
    curve = recall_vs_score(dets, gts, args.recall_threshold, np.linspace(0.0, 1.0, args.score_grid))
    tp, fp = score_histograms(dets, gts, args.recall_threshold, args.bins)
    loc = loc_quality_histogram(dets, gts, args.score_cut, args.bins)
    out = Path(args.out)
    # everything is computed before the first write
    files = {
        "recall_vs_score.csv": curve.to_csv(),
        "score_hist_tp.csv": tp.to_csv(),
        "score_hist_fp.csv": fp.to_csv(),
        "loc_quality.csv": loc.to_csv(),
        "analysis.json": json.dumps(
            {
                "recall_threshold_m": args.recall_threshold,
                "score_cut": args.score_cut,
                "curve": asdict(curve),
                "tp_hist": tp.to_dict(),
                "fp_hist": fp.to_dict(),
                "loc_quality": loc.to_dict(),
            },
            indent=2,
        ),
    }
    for name, text in files.items():
        atomic_write_text(out / name, text)
    flags = [n for n, h in (("TP", tp), ("FP", fp), ("localization", loc)) if h.empty]
    note = f" (empty: {', '.join(flags)})" if flags else ""
    print(f"wrote {', '.join(files)} to {out}{note}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite

    try:
        results = run_suite(seed=args.seed, names=args.only)
    except KeyError as exc:
        raise CliError(str(exc)) from exc
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}

EXPECTED_ERRORS = (
    CliError,
    DataError,
    EvalError,
    GeometryError,
    MatchingError,
    ModelError,
    TrainingError,
)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        print(f"vecmap {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
