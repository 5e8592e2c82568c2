"""Command-line entry point (``adaptseg``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from ..errors import AdaptSegError
from .config import RunConfig, load_config
from .episode import SynthSpec, load_episode, save_episode, synthetic_suite

log = logging.getLogger("adaptseg")


def _config(args) -> RunConfig:
    base = RunConfig.toy() if getattr(args, "toy", False) else RunConfig()
    cfg = load_config(args.config, args.set or (), base)
    if getattr(args, "quick_infer", False):
        cfg = cfg.replace(quick_infer=True)
    if getattr(args, "workers", None):
        cfg = cfg.replace(workers=args.workers)
    return cfg


def cmd_run(args) -> int:
    from .io import save_mask, save_score_map
    from .pipeline import run_episode

    cfg = _config(args)
    ep = load_episode(args.episode)
    results, state = run_episode(ep, cfg, keep_maps=args.out is not None, return_state=True)
    for r in results:
        msg = f"{ep.episode_id} query {r.query_index}: fg {100 * r.pred_fg_ratio:.1f}%  refined={r.refined}"
        if r.counts is not None:
            tp, fp, fn, _ = r.counts
            msg += f"  IoU {tp / max(tp + fp + fn, 1):.4f}"
        print(msg)
    if args.out is None:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        j = r.query_index
        save_mask(r.mask, out / f"mask_{j:02d}.png")
        save_score_map(r.prediction.fused, out / f"fused_{j:02d}.png")
        for l, m in enumerate(r.prediction.per_level):
            save_score_map(m, out / f"level{l:02d}_{j:02d}.png")
    state.stack.save(out / "adapters.npz")
    with (out / "records.jsonl").open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.record()) + "\n")
    (out / "config.txt").write_text(cfg.dump())
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate, load_dataset

    cfg = _config(args)
    if args.dataset:
        episodes = load_dataset(args.dataset, args.shots)
    else:
        spec = SynthSpec(shots=args.shots, queries=args.queries, separation=args.separation)
        episodes = synthetic_suite(args.synthetic, args.seed, spec)
    if args.naive:
        predictor = "naive"
    elif args.random is not None:
        predictor = f"random:{args.random}"
    elif args.oracle:
        predictor = "oracle"
    else:
        predictor = "pipeline"
    report = evaluate(episodes, cfg, predictor)
    for row in report.rows():
        print(f"{row['predictor']:>10}  mIoU {100 * row['miou']:6.2f}  per-episode mIoU "
              f"{100 * row['miou_episode']:6.2f}  FB-IoU {100 * row['fbiou']:6.2f}  "
              f"%FG {row['fg_pct']:6.2f}  episodes {row['episodes']}")
    if args.out:
        rec, summ = report.write(args.out)
        print(f"wrote {rec} and {summ}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(size=args.size, shots=args.shots, queries=args.queries, separation=args.separation)
    out = Path(args.out)
    for ep in synthetic_suite(args.count, args.seed, spec):
        save_episode(ep, out / ep.episode_id)
    print(f"wrote {args.count} episodes to {out}")
    return 0


def cmd_analyze(args) -> int:
    from .analyze import analyze_episode

    cfg = _config(args)
    rep = analyze_episode(load_episode(args.episode), cfg)
    rows = rep.table()
    writer = csv.writer(sys.stdout)
    writer.writerows(_fmt_rows(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(_fmt_rows(rows))
    if args.plot:
        from .plots import plot_embedding_bars

        plot_embedding_bars(rows, args.plot)
    return 0


def _fmt_rows(rows):
    return [[f"{v:.4f}" if isinstance(v, float) else ("" if v is None else v) for v in row] for row in rows]


def cmd_plot(args) -> int:
    from . import plots

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.maps:
        from .io import load_mask, load_score_map

        maps = Path(args.maps)
        fused = sorted(maps.glob("fused_*.png"))
        if not fused:
            raise AdaptSegError(f"{maps}: no fused_*.png maps")
        for path in fused:
            j = re.match(r"fused_(\d+)", path.stem).group(1)
            f = load_score_map(path)
            levels = [load_score_map(p) for p in sorted(maps.glob(f"level*_{j}.png"))]
            plots.plot_histogram(f, out / f"histogram_{j}.png", title=f"query {j}")
            mask_path = maps / f"mask_{j}.png"
            mask = load_mask(mask_path) if mask_path.exists() else f > plots.threshold(f)
            plots.plot_level_grid(levels, f, mask, out / f"levels_{j}.png")
    else:
        from .evaluate import read_records

        records = read_records(args.report)
        ious = [r["tp"] / (r["tp"] + r["fp"] + r["fn"]) for r in records if r["tp"] + r["fp"] + r["fn"]]
        plots.plot_histogram(np.asarray(ious), out / "episode_iou_histogram.png", title="per-episode IoU")
        plots.plot_random_surface(out / "random_surface.png")
    print(f"wrote plots to {out}")
    return 0


def cmd_metrics(args) -> int:
    from .plots import plot_random_surface, random_surface

    if args.csv:
        grid, m, fb = random_surface(args.grid)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true_ratio", "pred_ratio", "miou", "fbiou"])
            for i, r in enumerate(grid):
                for j, p in enumerate(grid):
                    w.writerow([r, p, m[i, j], fb[i, j]])
    plot_random_surface(args.out, args.grid)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptseg", description="Few-shot segmentation with test-time adapters.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--toy", action="store_true", help="start from the toy-backbone preset")

    sp = sub.add_parser("run", help="segment the queries of one episode")
    sp.add_argument("--episode", required=True)
    sp.add_argument("--out")
    sp.add_argument("--quick-infer", action="store_true")
    with_config(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="evaluate a dataset or a synthetic suite")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic episodes instead")
    sp.add_argument("--shots", type=int, default=1)
    pred = sp.add_mutually_exclusive_group()
    pred.add_argument("--naive", action="store_true", help="always-foreground predictor")
    pred.add_argument("--random", type=float, metavar="P", help="Bernoulli(P) predictor")
    pred.add_argument("--oracle", action="store_true", help="ground-truth predictor")
    sp.add_argument("--queries", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--separation", type=float, default=1.0)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out")
    with_config(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="write synthetic episodes to disk")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--separation", type=float, default=1.0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--shots", type=int, default=1)
    sp.add_argument("--queries", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("analyze", help="embedding similarity table before/after fitting")
    sp.add_argument("--episode", required=True)
    sp.add_argument("--out", help="also write the table as CSV")
    sp.add_argument("--plot", help="bar chart PNG")
    with_config(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("plot", help="figures from a report or saved maps")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--report", help="records.jsonl from eval")
    src.add_argument("--maps", help="output directory of run")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("metrics", help="random-predictor analysis")
    msub = sp.add_subparsers(dest="metrics_command", required=True)
    ss = msub.add_parser("surface", help="expected mIoU / FB-IoU surface")
    ss.add_argument("--out", required=True)
    ss.add_argument("--grid", type=int, default=50)
    ss.add_argument("--csv")
    ss.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AdaptSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
