"""Suite evaluation: predictors, accumulation and report files."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, IngestionError
from ..metrics import IoUAccumulator, confusion, fbiou, miou, miou_per_episode
from .config import RunConfig
from .episode import Episode, load_episode
from .pipeline import episode_seed, run_episode

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("predictor", "miou", "miou_episode", "fbiou", "fg_pct", "episodes", "queries")


def parse_predictor(name: str) -> tuple[str, float | None]:
    """``pipeline``, ``naive``, ``oracle`` or ``random:P``."""
    if name in ("pipeline", "naive", "oracle"):
        return name, None
    kind, _, p = name.partition(":")
    if kind == "random":
        try:
            prob = float(p)
        except ValueError:
            raise ConfigurationError(f"bad random predictor {name!r}") from None
        if not 0.0 <= prob <= 1.0:
            raise ConfigurationError(f"random predictor probability {prob} outside [0, 1]")
        return kind, prob
    raise ConfigurationError(f"unknown predictor {name!r}")


def _baseline_records(ep: Episode, kind: str, prob: float | None, cfg: RunConfig) -> list[dict]:
    rng = np.random.default_rng(episode_seed(ep, cfg))
    out = []
    for j in range(len(ep.queries)):
        gt = ep.query_mask(j)
        if kind == "naive":
            pred = np.ones_like(gt)
        elif kind == "oracle":
            pred = gt.copy()
        else:
            pred = rng.random(gt.shape) < prob
        rec = {"episode_id": ep.episode_id, "class_id": ep.class_id, "query": j,
               "pred_fg_ratio": float(pred.mean())}
        rec.update(zip(("tp", "fp", "fn", "tn"), confusion(pred, gt)))
        out.append(rec)
    return out


def episode_records(ep: Episode, cfg: RunConfig, predictor: str = "pipeline") -> list[dict]:
    kind, prob = parse_predictor(predictor)
    if kind != "pipeline":
        return _baseline_records(ep, kind, prob, cfg)
    for j in range(len(ep.queries)):
        ep.query_mask(j)
    results = run_episode(ep, cfg)
    recs = []
    for r in results:
        rec = r.record()
        rec["loss_first"] = r.loss_trace[0] if r.loss_trace else None
        rec["loss_last"] = r.loss_trace[-1] if r.loss_trace else None
        recs.append(rec)
    return recs


@dataclass
class EvalReport:
    predictor: str
    records: list[dict]
    num_classes: int
    comparison: list["EvalReport"] = field(default_factory=list)

    def accumulator(self) -> IoUAccumulator:
        acc = IoUAccumulator(self.num_classes)
        for r in self.records:
            acc.add_counts(r["class_id"], r["tp"], r["fp"], r["fn"], r["tn"])
        return acc

    def summary(self) -> dict:
        acc = self.accumulator()
        pixels = sum(r["tp"] + r["fp"] + r["fn"] + r["tn"] for r in self.records)
        predicted = sum(r["tp"] + r["fp"] for r in self.records)
        return {
            "predictor": self.predictor,
            "miou": miou(acc),
            "miou_episode": miou_per_episode(self.records),
            "fbiou": fbiou(acc),
            "fg_pct": 100.0 * predicted / pixels,
            "episodes": len({r["episode_id"] for r in self.records}),
            "queries": len(self.records),
        }

    def rows(self) -> list[dict]:
        return [self.summary()] + [c.summary() for c in self.comparison]

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rec_path, sum_path = out / "records.jsonl", out / "summary.csv"
        with rec_path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
        with sum_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows())
        return rec_path, sum_path


def read_records(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _work(args):
    ep, cfg, predictor = args
    return episode_records(ep, cfg, predictor)


def evaluate(episodes, cfg: RunConfig, predictor: str = "pipeline", naive_row: bool = True,
             num_classes: int | None = None) -> EvalReport:
    """Run ``predictor`` on every episode and aggregate.

    Episodes are independent; with ``cfg.workers > 1`` they are spread over a
    process pool and the records are merged in input order.
    """
    episodes = list(episodes)
    if not episodes:
        raise IngestionError("no episodes to evaluate")
    parse_predictor(predictor)
    num_classes = num_classes or max(ep.class_id for ep in episodes) + 1
    jobs = [(ep, cfg, predictor) for ep in episodes]
    if cfg.workers > 1 and len(episodes) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(_work, jobs))
    else:
        chunks = [_work(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    report = EvalReport(predictor, records, num_classes)
    if naive_row and predictor != "naive":
        naive = [r for ep in episodes for r in _baseline_records(ep, "naive", None, cfg)]
        report.comparison.append(EvalReport("naive", naive, num_classes))
    return report


def load_dataset(path, shots: int | None = None) -> list[Episode]:
    """Every episode directory below ``path``, sorted by name, truncated to ``shots`` support pairs."""
    root = Path(path)
    dirs = sorted(p for p in root.iterdir() if (p / "support").is_dir()) if root.is_dir() else []
    if not dirs:
        raise IngestionError(f"{root}: no episode directories found")
    episodes = []
    for d in dirs:
        ep = load_episode(d)
        if shots is not None:
            if ep.shots < shots:
                raise IngestionError(f"{d}: has {ep.shots} support pairs, {shots} requested")
            ep = Episode(ep.episode_id, ep.class_id, ep.support[:shots], ep.queries, ep.seed)
        episodes.append(ep)
    return episodes
