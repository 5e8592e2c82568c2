"""Embedding discriminability before and after adapter fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..analysis import PAIR_CAP, LevelStats, block_average, class_similarities, embedding_table
from ..errors import MissingGroundTruthError
from .config import RunConfig
from .episode import Episode
from .pipeline import SupportState, encode, episode_seed, run_episode


@dataclass
class EmbeddingReport:
    episode_id: str
    before: list[LevelStats]
    after: list[LevelStats]
    split: tuple[int, ...]

    def blocks(self):
        return block_average(self.before, self.split), block_average(self.after, self.split)

    def table(self) -> list[list]:
        return embedding_table(*self.blocks())

    def mean_delta_qs(self, which: str) -> float:
        stats = self.before if which == "before" else self.after
        vals = [s.delta_qs for s in stats if s.delta_qs is not None]
        return float(np.mean(vals)) if vals else float("nan")


def analyze_episode(ep: Episode, cfg: RunConfig, cap: int | None = PAIR_CAP,
                    state: SupportState | None = None) -> EmbeddingReport:
    """Similarity statistics of backbone vs. adapted features for query 0 and shot 0.

    ``state`` may carry heads already fitted on query 0; otherwise they are fitted here.
    """
    q_img, q_mask = ep.queries[0]
    if q_mask is None:
        raise MissingGroundTruthError(f"{ep.episode_id}: analysis needs the query mask")
    s_mask = ep.support[0][1]
    if state is None:
        _, state = run_episode(Episode(ep.episode_id, ep.class_id, ep.support, ep.queries[:1], ep.seed),
                               cfg, return_state=True)
    enc = encode([ep.support[0][0], q_img], cfg, state.spec, episode_seed(ep, cfg), with_views=False)
    raw_s = [lv.original for lv in enc[0].levels]
    raw_q = [lv.original for lv in enc[1].levels]
    ad_s, ad_q = state.stack.forward(raw_s), state.stack.forward(raw_q)
    before = [class_similarities(fq, fs, q_mask, s_mask, cap) for fq, fs in zip(raw_q, raw_s)]
    after = [class_similarities(fq, fs, q_mask, s_mask, cap) for fq, fs in zip(ad_q, ad_s)]
    return EmbeddingReport(ep.episode_id, before, after, state.spec.block_split())


def suite_table(reports: list[EmbeddingReport]) -> list[list]:
    """Table averaged over several episodes (block values averaged per episode first)."""
    pairs = [r.blocks() for r in reports]

    def avg(side):
        blocks = pairs[0][side].keys()
        return {b: {k: _nanmean([p[side][b][k] for p in pairs]) for k in pairs[0][side][b]} for b in blocks}

    rows = embedding_table(avg(0), avg(1))
    rows.append(["episodes", len(reports)] + [""] * (len(rows[0]) - 2))
    return rows


def _nanmean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None
