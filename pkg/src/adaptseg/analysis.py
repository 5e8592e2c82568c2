"""Embedding-space discriminability: same-class vs. cross-class cosine similarity."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .compare import flatten_features
from .pyramid import resize_map

log = logging.getLogger(__name__)

STATS = ("sim_ff_ss", "sim_fb_ss", "delta_ss", "sim_ff_qs", "sim_fb_qs", "delta_qs")
PAIR_CAP = 10**6


def class_partition(features: torch.Tensor, mask):
    """Split ``(C, H, W)`` features into foreground and background vectors.

    The full-resolution mask is bilinearly resized to the feature grid and
    thresholded with a strict ``> 0.5``.
    """
    m = torch.as_tensor(np.asarray(mask), dtype=features.dtype)
    if tuple(m.shape) != tuple(features.shape[1:]):
        m = resize_map(m, tuple(features.shape[1:]))
    fg = (m > 0.5).reshape(-1)
    flat = flatten_features(features)
    return flat[fg], flat[~fg]


def _drop_zero(x: torch.Tensor) -> torch.Tensor:
    keep = x.norm(dim=1) > 0
    if not keep.all():
        log.info("excluding %d zero vectors", int((~keep).sum()))
    return x[keep]


def mean_cosine(a: torch.Tensor, b: torch.Tensor, cap: int | None = None, seed: int = 0):
    """Mean cosine similarity over all pairs of rows of ``a`` and ``b``.

    With ``cap`` set and more pairs than that, a seeded uniform sample of
    ``cap`` pairs is used.  Returns ``(value, pair_count)``; value is
    ``None`` when either set is empty.
    """
    a, b = _drop_zero(a), _drop_zero(b)
    if len(a) == 0 or len(b) == 0:
        return None, 0
    an, bn = F.normalize(a, dim=1), F.normalize(b, dim=1)
    n_pairs = len(a) * len(b)
    if cap is not None and n_pairs > cap:
        rng = np.random.default_rng(seed)
        i = torch.as_tensor(rng.integers(0, len(a), cap))
        j = torch.as_tensor(rng.integers(0, len(b), cap))
        return float((an[i] * bn[j]).sum(1).mean()), cap
    # mean over the cross product == dot of the mean directions
    return float(an.mean(0) @ bn.mean(0)), n_pairs


@dataclass
class LevelStats:
    sim_ff_ss: float | None
    sim_fb_ss: float | None
    sim_ff_qs: float | None
    sim_fb_qs: float | None
    pairs: dict = field(default_factory=dict)

    @staticmethod
    def _delta(a, b):
        return None if a is None or b is None else a - b

    @property
    def delta_ss(self):
        return self._delta(self.sim_ff_ss, self.sim_fb_ss)

    @property
    def delta_qs(self):
        return self._delta(self.sim_ff_qs, self.sim_fb_qs)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in STATS}


def class_similarities(fq, fs, mq, ms, cap: int | None = None, seed: int = 0) -> LevelStats:
    """Intra-support and query-support class similarities for one level."""
    qf, _ = class_partition(fq, mq)
    sf, sb = class_partition(fs, ms)
    ff_ss, n1 = mean_cosine(sf, sf, cap, seed)
    fb_ss, n2 = mean_cosine(sf, sb, cap, seed)
    ff_qs, n3 = mean_cosine(qf, sf, cap, seed)
    fb_qs, n4 = mean_cosine(qf, sb, cap, seed)
    return LevelStats(ff_ss, fb_ss, ff_qs, fb_qs,
                      {"ff_ss": n1, "fb_ss": n2, "ff_qs": n3, "fb_qs": n4})


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def block_average(per_level, split=(4, 6, 3), names=("L", "M", "H")) -> dict:
    """Average each statistic over consecutive blocks of levels."""
    if sum(split) != len(per_level):
        raise ValueError(f"split {tuple(split)} does not cover {len(per_level)} levels")
    if len(names) != len(split):
        names = tuple(f"B{i}" for i in range(len(split)))
    rows = [s.as_dict() if isinstance(s, LevelStats) else dict(s) for s in per_level]
    out, start = {}, 0
    for name, size in zip(names, split):
        block = rows[start:start + size]
        out[name] = {k: _mean([r[k] for r in block]) for k in STATS}
        start += size
    return out


def embedding_table(before: dict, after: dict) -> list[list]:
    """Rows FG<->FG / FG<->BG / delta for both scopes; columns blocks x before/after."""
    blocks = list(before)
    header = ["scope", "measure"] + [f"{b}_before" for b in blocks] + [f"{b}_after" for b in blocks]
    rows = [header]
    for scope, keys in (("intra_support", ("sim_ff_ss", "sim_fb_ss", "delta_ss")),
                        ("query_support", ("sim_ff_qs", "sim_fb_qs", "delta_qs"))):
        for label, k in zip(("FG<->FG", "FG<->BG", "delta"), keys):
            rows.append([scope, label] + [before[b][k] for b in blocks] + [after[b][k] for b in blocks])
    return rows
