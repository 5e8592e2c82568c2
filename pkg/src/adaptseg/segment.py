"""Fusion of per-level score maps, thresholding and optional CRF refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .compare import concat_shots, correlation_map
from .crf import CrfConfig, crf_marginals
from .errors import ConfigurationError
from .pyramid import resize_map

log = logging.getLogger(__name__)

HIST_BINS = 256
TIE_RTOL = 1e-12


def fuse(per_level, size) -> torch.Tensor:
    """Mean of the bilinearly upsampled per-level maps."""
    if len(per_level) == 0:
        raise ConfigurationError("nothing to fuse")
    size = tuple(size)
    up = [m if tuple(m.shape) == size else resize_map(m, size) for m in per_level]
    return torch.stack(up).mean(dim=0)


def _as_array(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().numpy()
    return np.asarray(values, dtype=np.float64).ravel()


def otsu_threshold(values, bins: int = HIST_BINS):
    """Otsu's threshold on a ``bins``-bin histogram spanning [min, max].

    Candidates are the interior bin edges; an edge splits the histogram into
    bins below it and bins at or above it.  When several edges reach the
    maximum (e.g. across empty bins) their mean position is returned.
    Returns ``None`` when only one bin is occupied.
    """
    v = _as_array(values)
    if v.size == 0:
        raise ValueError("empty map")
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        return None
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    if np.count_nonzero(hist) < 2:
        return None
    centers = (edges[:-1] + edges[1:]) / 2
    p = hist / hist.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    mt = (p * centers).sum()
    w1 = 1 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    best = between.max()
    k = np.flatnonzero(between >= best - TIE_RTOL * abs(best)).mean()
    # between[k] belongs to edge k + 1; fractional positions interpolate
    return float(np.interp(k + 1, np.arange(len(edges)), edges))


def threshold(fused) -> float:
    """``max(mean, otsu)``, falling back to the mean when Otsu is undefined."""
    v = _as_array(fused)
    mean = float(v.mean())
    t = otsu_threshold(v)
    return t if t is not None and t > mean else mean


def binarize(fused, thresh: float | None = None):
    if thresh is None:
        thresh = threshold(fused)
    return fused > thresh


def crf_refine(image, soft, tau: float, cfg: CrfConfig = CrfConfig()) -> np.ndarray:
    """Binary mask from dense-CRF inference with sigmoid unaries around ``tau``."""
    image = np.asarray(image)
    s = _as_array(soft).reshape(np.shape(soft))
    if s.shape != image.shape[:2]:
        raise ConfigurationError(f"score map {s.shape} does not match image {image.shape[:2]}")
    with np.errstate(over="ignore"):
        fg = 1.0 / (1.0 + np.exp(-cfg.temperature * (s - tau)))
    prob = np.stack([1.0 - fg, fg], axis=-1)
    q = crf_marginals(image, prob, cfg)
    return q[..., 1] > q[..., 0]


def _iou(pred, gt) -> tuple[int, int]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    return int((pred & gt).sum()), int((pred | gt).sum())


@dataclass
class FusedPrediction:
    fused: torch.Tensor
    per_level: list[torch.Tensor]
    threshold: float
    mask: np.ndarray
    refined: bool = False
    pseudo_iou_plain: float | None = None
    pseudo_iou_refined: float | None = None
    extra: dict = field(default_factory=dict)


def pseudo_fused(support_adapted, view_adapted, view_valid, level_masks, size) -> torch.Tensor:
    """Fused score map with the support as query and its first view as support."""
    per_level = []
    for q, k, valid, m in zip(support_adapted, view_adapted, view_valid, level_masks):
        keys, values = concat_shots([k], [m], [valid])
        per_level.append(correlation_map(q, keys, values))
    return fuse(per_level, size)


def pseudo_episode_ious(support_images, support_masks, support_adapted, view_adapted,
                        view_valid, level_masks, cfg: CrfConfig = CrfConfig()) -> tuple[float, float]:
    """IoU of the plain and the CRF-refined pseudo-prediction against the support masks.

    The support acts as pseudo-query and its backprojected first view as
    pseudo-support.  ``support_adapted[i][l]`` are adapted original features
    of shot ``i`` at level ``l``; ``view_adapted``, ``view_valid`` and
    ``level_masks`` are indexed the same way.  Counts are pooled over shots.
    """
    inter_p = union_p = inter_r = union_r = 0
    for i, image in enumerate(support_images):
        gt = np.asarray(support_masks[i], dtype=bool)
        s_fused = pseudo_fused(support_adapted[i], view_adapted[i], view_valid[i], level_masks[i], gt.shape)
        tau = threshold(s_fused)
        plain = binarize(s_fused, tau).numpy()
        ref = crf_refine(image, s_fused, tau, cfg)
        a, b = _iou(plain, gt)
        inter_p, union_p = inter_p + a, union_p + b
        a, b = _iou(ref, gt)
        inter_r, union_r = inter_r + a, union_r + b
    return (inter_p / union_p if union_p else 0.0), (inter_r / union_r if union_r else 0.0)


def finalize(query_image, fused, per_level, refine: bool, cfg: CrfConfig = CrfConfig()) -> FusedPrediction:
    tau = threshold(fused)
    if refine:
        mask = crf_refine(query_image, fused, tau, cfg)
    else:
        mask = binarize(fused, tau).numpy()
    return FusedPrediction(fused, per_level, tau, np.asarray(mask, dtype=bool), refine)


def refine_decision(query_image, fused, per_level, support_images, support_masks,
                    support_adapted, view_adapted, view_valid, level_masks,
                    cfg: CrfConfig = CrfConfig(), ious=None) -> FusedPrediction:
    """Refine the query prediction with the CRF iff that helps on the pseudo-episode.

    ``ious`` may carry a precomputed ``(plain, refined)`` pair; ties do not refine.
    """
    if ious is None:
        ious = pseudo_episode_ious(support_images, support_masks, support_adapted,
                                   view_adapted, view_valid, level_masks, cfg)
    iou_plain, iou_ref = ious
    refined = iou_ref > iou_plain
    log.debug("pseudo-episode IoU plain=%.4f refined=%.4f -> refine=%s", iou_plain, iou_ref, refined)
    pred = finalize(query_image, fused, per_level, refined, cfg)
    pred.pseudo_iou_plain, pred.pseudo_iou_refined = iou_plain, iou_ref
    return pred
