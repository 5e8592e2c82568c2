"""Per-episode orchestration: views -> features -> fit -> compare -> segment."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from ..adapt import AdapterStack, ImageViews, LevelInputs, fit_adapters
from ..compare import concat_shots, correlation_map
from ..errors import AdaptSegError, ConfigurationError
from ..metrics import confusion
from ..pyramid import (BackboneSpec, MaskPyramid, backproject, extract_batch, make_views, resize_map,
                       validity_mask)
from ..segment import FusedPrediction, finalize, fuse, pseudo_episode_ious
from .config import RunConfig
from .episode import Episode

log = logging.getLogger(__name__)


@dataclass
class EpisodeResult:
    episode_id: str
    class_id: int
    query_index: int
    mask: np.ndarray
    threshold: float
    refined: bool
    pseudo_iou_plain: float | None
    pseudo_iou_refined: float | None
    counts: tuple[int, int, int, int] | None
    fit_seconds: float
    infer_seconds: float
    loss_trace: list[float] = field(default_factory=list)
    prediction: FusedPrediction | None = None

    @property
    def pred_fg_ratio(self) -> float:
        return float(self.mask.mean())

    def record(self) -> dict:
        rec = {
            "episode_id": self.episode_id,
            "class_id": self.class_id,
            "query": self.query_index,
            "pred_fg_ratio": self.pred_fg_ratio,
            "threshold": self.threshold,
            "refined": self.refined,
            "pseudo_iou_plain": self.pseudo_iou_plain,
            "pseudo_iou_refined": self.pseudo_iou_refined,
            "fit_seconds": self.fit_seconds,
            "infer_seconds": self.infer_seconds,
        }
        if self.counts is not None:
            rec.update(zip(("tp", "fp", "fn", "tn"), self.counts))
        return rec


def resize_image(image: np.ndarray, size: int | None) -> np.ndarray:
    if size is None or image.shape[:2] == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def view_seed(seed: int, image: np.ndarray) -> int:
    """Views depend on the episode seed and the image content only."""
    digest = zlib.crc32(np.ascontiguousarray(image).tobytes())
    return int(np.random.SeedSequence([seed, digest]).generate_state(1)[0])


def level_masks(mask: np.ndarray, spec: BackboneSpec, input_hw) -> MaskPyramid:
    m = torch.as_tensor(mask, dtype=torch.float64)
    return MaskPyramid([resize_map(m, s).clamp(0, 1) for s in spec.level_sizes(*input_hw)])


@dataclass
class _Encoded:
    """Backbone features of one image and its views, at every level."""

    image: np.ndarray
    levels: list[ImageViews]


def encode(images, cfg: RunConfig, spec: BackboneSpec, seed: int, with_views: bool = True) -> list[_Encoded]:
    """Resize, generate views and extract features for several images at once."""
    batch, plan = [], []
    for image in images:
        im = resize_image(image, cfg.input_size)
        if with_views:
            views = make_views(im, None, cfg.aug_count, cfg.max_shear_deg, view_seed(seed, im))
            plan.append((im, views.affines))
            batch += [im, *views.images]
        else:
            plan.append((im, []))
            batch.append(im)
    pyramids = extract_batch(batch, spec)
    out, i = [], 0
    for im, affines in plan:
        group = pyramids[i:i + 1 + len(affines)]
        i += 1 + len(affines)
        levels = [ImageViews(group[0][l], [p[l] for p in group[1:]], affines) for l in range(spec.level_count)]
        out.append(_Encoded(im, levels))
    return out


@dataclass
class SupportState:
    """Everything needed to segment new queries without refitting."""

    stack: AdapterStack
    spec: BackboneSpec
    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    refine: bool
    pseudo_ious: tuple[float, float] | None
    fit_seconds: float

    def per_level(self, query: _Encoded) -> list[torch.Tensor]:
        adapted = self.stack.forward([lv.original for lv in query.levels])
        return [correlation_map(q, k, v) for q, k, v in zip(adapted, self.keys, self.values)]


def prepare_support(ep: Episode, fit_query: _Encoded, support: list[_Encoded], cfg: RunConfig,
                    spec: BackboneSpec, seed: int) -> SupportState:
    t0 = time.perf_counter()
    input_hw = support[0].image.shape[:2]
    masks = [level_masks(m, spec, input_hw) for _, m in ep.support]
    levels = [LevelInputs(fit_query.levels[l], [s.levels[l] for s in support], [m[l] for m in masks])
              for l in range(spec.level_count)]
    stack = fit_adapters(levels, cfg.loss_config(), seed)

    adapted = [stack.forward([lv.original for lv in s.levels]) for s in support]
    keys, values = [], []
    for l in range(spec.level_count):
        k, v = concat_shots([a[l] for a in adapted], [m[l] for m in masks])
        keys.append(k)
        values.append(v)

    ious = None
    refine = False
    if cfg.refine:
        views, valid = [], []
        for s in support:
            feats = stack.forward([lv.views[0] for lv in s.levels])
            affine = s.levels[0].affines[0]
            vmaps = [validity_mask(affine, tuple(f.shape[-2:])) for f in feats]
            views.append([backproject(f, affine, vm) for f, vm in zip(feats, vmaps)])
            valid.append(vmaps)
        ious = pseudo_episode_ious([im for im, _ in ep.support], [m for _, m in ep.support], adapted, views,
                                   valid, [list(m) for m in masks], cfg.crf_config())
        refine = ious[1] > ious[0]
    return SupportState(stack, spec, keys, values, refine, ious, time.perf_counter() - t0)


def predict(state: SupportState, query_image: np.ndarray, encoded: _Encoded, cfg: RunConfig) -> FusedPrediction:
    per_level = state.per_level(encoded)
    fused = fuse(per_level, query_image.shape[:2])
    pred = finalize(query_image, fused, per_level, state.refine, cfg.crf_config())
    if state.pseudo_ious is not None:
        pred.pseudo_iou_plain, pred.pseudo_iou_refined = state.pseudo_ious
    return pred


def _result(ep, j, pred, fit_seconds, infer_seconds, trace, keep) -> EpisodeResult:
    gt = ep.queries[j][1]
    counts = confusion(pred.mask, gt) if gt is not None else None
    return EpisodeResult(ep.episode_id, ep.class_id, j, pred.mask, pred.threshold, pred.refined,
                         pred.pseudo_iou_plain, pred.pseudo_iou_refined, counts, fit_seconds,
                         infer_seconds, list(trace), pred if keep else None)


def episode_seed(ep: Episode, cfg: RunConfig) -> int:
    return int(np.random.SeedSequence([cfg.seed, ep.seed]).generate_state(1)[0])


def run_episode(ep: Episode, cfg: RunConfig, keep_maps: bool = False,
                return_state: bool = False):
    """Segment every query of ``ep``.

    Each query gets its own adapter fit unless ``cfg.quick_infer`` is set,
    in which case the heads fitted with the first query are reused.
    """
    try:
        spec = cfg.backbone_spec()
        seed = episode_seed(ep, cfg)
        encoded = encode([im for im, _ in ep.support] + [im for im, _ in ep.queries], cfg, spec, seed)
        support, queries = encoded[:ep.shots], encoded[ep.shots:]
        results, state = [], None
        for j, enc in enumerate(queries):
            if state is None or not cfg.quick_infer:
                state = prepare_support(ep, enc, support, cfg, spec, seed)
                fit_seconds = state.fit_seconds
            else:
                fit_seconds = 0.0
            t0 = time.perf_counter()
            pred = predict(state, ep.queries[j][0], enc, cfg)
            results.append(_result(ep, j, pred, fit_seconds, time.perf_counter() - t0,
                                   state.stack.loss_trace, keep_maps))
    except AdaptSegError as exc:
        raise type(exc)(f"episode {ep.episode_id}: {exc}") from exc
    return (results, state) if return_state else results


def quick_infer(state: SupportState, ep: Episode, query_images, cfg: RunConfig,
                query_masks=None, keep_maps: bool = False) -> list[EpisodeResult]:
    """Segment further queries with already fitted heads."""
    if len(state.stack) != state.spec.level_count:
        raise ConfigurationError("adapter stack does not match the backbone levels")
    seed = episode_seed(ep, cfg)
    query_masks = query_masks if query_masks is not None else [None] * len(query_images)
    probe = Episode(ep.episode_id, ep.class_id, ep.support, list(zip(query_images, query_masks)), ep.seed)
    encoded = encode(query_images, cfg, state.spec, seed, with_views=False)
    out = []
    for j, enc in enumerate(encoded):
        t0 = time.perf_counter()
        pred = predict(state, query_images[j], enc, cfg)
        out.append(_result(probe, j, pred, 0.0, time.perf_counter() - t0, state.stack.loss_trace, keep_maps))
    return out
