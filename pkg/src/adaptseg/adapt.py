"""Attached adapter heads, consistency losses and test-time fitting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, FitError
from .pyramid import DTYPE, backproject, validity_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    epochs: int = 25
    learning_rate: float = 0.01
    momentum: float = 0.0
    adapter_channels: int = 64

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")


def level_seed(seed: int, level: int) -> int:
    return int(np.random.SeedSequence([seed, level]).generate_state(1)[0])


class BatchNorm(nn.Module):
    """Per-channel batch normalization over ``(N, H, W)``.

    Running statistics use the biased variance so that duplicating a batch
    leaves them unchanged.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(channels, dtype=DTYPE))

    def forward(self, x):
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        x = (x - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class Adapter(nn.Module):
    """``conv1x1 -> batchnorm -> relu -> conv1x1`` attached to one level."""

    def __init__(self, in_channels: int, out_channels: int = 64, seed: int = 0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(in_channels, out_channels, 1, dtype=DTYPE)
        self.bn = BatchNorm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 1, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                nn.init.kaiming_uniform_(conv.weight, a=math.sqrt(5), generator=gen)
                bound = 1 / math.sqrt(conv.in_channels)
                nn.init.uniform_(conv.bias, -bound, bound, generator=gen)

    def forward(self, x):
        return self.conv2(F.relu(self.bn(self.conv1(x))))


def adapter_forward(features: torch.Tensor, adapter: Adapter, mode: str = "infer") -> torch.Tensor:
    """Apply one head to ``(C, H, W)`` or ``(N, C, H, W)`` features.

    ``mode="fit"`` normalizes with batch statistics (and updates the running
    ones), ``mode="infer"`` uses the frozen running statistics.
    """
    if mode not in ("fit", "infer"):
        raise ValueError(f"mode must be 'fit' or 'infer', got {mode!r}")
    single = features.dim() == 3
    x = features[None] if single else features
    if x.shape[1] != adapter.in_channels:
        raise ConfigurationError(f"adapter expects {adapter.in_channels} channels, got {x.shape[1]}")
    adapter.train(mode == "fit")
    if mode == "fit":
        out = adapter(x)
    else:
        with torch.no_grad():
            out = adapter(x)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# losses


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).T


def loss_nce(a: torch.Tensor, b: torch.Tensor, valid=None, tau: float = 0.5):
    """Dense contrastive loss between ``a`` and its backprojected view ``b``.

    Both are ``(d, H, W)``.  Anchors and negatives range over the ``valid``
    positions only.  Returns ``None`` when no position is valid.
    """
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = _flat(a), _flat(b)
    if valid is not None:
        idx = torch.as_tensor(np.asarray(valid).reshape(-1))
        fa, fb = fa[idx], fb[idx]
    if fa.shape[0] == 0:
        return None
    logits = fa @ fb.T / tau
    return -torch.diagonal(torch.log_softmax(logits, dim=1)).mean()


def _channel_stats(x: torch.Tensor, valid=None):
    f = _flat(x)
    if valid is not None:
        f = f[torch.as_tensor(np.asarray(valid).reshape(-1))]
    return f.mean(dim=0), f.var(dim=0, unbiased=False)


def loss_stat_terms(a: torch.Tensor, b: torch.Tensor, valid=None):
    """Mean and variance discrepancy terms, returned separately."""
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mu_a, var_a = _channel_stats(a, valid)
    mu_b, var_b = _channel_stats(b, valid)
    return (mu_a - mu_b).abs().mean(), (var_a - var_b).abs().mean()


def loss_stat(a: torch.Tensor, b: torch.Tensor, valid=None) -> torch.Tensor:
    mu, var = loss_stat_terms(a, b, valid)
    return mu + var


@dataclass
class Prototypes:
    fg: torch.Tensor | None
    bg: torch.Tensor | None
    fg_weight: float
    bg_weight: float


def masked_prototypes(features, masks, valid=None) -> Prototypes:
    """Mask-weighted average pooling, jointly over all shots.

    ``features`` is one ``(d, H, W)`` volume or a list of them; ``masks``
    the matching soft masks.  ``valid`` optionally restricts pooling.
    """
    if isinstance(features, torch.Tensor) and features.dim() == 3:
        features, masks = [features], [masks]
        valid = None if valid is None else [valid]
    if len(features) != len(masks):
        raise ConfigurationError("need one mask per feature volume")
    fs, ws = [], []
    for i, (f, m) in enumerate(zip(features, masks)):
        m = torch.as_tensor(m, dtype=f.dtype)
        if tuple(m.shape) != tuple(f.shape[-2:]):
            raise ConfigurationError(f"mask shape {tuple(m.shape)} != feature shape {tuple(f.shape[-2:])}")
        w = m.reshape(-1)
        keep = torch.ones_like(w)
        if valid is not None and valid[i] is not None:
            keep = torch.as_tensor(np.asarray(valid[i]).reshape(-1), dtype=f.dtype)
        fs.append(_flat(f))
        ws.append(torch.stack([w * keep, (1 - w) * keep]))
    flat = torch.cat(fs)
    weights = torch.cat(ws, dim=1)
    mass = weights.sum(dim=1)
    protos = []
    for k in range(2):
        if mass[k] <= 0:
            protos.append(None)
        else:
            protos.append(weights[k] @ flat / mass[k])
    return Prototypes(protos[0], protos[1], float(mass[0]), float(mass[1]))


def loss_proto(p: Prototypes, p_aug: Prototypes):
    """Class-aware prototype contrast; ``None`` when a prototype is absent."""
    if p.fg is None or p_aug.fg is None or p_aug.bg is None:
        return None
    pos = F.cosine_similarity(p.fg, p_aug.fg, dim=0)
    neg = F.cosine_similarity(p.fg, p_aug.bg, dim=0)
    return -torch.log_softmax(torch.stack([pos, neg]), dim=0)[0]


# ---------------------------------------------------------------------------
# fitting


@dataclass
class ImageViews:
    """Backbone features at one level for an image and its views."""

    original: torch.Tensor
    views: list[torch.Tensor]
    affines: list[np.ndarray]

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.original, *self.views])


@dataclass
class LevelInputs:
    query: ImageViews
    support: list[ImageViews]
    support_masks: list[torch.Tensor]


@dataclass
class LossTerms:
    total: torch.Tensor
    query: torch.Tensor | None
    support: torch.Tensor | None
    proto: torch.Tensor | None
    skipped: list[str] = field(default_factory=list)


def _side_loss(adapted: torch.Tensor, affines, tau: float, name: str, skipped: list):
    """Average of nce + mean + variance terms across views of one image."""
    orig = adapted[0]
    terms, projected = [], []
    for a, affine in enumerate(affines, start=1):
        valid = validity_mask(affine, tuple(orig.shape[-2:]))
        view = backproject(adapted[a], affine, valid)
        projected.append((view, valid))
        if valid.sum() < 2:
            skipped.append(f"{name}/view{a}")
            continue
        mu, var = loss_stat_terms(orig, view, valid)
        terms.append(loss_nce(orig, view, valid, tau) + mu + var)
    return terms, projected


def combined_loss(adapted_query: torch.Tensor, adapted_support: list[torch.Tensor],
                  inputs: LevelInputs, tau: float = 0.5) -> LossTerms:
    """Query consistency + support consistency + prototype contrast.

    ``adapted_query`` stacks the adapted original and views of the query,
    ``adapted_support`` holds the same per shot.
    """
    skipped: list[str] = []
    q_terms, _ = _side_loss(adapted_query, inputs.query.affines, tau, "query", skipped)
    s_terms, s_proj = [], []
    for i, (adapted, shot) in enumerate(zip(adapted_support, inputs.support)):
        terms, proj = _side_loss(adapted, shot.affines, tau, f"support{i}", skipped)
        s_terms += terms
        s_proj.append(proj)

    originals = [a[0] for a in adapted_support]
    p = masked_prototypes(originals, inputs.support_masks)
    p_terms = []
    for v in range(len(inputs.support[0].affines)):
        feats = [proj[v][0] for proj in s_proj]
        valid = [proj[v][1] for proj in s_proj]
        lp = loss_proto(p, masked_prototypes(feats, inputs.support_masks, valid))
        if lp is None:
            skipped.append(f"proto/view{v + 1}")
        else:
            p_terms.append(lp)

    lq = torch.stack(q_terms).mean() if q_terms else None
    ls = torch.stack(s_terms).mean() if s_terms else None
    lp = torch.stack(p_terms).mean() if p_terms else None
    parts = [t for t in (lq, ls, lp) if t is not None]
    if not parts:
        raise FitError(f"every loss term was skipped: {skipped}")
    return LossTerms(sum(parts), lq, ls, lp, skipped)


@dataclass
class AdapterStack:
    adapters: list[Adapter]
    loss_trace: list[float]
    level_traces: list[list[float]]
    fit_config: LossConfig
    skipped: list[list[str]] = field(default_factory=list)

    def __len__(self):
        return len(self.adapters)

    def forward(self, pyramid, mode: str = "infer") -> list[torch.Tensor]:
        if len(pyramid) != len(self.adapters):
            raise ConfigurationError(f"pyramid has {len(pyramid)} levels, stack has {len(self.adapters)}")
        return [adapter_forward(f, g, mode) for f, g in zip(pyramid, self.adapters)]

    def save(self, path) -> None:
        arrays = {}
        for l, g in enumerate(self.adapters):
            for k, v in g.state_dict().items():
                arrays[f"level{l}.{k}"] = v.detach().numpy()
        meta = {
            "levels": [[g.in_channels, g.out_channels] for g in self.adapters],
            "loss_trace": self.loss_trace,
            "level_traces": self.level_traces,
            "fit_config": asdict(self.fit_config),
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "AdapterStack":
        with np.load(path) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            adapters = []
            for l, (c_in, c_out) in enumerate(meta["levels"]):
                g = Adapter(c_in, c_out)
                state = {k: torch.from_numpy(data[f"level{l}.{k}"].copy()) for k in g.state_dict()}
                g.load_state_dict(state)
                g.eval()
                adapters.append(g)
        return cls(adapters, meta["loss_trace"], meta["level_traces"], LossConfig(**meta["fit_config"]))


def fit_level(inputs: LevelInputs, cfg: LossConfig, seed: int, level: int = 0):
    """Train one head from scratch; returns ``(adapter, trace, skipped)``."""
    adapter = Adapter(inputs.query.original.shape[0], cfg.adapter_channels, seed=seed)
    opt = torch.optim.SGD(adapter.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    query_batch = inputs.query.stacked()
    support_batch = torch.cat([shot.stacked() for shot in inputs.support])
    per_shot = len(inputs.support[0].views) + 1
    trace, skipped = [], []
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        # query and support are separate normalization batches
        adapted_s = adapter_forward(support_batch, adapter, "fit")
        adapted_q = adapter_forward(query_batch, adapter, "fit")
        shots = list(adapted_s.split(per_shot))
        terms = combined_loss(adapted_q, shots, inputs, cfg.temperature)
        loss = terms.total
        if not torch.isfinite(loss):
            raise FitError(f"non-finite loss at level {level}, epoch {epoch}")
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        if epoch == 0:
            skipped = terms.skipped
            if skipped:
                log.info("level %d: skipped loss terms %s", level, skipped)
    adapter.eval()
    return adapter, trace, skipped


def fit_adapters(levels: list[LevelInputs], cfg: LossConfig, seed: int = 0, order=None) -> AdapterStack:
    """Fit every level's head independently on one episode."""
    order = list(range(len(levels))) if order is None else list(order)
    if sorted(order) != list(range(len(levels))):
        raise ValueError("order must be a permutation of the level indices")
    results = {}
    for l in order:
        results[l] = fit_level(levels[l], cfg, level_seed(seed, l), l)
    adapters = [results[l][0] for l in range(len(levels))]
    traces = [results[l][1] for l in range(len(levels))]
    mean_trace = [float(np.mean(col)) for col in zip(*traces)] if cfg.epochs else []
    return AdapterStack(adapters, mean_trace, traces, cfg, [results[l][2] for l in range(len(levels))])
