"""Multi-level feature extraction, geometric views and backprojection.

Feature volumes are torch tensors laid out channel-first, ``(C, H, W)``.
Affines are 2x3 matrices acting on normalized coordinates in ``[-1, 1]``
with pixel centers at ``(2 * (i + 0.5) / N) - 1`` (the ``align_corners=False``
convention), so a single matrix is valid at every pyramid level.
"""

from __future__ import annotations

import functools
import math
import threading
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateAffineError

DTYPE = torch.float64


@dataclass(frozen=True)
class BackboneSpec:
    """Level layout of a frozen feature provider.

    ``level_shapes`` holds one ``(stride, channels)`` pair per level.
    ``blocks`` is the provider's low/mid/high grouping of levels.
    """

    level_shapes: tuple[tuple[int, int], ...]
    provider_id: str = "toy"
    blocks: tuple[int, ...] | None = None
    seed: int = 0
    weights: str | None = None

    def __post_init__(self):
        if len(self.level_shapes) < 1:
            raise ConfigurationError("backbone needs at least one level")
        strides = [s for s, _ in self.level_shapes]
        if any(s < 1 for s in strides) or any(c < 1 for _, c in self.level_shapes):
            raise ConfigurationError(f"invalid level shapes {self.level_shapes}")
        if any(b < a for a, b in zip(strides, strides[1:])):
            raise ConfigurationError(f"strides must be non-decreasing, got {strides}")
        if self.blocks is not None and sum(self.blocks) != len(self.level_shapes):
            raise ConfigurationError(
                f"block split {self.blocks} does not cover {len(self.level_shapes)} levels")

    @property
    def level_count(self) -> int:
        return len(self.level_shapes)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.level_shapes)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.level_shapes)

    def level_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(math.ceil(height / s), math.ceil(width / s)) for s in self.strides]

    def block_split(self) -> tuple[int, ...]:
        if self.blocks is not None:
            return self.blocks
        return (1,) * self.level_count if self.level_count == 3 else (self.level_count,)


def toy_spec(strides=(2, 4, 8), channels=(32, 64, 128), seed: int = 0) -> BackboneSpec:
    return BackboneSpec(tuple(zip(strides, channels)), "toy", seed=seed)


# last 13 of the 16 bottlenecks: layer2 (4), layer3 (6), layer4 (3)
RESNET50_LEVELS = ((8, 512),) * 4 + ((16, 1024),) * 6 + ((32, 2048),) * 3


def resnet50_spec(weights: str | None = None) -> BackboneSpec:
    return BackboneSpec(RESNET50_LEVELS, "resnet50", blocks=(4, 6, 3), weights=weights)


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


@dataclass
class MaskPyramid:
    levels: list[torch.Tensor]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


# ---------------------------------------------------------------------------
# providers


class ToyBackbone(nn.Module):
    """Fixed random 3x3 convolutions with strided downsampling.

    Each level taps the convolution output before the rectifier, the
    rectified map feeds the next level.  No weights are needed and the
    output is a deterministic function of ``spec.seed``.
    """

    reentrant = True

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        gen = torch.Generator().manual_seed(spec.seed)
        self.convs = nn.ModuleList()
        self.steps = []
        c_in, prev = 3, 1
        for stride, c_out in spec.level_shapes:
            if stride % prev:
                raise ConfigurationError(f"toy strides must divide each other, got {spec.strides}")
            step = stride // prev
            conv = nn.Conv2d(c_in, c_out, 3, stride=step, padding=1, padding_mode="reflect", bias=False)
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c_in))
                conv.weight.copy_(w)
            self.convs.append(conv.to(DTYPE))
            self.steps.append(step)
            c_in, prev = c_out, stride
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x.to(DTYPE) - 0.5) / 0.25
        out = []
        for conv in self.convs:
            tap = conv(x)
            out.append(tap)
            x = F.relu(tap)
        return out


class ResNet50Backbone(nn.Module):
    """ResNet-50 bottleneck taps (pre-rectifier) for layer2..layer4.

    Weights are loaded from ``spec.weights`` (a torchvision state dict);
    without them the network is randomly initialized, which is only useful
    for shape checks.
    """

    reentrant = False
    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        import torchvision

        net = torchvision.models.resnet50(weights=None)
        if spec.weights:
            net.load_state_dict(torch.load(spec.weights, map_location="cpu", weights_only=True))
        self.net = net
        self.requires_grad_(False)
        self.eval()

    @staticmethod
    def _bottleneck(block, x):
        identity = x
        out = block.relu(block.bn1(block.conv1(x)))
        out = block.relu(block.bn2(block.conv2(out)))
        out = block.bn3(block.conv3(out))
        if block.downsample is not None:
            identity = block.downsample(x)
        return out + identity

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        net = self.net
        mean = torch.tensor(self.mean).view(1, 3, 1, 1)
        std = torch.tensor(self.std).view(1, 3, 1, 1)
        x = (x.float() - mean) / std
        x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
        x = net.layer1(x)
        taps = []
        for layer in (net.layer2, net.layer3, net.layer4):
            for block in layer:
                pre = self._bottleneck(block, x)
                taps.append(pre.to(DTYPE))
                x = F.relu(pre)
        return taps


PROVIDERS = {"toy": ToyBackbone, "resnet50": ResNet50Backbone}


_PROVIDER_LOCK = threading.Lock()


@functools.lru_cache(maxsize=8)
def get_provider(spec: BackboneSpec) -> nn.Module:
    try:
        cls = PROVIDERS[spec.provider_id]
    except KeyError:
        raise ConfigurationError(f"unknown backbone provider {spec.provider_id!r}") from None
    return cls(spec)


def image_to_tensor(image) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` array -> float ``(3, H, W)`` tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        return image.to(DTYPE)
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"expected an RGB raster (H, W, 3), got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(DTYPE) / 255.0


@torch.no_grad()
def extract_batch(images, spec: BackboneSpec) -> list[FeaturePyramid]:
    """Run several same-sized images through the provider in one batch."""
    x = torch.stack([image_to_tensor(im) for im in images])
    h, w = x.shape[-2:]
    provider = get_provider(spec)
    if getattr(provider, "reentrant", False):
        levels = provider(x)
    else:
        with _PROVIDER_LOCK:
            levels = provider(x)
    expected = spec.level_sizes(h, w)
    if len(levels) != spec.level_count:
        raise ConfigurationError(f"provider returned {len(levels)} levels, spec says {spec.level_count}")
    for lvl, (feat, (eh, ew), c) in enumerate(zip(levels, expected, spec.channels)):
        if tuple(feat.shape[1:]) != (c, eh, ew):
            raise ConfigurationError(
                f"level {lvl}: provider shape {tuple(feat.shape[1:])} != expected {(c, eh, ew)}")
    for feat in levels:
        if not torch.isfinite(feat).all():
            raise ConfigurationError("provider produced non-finite features")
    return [FeaturePyramid([feat[i].contiguous() for feat in levels]) for i in range(x.shape[0])]


def extract_pyramid(image, spec: BackboneSpec) -> FeaturePyramid:
    return extract_batch([image], spec)[0]


# ---------------------------------------------------------------------------
# views and backprojection


@dataclass
class ViewSet:
    images: list[np.ndarray]
    affines: list[np.ndarray]
    shear_deg: list[float]
    validity_masks: list[np.ndarray]
    masks: list[np.ndarray] | None = None

    def __len__(self):
        return len(self.images)


def shear_affine(angle_deg: float, height: int, width: int) -> np.ndarray:
    """Horizontal shear about the image center, in normalized coordinates.

    Maps original coordinates to view coordinates.
    """
    t = math.tan(math.radians(angle_deg))
    # pixel-space shear x' = x + t*y, conjugated by the normalization scale
    return np.array([[1.0, t * height / width, 0.0], [0.0, 1.0, 0.0]])


def _full(affine: np.ndarray) -> np.ndarray:
    return np.vstack([np.asarray(affine, dtype=np.float64), [0.0, 0.0, 1.0]])


def invert_affine(affine: np.ndarray) -> np.ndarray:
    det = np.linalg.det(np.asarray(affine, dtype=np.float64)[:, :2])
    if abs(det) <= 1e-8:
        raise DegenerateAffineError(f"affine determinant {det:.3g} is degenerate")
    return np.linalg.inv(_full(affine))[:2]


def _sample(x: torch.Tensor, theta: np.ndarray, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling: output location p reads ``x`` at ``theta @ p``."""
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    th = torch.as_tensor(np.asarray(theta), dtype=x.dtype).unsqueeze(0).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(th, [x.shape[0], x.shape[1], *size], align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out if batched else out[0]


def _source_coords(affine: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (2 * (np.arange(height) + 0.5) / height) - 1
    xs = (2 * (np.arange(width) + 0.5) / width) - 1
    gx, gy = np.meshgrid(xs, ys)
    a = np.asarray(affine, dtype=np.float64)
    u = a[0, 0] * gx + a[0, 1] * gy + a[0, 2]
    v = a[1, 0] * gx + a[1, 1] * gy + a[1, 2]
    # back to pixel-index coordinates of the sampled map
    return ((u + 1) * width - 1) / 2, ((v + 1) * height - 1) / 2


def validity_mask(affine: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Positions whose four bilinear source taps all lie inside the view."""
    h, w = size
    px, py = _source_coords(affine, h, w)
    eps = 1e-9
    return (px >= -eps) & (px <= w - 1 + eps) & (py >= -eps) & (py <= h - 1 + eps)


def warp_image(image, affine: np.ndarray) -> np.ndarray:
    """Forward-warp an RGB (or single channel) raster by ``affine``."""
    arr = np.asarray(image)
    squeeze = arr.ndim == 2
    t = torch.as_tensor(np.array(arr[..., None] if squeeze else arr)).permute(2, 0, 1).to(DTYPE)
    out = _sample(t, invert_affine(affine), arr.shape[:2])
    out = out.permute(1, 2, 0).numpy()
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out[..., 0] if squeeze else out


def backproject(features: torch.Tensor, affine: np.ndarray, validity: np.ndarray | None = None) -> torch.Tensor:
    """Resample view features ``(C, H, W)`` back into original coordinates.

    Differentiable in ``features``.  Positions outside ``validity`` (computed
    from ``affine`` when omitted) are zeroed; callers exclude them.
    """
    det = np.linalg.det(np.asarray(affine, dtype=np.float64)[:, :2])
    if abs(det) <= 1e-8:
        raise DegenerateAffineError(f"affine determinant {det:.3g} is degenerate")
    size = tuple(features.shape[-2:])
    if np.allclose(affine, [[1, 0, 0], [0, 1, 0]], atol=0, rtol=0):
        return features
    if validity is None:
        validity = validity_mask(affine, size)
    if tuple(validity.shape) != size:
        raise ConfigurationError(f"validity shape {validity.shape} != feature shape {size}")
    out = _sample(features, affine, size)
    return out * torch.as_tensor(validity, dtype=out.dtype)


def make_views(image, mask=None, count: int = 2, max_shear_deg: float = 20.0, rng_seed: int = 0) -> ViewSet:
    """Sample ``count`` independently sheared copies of ``image`` (and mask)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if max_shear_deg < 0:
        raise ValueError("max_shear_deg must be >= 0")
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    rng = np.random.default_rng(rng_seed)
    images, affines, angles, valid, masks = [], [], [], [], []
    for _ in range(count):
        while True:
            angle = float(rng.uniform(-max_shear_deg, max_shear_deg)) if max_shear_deg > 0 else 0.0
            affine = shear_affine(angle, h, w)
            if abs(np.linalg.det(affine[:, :2])) > 1e-8:
                break
        angles.append(angle)
        affines.append(affine)
        if angle == 0.0:
            images.append(arr.copy())
            valid.append(np.ones((h, w), dtype=bool))
            if mask is not None:
                masks.append(np.asarray(mask).copy())
            continue
        images.append(warp_image(arr, affine))
        valid.append(validity_mask(affine, (h, w)))
        if mask is not None:
            m = np.asarray(mask).astype(np.uint8) * 255
            masks.append(warp_image(m, affine) > 127)
    return ViewSet(images, affines, angles, valid, masks if mask is not None else None)


def resize_map(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a ``(H, W)`` or ``(C, H, W)`` map, align-corners false."""
    squeeze = x.dim() == 2
    t = x[None, None] if squeeze else x[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0, 0] if squeeze else out[0]


def downsample_mask(mask, spec: BackboneSpec) -> MaskPyramid:
    m = torch.as_tensor(np.asarray(mask)).to(DTYPE)
    if m.dim() != 2:
        raise ConfigurationError(f"mask must be 2-D, got shape {tuple(m.shape)}")
    if not torch.all((m == 0) | (m == 1)):
        raise ConfigurationError("mask must be binary")
    sizes = spec.level_sizes(*m.shape)
    return MaskPyramid([resize_map(m, s).clamp(0.0, 1.0) for s in sizes])
