"""Episodes: on-disk layout, loading/saving and procedural generation.

Directory layout::

    <episode>/meta.txt            class_id=<int>, seed=<int> (key=value lines)
    <episode>/support/img_<i>.png
    <episode>/support/mask_<i>.png
    <episode>/query/img_<j>.png
    <episode>/query/mask_<j>.png  (optional)

Masks are 8-bit grayscale; values above 127 are foreground.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigurationError, IngestionError, MissingGroundTruthError


@dataclass
class Episode:
    episode_id: str
    class_id: int
    support: list[tuple[np.ndarray, np.ndarray]]
    queries: list[tuple[np.ndarray, np.ndarray | None]]
    seed: int = 0

    def __post_init__(self):
        if len(self.support) < 1:
            raise IngestionError(f"{self.episode_id}: episode needs at least one support pair")
        for i, (img, mask) in enumerate(self.support):
            _check_pair(self.episode_id, f"support {i}", img, mask)
        for j, (img, mask) in enumerate(self.queries):
            _check_pair(self.episode_id, f"query {j}", img, mask)

    @property
    def shots(self) -> int:
        return len(self.support)

    def query_mask(self, j: int = 0) -> np.ndarray:
        mask = self.queries[j][1]
        if mask is None:
            raise MissingGroundTruthError(f"{self.episode_id}: query {j} has no ground-truth mask")
        return mask


def _check_pair(eid, what, img, mask):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise IngestionError(f"{eid}: {what} image must be uint8 (H, W, 3), got {img.dtype} {img.shape}")
    if mask is None:
        return
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise IngestionError(f"{eid}: {what} mask must be boolean")
    if mask.shape != img.shape[:2]:
        raise IngestionError(f"{eid}: {what} mask {mask.shape} does not match image {img.shape[:2]}")


def _read_meta(path: Path) -> dict:
    meta = {}
    if not path.exists():
        return meta
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def _indexed(folder: Path, prefix: str) -> dict[str, Path]:
    pat = re.compile(rf"^{prefix}_(.+)\.png$")
    out = {}
    for p in folder.glob(f"{prefix}_*.png"):
        m = pat.match(p.name)
        if m:
            out[m.group(1)] = p
    return dict(sorted(out.items()))


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def load_episode(path) -> Episode:
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root}: not an episode directory")
    meta = _read_meta(root / "meta.txt")
    support_dir, query_dir = root / "support", root / "query"
    if not support_dir.is_dir() or not query_dir.is_dir():
        raise IngestionError(f"{root}: expected support/ and query/ subdirectories")
    s_imgs, s_masks = _indexed(support_dir, "img"), _indexed(support_dir, "mask")
    if not s_imgs:
        raise IngestionError(f"{root}: no support images")
    support = []
    for key, p in s_imgs.items():
        if key not in s_masks:
            raise IngestionError(f"{root}: support image {p.name} has no mask_{key}.png")
        support.append((read_image(p), read_mask(s_masks[key])))
    q_imgs, q_masks = _indexed(query_dir, "img"), _indexed(query_dir, "mask")
    if not q_imgs:
        raise IngestionError(f"{root}: no query images")
    queries = [(read_image(p), read_mask(q_masks[k]) if k in q_masks else None) for k, p in q_imgs.items()]
    try:
        class_id = int(meta.get("class_id", 0))
        seed = int(meta.get("seed", 0))
    except ValueError as exc:
        raise IngestionError(f"{root}/meta.txt: {exc}") from None
    return Episode(meta.get("episode_id", root.name), class_id, support, queries, seed)


def save_episode(ep: Episode, path) -> Path:
    root = Path(path)
    (root / "support").mkdir(parents=True, exist_ok=True)
    (root / "query").mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(max(len(ep.support), len(ep.queries)))))
    for i, (img, mask) in enumerate(ep.support):
        Image.fromarray(img).save(root / "support" / f"img_{i:0{width}d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(root / "support" / f"mask_{i:0{width}d}.png")
    for j, (img, mask) in enumerate(ep.queries):
        Image.fromarray(img).save(root / "query" / f"img_{j:0{width}d}.png")
        if mask is not None:
            Image.fromarray(mask.astype(np.uint8) * 255).save(root / "query" / f"mask_{j:0{width}d}.png")
    (root / "meta.txt").write_text(f"episode_id={ep.episode_id}\nclass_id={ep.class_id}\nseed={ep.seed}\n")
    return root


# ---------------------------------------------------------------------------
# synthetic episodes


@dataclass(frozen=True)
class SynthSpec:
    """Procedural two-texture episodes.

    Foreground and background are oriented gratings with noise; with
    ``separation=0`` both regions are drawn from the same texture.
    """

    size: int = 64
    shots: int = 1
    queries: int = 1
    separation: float = 1.0
    fg_area: tuple[float, float] = (0.2, 0.45)
    noise: float = 0.08
    class_count: int = 1

    def __post_init__(self):
        lo, hi = self.fg_area
        if not 0 < lo <= hi < 1:
            raise ConfigurationError(f"fg_area must satisfy 0 < lo <= hi < 1, got {self.fg_area}")
        if self.size < 8 or self.shots < 1 or self.queries < 0:
            raise ConfigurationError("invalid synthetic episode size/shot/query counts")


@dataclass
class Texture:
    angle: float
    freq: float
    color: np.ndarray
    tint: np.ndarray
    contrast: float
    phase: float


def _sample_textures(rng, separation: float) -> tuple[Texture, Texture]:
    bg = Texture(
        angle=rng.uniform(0, math.pi),
        freq=rng.uniform(0.08, 0.16),
        color=rng.uniform(0.35, 0.65, 3),
        tint=rng.uniform(-1, 1, 3),
        contrast=rng.uniform(0.15, 0.25),
        phase=rng.uniform(0, 2 * math.pi),
    )
    sign = rng.choice([-1.0, 1.0])
    shift = rng.normal(0, 1, 3)
    fg = Texture(
        angle=bg.angle + sign * separation * math.pi / 2,
        freq=bg.freq * (1 + separation * rng.uniform(0.8, 1.4)),
        color=np.clip(bg.color + separation * 0.04 * shift, 0.05, 0.95),
        tint=bg.tint,
        contrast=bg.contrast,
        phase=bg.phase + separation * rng.uniform(0, 2 * math.pi),
    )
    return fg, bg


def _render(tex: Texture, size: int, rng, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * math.pi * tex.freq * (xx * math.cos(tex.angle) + yy * math.sin(tex.angle)) + tex.phase)
    tint = tex.tint / (np.linalg.norm(tex.tint) + 1e-9)
    img = tex.color[None, None, :] + tex.contrast * wave[..., None] * (0.6 + 0.4 * tint[None, None, :])
    img = img + rng.normal(0, noise, img.shape)
    return img


def _blob(size: int, rng, area: tuple[float, float]) -> np.ndarray:
    target = rng.uniform(*area)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(100):
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        theta = rng.uniform(0, math.pi)
        aspect = rng.uniform(0.6, 1.6)
        a = math.sqrt(target * size * size / math.pi * aspect)
        b = target * size * size / (math.pi * a)
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        wobble = 1 + 0.15 * np.sin(3 * np.arctan2(v, u) + rng.uniform(0, 2 * math.pi))
        mask = (u / a) ** 2 + (v / b) ** 2 <= wobble**2
        if 0 < mask.mean() < 1:
            return mask
    raise ConfigurationError("could not place a non-degenerate foreground")


def _compose(fg: Texture, bg: Texture, spec: SynthSpec, rng):
    mask = _blob(spec.size, rng, spec.fg_area)
    img = np.where(mask[..., None], _render(fg, spec.size, rng, spec.noise), _render(bg, spec.size, rng, spec.noise))
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mask


def synthesize_episode(seed: int, spec: SynthSpec = SynthSpec(), episode_id: str | None = None) -> Episode:
    """Deterministic two-texture episode; support and queries share both textures."""
    rng = np.random.default_rng(seed)
    fg, bg = _sample_textures(rng, spec.separation)
    support = [_compose(fg, bg, spec, rng) for _ in range(spec.shots)]
    queries = [_compose(fg, bg, spec, rng) for _ in range(spec.queries)]
    class_id = int(rng.integers(spec.class_count))
    return Episode(episode_id or f"synth_{seed:06d}", class_id, support, queries, seed)


def synthetic_suite(count: int, seed: int = 0, spec: SynthSpec = SynthSpec()) -> list[Episode]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [synthesize_episode(int(s), spec, f"synth_{seed}_{i:04d}") for i, s in enumerate(seeds)]


def fixed_ratio_episode(ratio_num: int, ratio_den: int, shape=(40, 50), seed: int = 0,
                        class_id: int = 0) -> Episode:
    """Episode whose query mask has foreground ratio exactly ``num/den``."""
    h, w = shape
    n = h * w
    if (n * ratio_num) % ratio_den:
        raise ConfigurationError(f"{h}x{w} cannot hold ratio {ratio_num}/{ratio_den} exactly")
    k = n * ratio_num // ratio_den
    rng = np.random.default_rng(seed)
    flat = np.zeros(n, dtype=bool)
    flat[rng.permutation(n)[:k]] = True
    mask = flat.reshape(h, w)
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    return Episode(f"ratio_{seed:04d}", class_id, [(img, mask)], [(img, mask)], seed)
