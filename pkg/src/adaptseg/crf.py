"""Two-label fully connected CRF with Gaussian and bilateral kernels.

Mean-field inference follows the usual dense-CRF update: each step adds
``w_k * (K_k Q)`` to the label scores, where ``K_k`` is a Gaussian kernel
over position (or position + color) features, including the self term,
with symmetric degree normalization.  Potts compatibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# exact kernels are materialized up to this many pixels, chunked beyond
_DENSE_LIMIT = 4096
_CHUNK = 1024


@dataclass(frozen=True)
class CrfConfig:
    sxy_gaussian: float = 1.0
    sxy_bilateral: float = 35.0
    srgb: float = 13.0
    compat_gaussian: float = 2.0
    compat_bilateral: float = 1.0
    iterations: int = 10
    temperature: float = 1.0
    backend: str = "exact"

    def __post_init__(self):
        if min(self.sxy_gaussian, self.sxy_bilateral, self.srgb) <= 0:
            raise ValueError("CRF standard deviations must be positive")
        if self.iterations < 1:
            raise ValueError("CRF needs at least one iteration")
        if self.backend not in ("exact", "pydensecrf", "auto"):
            raise ValueError(f"unknown CRF backend {self.backend!r}")


def _features(image: np.ndarray, cfg: CrfConfig):
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    rgb = image.reshape(-1, 3).astype(np.float64)
    gauss = pos / cfg.sxy_gaussian
    bilat = np.concatenate([pos / cfg.sxy_bilateral, rgb / cfg.srgb], axis=1)
    return gauss, bilat


def _kernel_rows(f: np.ndarray, rows: slice) -> np.ndarray:
    a = f[rows]
    d2 = (a * a).sum(1)[:, None] + (f * f).sum(1)[None, :] - 2 * a @ f.T
    return np.exp(-0.5 * np.maximum(d2, 0.0))


class _Kernel:
    """Symmetrically normalized dense kernel ``D^-1/2 K D^-1/2``."""

    def __init__(self, f: np.ndarray):
        self.f = f
        n = f.shape[0]
        self.dense = None
        if n <= _DENSE_LIMIT:
            self.dense = _kernel_rows(f, slice(0, n))
            deg = self.dense.sum(1)
        else:
            deg = np.concatenate([_kernel_rows(f, slice(i, i + _CHUNK)).sum(1) for i in range(0, n, _CHUNK)])
        self.norm = 1.0 / np.sqrt(deg + 1e-20)
        if self.dense is not None:
            self.dense *= self.norm[:, None]
            self.dense *= self.norm[None, :]

    def apply(self, q: np.ndarray) -> np.ndarray:
        if self.dense is not None:
            return self.dense @ q
        x = q * self.norm[:, None]
        n = self.f.shape[0]
        out = np.concatenate([_kernel_rows(self.f, slice(i, i + _CHUNK)) @ x for i in range(0, n, _CHUNK)])
        return out * self.norm[:, None]


class _Pairwise:
    """Weighted sum of normalized kernels, merged into one matrix when dense."""

    def __init__(self, terms):
        self.terms = [(w, _Kernel(f)) for w, f in terms]
        if all(k.dense is not None for _, k in self.terms):
            self.merged = self.terms[0][0] * self.terms[0][1].dense
            for w, k in self.terms[1:]:
                self.merged += w * k.dense
            for _, k in self.terms:
                k.dense = None
        else:
            self.merged = None

    def apply(self, q: np.ndarray) -> np.ndarray:
        if self.merged is not None:
            return self.merged @ q
        return sum(w * k.apply(q) for w, k in self.terms)


def _softmax(e: np.ndarray) -> np.ndarray:
    e = e - e.max(axis=1, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=1, keepdims=True)


def dense_crf(image: np.ndarray, prob: np.ndarray, cfg: CrfConfig = CrfConfig()) -> np.ndarray:
    """Mean-field inference; ``prob`` is ``(H, W, 2)`` unary label probabilities.

    Returns the ``(H, W, 2)`` marginals.
    """
    h, w = image.shape[:2]
    if prob.shape != (h, w, 2):
        raise ValueError(f"probability map {prob.shape} does not match image {(h, w)}")
    unary = -np.log(np.clip(prob.reshape(-1, 2), 1e-5, 1.0))
    gauss, bilat = _features(np.asarray(image), cfg)
    pairwise = _Pairwise([(cfg.compat_gaussian, gauss), (cfg.compat_bilateral, bilat)])
    q = _softmax(-unary)
    for _ in range(cfg.iterations):
        q = _softmax(-unary + pairwise.apply(q))
    return q.reshape(h, w, 2)


def _pydensecrf(image, prob, cfg: CrfConfig) -> np.ndarray:
    import pydensecrf.densecrf as dcrf

    h, w = image.shape[:2]
    d = dcrf.DenseCRF2D(w, h, 2)
    unary = -np.log(np.clip(prob.reshape(-1, 2).T, 1e-5, 1.0)).astype(np.float32)
    d.setUnaryEnergy(np.ascontiguousarray(unary))
    d.addPairwiseGaussian(sxy=cfg.sxy_gaussian, compat=cfg.compat_gaussian)
    d.addPairwiseBilateral(sxy=cfg.sxy_bilateral, srgb=cfg.srgb,
                           rgbim=np.ascontiguousarray(image, dtype=np.uint8), compat=cfg.compat_bilateral)
    q = np.array(d.inference(cfg.iterations))
    return q.T.reshape(h, w, 2)


def have_pydensecrf() -> bool:
    try:
        import pydensecrf.densecrf  # noqa: F401
    except ImportError:
        return False
    return True


def crf_marginals(image, prob, cfg: CrfConfig = CrfConfig()) -> np.ndarray:
    backend = cfg.backend
    if backend == "auto":
        n = image.shape[0] * image.shape[1]
        backend = "pydensecrf" if n > _DENSE_LIMIT and have_pydensecrf() else "exact"
    if backend == "pydensecrf":
        return _pydensecrf(np.asarray(image), prob, cfg)
    return dense_crf(np.asarray(image), prob, cfg)
