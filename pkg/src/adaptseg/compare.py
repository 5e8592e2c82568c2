"""Dense query-support comparison by attention-weighted mask aggregation."""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ConfigurationError


def flatten_features(x: torch.Tensor) -> torch.Tensor:
    """``(d, H, W)`` -> ``(H*W, d)``, row-major over positions."""
    return x.reshape(x.shape[0], -1).T


def concat_shots(features, masks, valid=None):
    """Stack k support volumes and masks along the spatial axis.

    Returns ``K`` of shape ``(k*H*W, d)`` and ``V`` of shape ``(k*H*W,)`` in
    shot order.  Rows flagged invalid in ``valid`` are dropped.
    """
    if len(features) == 0 or len(features) != len(masks):
        raise ConfigurationError("need k >= 1 support volumes with one mask each")
    shape = tuple(features[0].shape)
    keys, values = [], []
    for i, (f, m) in enumerate(zip(features, masks)):
        if tuple(f.shape) != shape:
            raise ConfigurationError(f"shot {i} has shape {tuple(f.shape)}, expected {shape}")
        m = torch.as_tensor(m, dtype=f.dtype)
        if tuple(m.shape) != shape[1:]:
            raise ConfigurationError(f"mask {i} shape {tuple(m.shape)} does not match {shape[1:]}")
        k, v = flatten_features(f), m.reshape(-1)
        if valid is not None and valid[i] is not None:
            keep = torch.as_tensor(np.asarray(valid[i]).reshape(-1))
            k, v = k[keep], v[keep]
        keys.append(k)
        values.append(v)
    return torch.cat(keys), torch.cat(values)


def correlation_map(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, shape=None) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` for flattened query/support features.

    ``q`` is ``(Nq, d)`` (or a ``(d, H, W)`` volume, in which case the
    output is reshaped to ``(H, W)``), ``k`` is ``(Nk, d)``, ``v`` is ``(Nk,)``.
    """
    if q.dim() == 3:
        shape = tuple(q.shape[1:])
        q = flatten_features(q)
    if k.shape[0] == 0:
        raise ConfigurationError("empty support")
    if q.shape[1] != k.shape[1] or q.shape[1] == 0:
        raise ConfigurationError(f"channel mismatch: query {q.shape[1]}, support {k.shape[1]}")
    if v.shape != (k.shape[0],):
        raise ConfigurationError(f"V has shape {tuple(v.shape)}, expected ({k.shape[0]},)")
    logits = q @ k.T / math.sqrt(q.shape[1])
    attn = torch.softmax(logits, dim=1)  # max-subtracted internally
    out = attn @ v.to(attn.dtype)
    return out.reshape(shape) if shape is not None else out
