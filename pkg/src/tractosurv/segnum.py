"""Numerical kernels from the segmentation side of the pipeline.

Group normalisation forward pass, hard-negative voxel selection, ensemble
probability averaging and label decoding. All operate on plain numpy arrays;
feature maps are ``(n, c, d, h, w)``.
"""

import numpy as np

from .errors import DataError, SchemaError

BRATS_LABELS = (0, 1, 2, 4)
EMPTY_POSITIVE_FLOOR = 128


def group_norm_forward(x, groups=4, gamma=None, beta=None, eps=1e-5):
    """Normalise each (sample, channel group) to zero mean and unit variance.

    Statistics use the population variance over the group's channels and the
    full spatial extent. ``gamma``/``beta`` are per-channel (default 1 and 0).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise SchemaError(f"feature map needs at least (n, c) axes, got shape {x.shape}")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise SchemaError(f"{c} channels cannot be split into {groups} groups")
    gamma = np.ones(c) if gamma is None else np.asarray(gamma, dtype=np.float64)
    beta = np.zeros(c) if beta is None else np.asarray(beta, dtype=np.float64)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise SchemaError("gamma and beta must have one entry per channel")

    g = x.reshape(n, groups, -1)
    mean = g.mean(axis=2, keepdims=True)
    var = g.var(axis=2, keepdims=True)
    xhat = ((g - mean) / np.sqrt(var + eps)).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def hard_negative_select(loss, positive, ratio=3.0, floor_count=EMPTY_POSITIVE_FLOOR):
    """Boolean mask of voxels kept for back-propagation.

    All positives are kept. Among negatives, the ``min(floor(ratio * P), N_neg)``
    with the largest loss are kept, ties resolved towards the lowest flat
    index. With no positives, ``min(floor_count, N_neg)`` negatives are kept.
    The pool is whatever array is passed in: one image or a whole batch.
    """
    loss = np.asarray(loss, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if loss.shape != positive.shape:
        raise SchemaError(f"loss {loss.shape} and label {positive.shape} grids differ")
    if np.any(loss < 0) or not np.all(np.isfinite(loss)):
        raise DataError("losses must be finite and non-negative")
    flat_loss = loss.ravel()
    flat_pos = positive.ravel()
    n_pos = int(flat_pos.sum())
    neg_idx = np.nonzero(~flat_pos)[0]
    quota = int(np.floor(ratio * n_pos)) if n_pos > 0 else int(floor_count)
    quota = min(quota, len(neg_idx))
    # stable sort on -loss keeps equal losses in ascending index order
    order = np.argsort(-flat_loss[neg_idx], kind="stable")
    keep = flat_pos.copy()
    keep[neg_idx[order[:quota]]] = True
    return keep.reshape(loss.shape)


def ensemble_average(maps, atol=1e-3, axis=1):
    """Elementwise mean of probability maps (channels on ``axis``)."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise DataError("ensemble needs at least one probability map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise SchemaError(f"probability map shapes differ: {shape} vs {m.shape}")
    for m in maps:
        if np.any(np.abs(m.sum(axis=axis) - 1.0) > atol):
            raise DataError("probability maps must sum to 1 over channels")
    return np.mean(np.stack(maps), axis=0)


def decode_labels(p, label_values=BRATS_LABELS, axis=0):
    """Per-voxel argmax over the channel ``axis`` mapped to ``label_values``.

    Use ``axis=0`` for a single ``(c, d, h, w)`` map and ``axis=1`` for a
    batch. Ties go to the lowest channel.
    """
    p = np.asarray(p)
    label_values = np.asarray(label_values)
    if p.shape[axis] != len(label_values):
        raise SchemaError(f"{p.shape[axis]} channels but {len(label_values)} label values")
    return label_values[np.argmax(p, axis=axis)]


def one_hot(labels, label_values=BRATS_LABELS):
    labels = np.asarray(labels)
    out = np.zeros((len(label_values),) + labels.shape)
    for i, v in enumerate(label_values):
        out[i] = labels == v
    return out
