"""Deterministic streamline tracking over a peak-direction field.

Tracking is bidirectional Euler integration with nearest-voxel peak lookup:
at every step the peak closest in angle to the incoming direction (after sign
flipping) is followed for ``step_mm``. A branch stops when no peak lies within
``angle_max_deg``, the chosen peak's QA is below ``qa_threshold``, the next
point leaves the grid, or the branch reaches half of ``max_length_mm``.

Seeds come from a counter-based generator so that seed ``i`` depends only on
``(rng_seed, i)``; together with per-seed independent tracking this makes the
output identical for any worker count.
"""

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, DataError, FormatError, SeedError
from .volume import (Grid, check_affine, load_nifti_channels,
                     save_nifti_channels, spacing_from_affine)

SEED_CHUNK = 4096
TRACK_CHUNK = 1024
STREAMLINE_MAGIC = b"TRK0"


@dataclass(frozen=True)
class TrackingParams:
    target_tracts: int = 1_000_000
    step_mm: float = 0.5
    angle_max_deg: float = 60.0
    qa_threshold: float = 0.05
    min_length_mm: float = 10.0
    max_length_mm: float = 300.0
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.target_tracts) < 0:
            raise ConfigError("target_tracts must be >= 0")
        if not self.step_mm > 0:
            raise ConfigError("step_mm must be positive")
        if not 0 < self.angle_max_deg <= 90:
            raise ConfigError("angle_max_deg must lie in (0, 90]")
        if self.qa_threshold < 0:
            raise ConfigError("qa_threshold must be non-negative")
        if self.min_length_mm < 0 or not self.max_length_mm > 0:
            raise ConfigError("track lengths must be non-negative / positive")
        if not self.min_length_mm < self.max_length_mm:
            raise ConfigError("min_length_mm must be smaller than max_length_mm")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")

    def check_spacing(self, spacing):
        if self.step_mm > min(spacing) + 1e-12:
            raise ConfigError(f"step_mm={self.step_mm} exceeds the smallest voxel size {min(spacing)}")

    @property
    def max_branch_steps(self):
        return int(math.floor(self.max_length_mm / 2.0 / self.step_mm + 1e-9))


@dataclass(frozen=True)
class PeakField:
    """Per-voxel fibre directions (world frame, unit length) with QA scores.

    ``peaks`` has shape ``(X, Y, Z, K, 3)`` and ``qa`` ``(X, Y, Z, K)``.
    Missing peaks are zero vectors with QA 0.
    """

    peaks: np.ndarray = field(repr=False)
    qa: np.ndarray = field(repr=False)
    affine: np.ndarray = field(repr=False)

    def __post_init__(self):
        peaks = np.ascontiguousarray(self.peaks, dtype=np.float64)
        qa = np.ascontiguousarray(self.qa, dtype=np.float64)
        if peaks.ndim != 5 or peaks.shape[-1] != 3 or qa.shape != peaks.shape[:4]:
            raise DataError(f"bad peak field shapes {peaks.shape} / {qa.shape}")
        if np.any(qa < 0) or not np.all(np.isfinite(qa)):
            raise DataError("QA values must be finite and non-negative")
        norms = np.linalg.norm(peaks, axis=-1)
        present = norms > 0
        if np.any(np.abs(norms[present] - 1.0) > 1e-6):
            raise DataError("stored peaks must have unit norm")
        if np.any(qa[~present] != 0):
            raise DataError("absent peaks must have QA 0")
        affine = check_affine(self.affine)
        for a in (peaks, qa, affine):
            a.setflags(write=False)
        object.__setattr__(self, "peaks", peaks)
        object.__setattr__(self, "qa", qa)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self):
        return self.qa.shape[:3]

    @property
    def k_peaks(self):
        return self.qa.shape[3]

    @property
    def grid(self):
        return Grid(tuple(self.dims), spacing_from_affine(self.affine), self.affine)


def save_peak_field(pf, path):
    """Pack as a 4-D float32 NIfTI with ``3K + K`` channels plus a JSON sidecar."""
    x, y, z, k = pf.qa.shape
    packed = np.concatenate([pf.peaks.reshape(x, y, z, 3 * k), pf.qa], axis=3)
    save_nifti_channels(packed, pf.affine, path, dtype=np.float32)
    with open(_sidecar(path), "w", encoding="utf-8") as f:
        json.dump({"k_peaks": k}, f)
        f.write("\n")


def load_peak_field(path):
    data, affine = load_nifti_channels(path)
    try:
        with open(_sidecar(path), encoding="utf-8") as f:
            k = int(json.load(f)["k_peaks"])
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: missing or invalid peak sidecar: {exc}") from exc
    if data.shape[3] != 4 * k:
        raise FormatError(f"{path}: expected {4 * k} channels for K={k}, got {data.shape[3]}")
    x, y, z = data.shape[:3]
    peaks = data[..., :3 * k].reshape(x, y, z, k, 3)
    # float32 storage: renormalise so the unit-norm invariant holds at 1e-6
    norms = np.linalg.norm(peaks, axis=-1, keepdims=True)
    peaks = np.divide(peaks, norms, out=np.zeros_like(peaks), where=norms > 0)
    return PeakField(peaks, data[..., 3 * k:], affine)


def _sidecar(path):
    path = os.fspath(path)
    return (path[:-4] if path.endswith(".nii") else path) + ".json"


@dataclass(frozen=True)
class Streamline:
    points: np.ndarray
    seed_index: int

    @property
    def length(self):
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


class StreamlineSet:
    """Packed sequence of streamlines: flat ``(P, 3)`` points plus offsets."""

    def __init__(self, points, offsets, seed_index=None):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        n = len(self.offsets) - 1
        if seed_index is None:
            seed_index = np.full(n, -1, dtype=np.int64)
        self.seed_index = np.asarray(seed_index, dtype=np.int64)

    @classmethod
    def from_list(cls, streamlines):
        pts = [np.asarray(s.points if isinstance(s, Streamline) else s, dtype=np.float64).reshape(-1, 3)
               for s in streamlines]
        seeds = [s.seed_index if isinstance(s, Streamline) else -1 for s in streamlines]
        offsets = np.zeros(len(pts) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(p) for p in pts])
        flat = np.concatenate(pts) if pts else np.zeros((0, 3))
        return cls(flat, offsets, seeds)

    def __len__(self):
        return len(self.offsets) - 1

    def __getitem__(self, i):
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return Streamline(self.points[self.offsets[i]:self.offsets[i + 1]], int(self.seed_index[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n_points(self):
        return np.diff(self.offsets)

    def equals(self, other):
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.seed_index, other.seed_index))


def save_streamlines(sset, path):
    """Little-endian: ``TRK0``, u32 count, then per tract u32 n + n*3 float32."""
    parts = [STREAMLINE_MAGIC, struct.pack("<I", len(sset))]
    pts32 = sset.points.astype("<f4")
    for i, n in enumerate(sset.n_points):
        parts.append(struct.pack("<I", int(n)))
        parts.append(pts32[sset.offsets[i]:sset.offsets[i + 1]].tobytes())
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def load_streamlines(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != STREAMLINE_MAGIC or len(raw) < 8:
        raise FormatError(f"{path}: not a streamline file")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    chunks, offsets = [], [0]
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        chunks.append(np.frombuffer(raw, dtype="<f4", count=3 * n, offset=pos).reshape(n, 3))
        pos += 12 * n
        offsets.append(offsets[-1] + n)
    if pos != len(raw):
        raise FormatError(f"{path}: trailing or truncated data")
    flat = np.concatenate(chunks).astype(np.float64) if chunks else np.zeros((0, 3))
    return StreamlineSet(flat, offsets)


def seed_points(mask, params, start=0, count=None):
    """World-space seeds drawn uniformly from the union of mask voxel cubes.

    Seed ``i`` is generated from a Philox stream keyed by ``(rng_seed, i //
    SEED_CHUNK)``, so any subrange ``[start, start + count)`` can be produced
    independently.
    """
    idx = np.argwhere(mask.data.astype(bool))
    if len(idx) == 0:
        raise SeedError("cannot seed from an empty mask")
    n = int(params.target_tracts) if count is None else int(count)
    if n == 0:
        return np.zeros((0, 3))
    first_chunk = start // SEED_CHUNK
    last_chunk = (start + n - 1) // SEED_CHUNK
    draws = []
    for c in range(first_chunk, last_chunk + 1):
        key = int(params.rng_seed) | (c << 64)
        draws.append(np.random.Generator(np.random.Philox(key=key)).random((SEED_CHUNK, 4)))
    u = np.concatenate(draws)[start - first_chunk * SEED_CHUNK:][:n]
    pick = np.minimum((u[:, 0] * len(idx)).astype(np.int64), len(idx) - 1)
    vox = idx[pick] + (u[:, 1:] - 0.5)
    return vox @ mask.affine[:3, :3].T + mask.affine[:3, 3]


@numba.njit(cache=True, nogil=True)
def _voxel_of(p, w2v, dims, out):
    for a in range(3):
        c = w2v[a, 0] * p[0] + w2v[a, 1] * p[1] + w2v[a, 2] * p[2] + w2v[a, 3]
        i = int(math.floor(c + 0.5))
        if i < 0 or i >= dims[a]:
            return False
        out[a] = i
    return True


@numba.njit(cache=True, nogil=True)
def _branch(seed, d, peaks, qa, w2v, dims, step, cos_max, qa_thr, max_steps, buf):
    """Track from ``seed`` starting along ``d``; fills ``buf`` and returns the point count."""
    vox = np.empty(3, dtype=np.int64)
    buf[0, :] = seed
    n = 1
    cur = seed.copy()
    incoming = d.copy()
    newdir = d.copy()
    K = peaks.shape[3]
    for s in range(max_steps):
        if s > 0:
            _voxel_of(cur, w2v, dims, vox)
            best = -1
            best_cos = -1.0
            sign = 1.0
            for k in range(K):
                px = peaks[vox[0], vox[1], vox[2], k, 0]
                py = peaks[vox[0], vox[1], vox[2], k, 1]
                pz = peaks[vox[0], vox[1], vox[2], k, 2]
                if px == 0.0 and py == 0.0 and pz == 0.0:
                    continue
                c = px * incoming[0] + py * incoming[1] + pz * incoming[2]
                sg = 1.0
                if c < 0.0:
                    c = -c
                    sg = -1.0
                if c > best_cos:
                    best_cos = c
                    best = k
                    sign = sg
            if best < 0 or best_cos < cos_max:
                break
            if qa[vox[0], vox[1], vox[2], best] < qa_thr:
                break
            for a in range(3):
                newdir[a] = sign * peaks[vox[0], vox[1], vox[2], best, a]
        nxt = cur + step * newdir
        if not _voxel_of(nxt, w2v, dims, vox):
            break
        buf[n, :] = nxt
        n += 1
        cur = nxt
        incoming[:] = newdir
    return n


@numba.njit(cache=True, nogil=True)
def _track_batch(seeds, peaks, qa, w2v, dims, step, cos_max, qa_thr, max_steps, min_points):
    m = seeds.shape[0]
    fwd = np.empty((max_steps + 1, 3))
    bwd = np.empty((max_steps + 1, 3))
    cap = max(16, m * 8)
    out = np.empty((cap, 3))
    counts = np.zeros(m, dtype=np.int64)
    vox = np.empty(3, dtype=np.int64)
    total = 0
    K = peaks.shape[3]
    for i in range(m):
        seed = seeds[i]
        _voxel_of(seed, w2v, dims, vox)
        best = -1
        best_qa = -1.0
        for k in range(K):
            if qa[vox[0], vox[1], vox[2], k] > best_qa and (
                    peaks[vox[0], vox[1], vox[2], k, 0] != 0.0
                    or peaks[vox[0], vox[1], vox[2], k, 1] != 0.0
                    or peaks[vox[0], vox[1], vox[2], k, 2] != 0.0):
                best_qa = qa[vox[0], vox[1], vox[2], k]
                best = k
        if best < 0 or best_qa < qa_thr or best_qa <= 0.0:
            continue
        d = peaks[vox[0], vox[1], vox[2], best].copy()
        nf = _branch(seed, d, peaks, qa, w2v, dims, step, cos_max, qa_thr, max_steps, fwd)
        nb = _branch(seed, -d, peaks, qa, w2v, dims, step, cos_max, qa_thr, max_steps, bwd)
        n = nb + nf - 1
        if n < min_points:
            continue
        while total + n > cap:
            cap *= 2
            grown = np.empty((cap, 3))
            grown[:total] = out[:total]
            out = grown
        for j in range(nb):
            out[total + j] = bwd[nb - 1 - j]
        for j in range(1, nf):
            out[total + nb - 1 + j] = fwd[j]
        total += n
        counts[i] = n
    return out[:total].copy(), counts


def _kernel_args(field, params):
    w2v = np.linalg.inv(field.affine)
    dims = np.array(field.dims, dtype=np.int64)
    cos_max = math.cos(math.radians(params.angle_max_deg)) - 1e-12
    # shortest accepted track, in points: (n - 1) * step >= min_length
    min_points = int(math.ceil(params.min_length_mm / params.step_mm - 1e-9)) + 1
    return (field.peaks, field.qa, w2v, dims, float(params.step_mm), cos_max,
            float(params.qa_threshold), params.max_branch_steps, max(min_points, 2))


def _check_seeds(seeds, field):
    w2v = np.linalg.inv(field.affine)
    v = np.floor(seeds @ w2v[:3, :3].T + w2v[:3, 3] + 0.5)
    bad = np.any((v < 0) | (v >= np.array(field.dims)), axis=1)
    if np.any(bad):
        raise SeedError(f"seed {seeds[np.argmax(bad)]} lies outside the peak field grid")


def track_one(seed, field, params):
    """Track a single seed. Returns a :class:`Streamline` or None if rejected."""
    params.check_spacing(field.grid.spacing)
    seeds = np.asarray(seed, dtype=np.float64).reshape(1, 3)
    _check_seeds(seeds, field)
    pts, counts = _track_batch(seeds, *_kernel_args(field, params))
    if counts[0] == 0:
        return None
    return Streamline(pts, 0)


def track_seeds(seeds, field, params, workers=1):
    """Track every seed; output keeps seed order and drops rejected seeds."""
    params.check_spacing(field.grid.spacing)
    seeds = np.ascontiguousarray(seeds, dtype=np.float64).reshape(-1, 3)
    if len(seeds) == 0:
        return StreamlineSet(np.zeros((0, 3)), [0], [])
    _check_seeds(seeds, field)
    args = _kernel_args(field, params)
    chunks = [seeds[i:i + TRACK_CHUNK] for i in range(0, len(seeds), TRACK_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _track_batch(c, *args), chunks))
    else:
        results = [_track_batch(c, *args) for c in chunks]
    pts = np.concatenate([r[0] for r in results])
    counts = np.concatenate([r[1] for r in results])
    keep = np.nonzero(counts)[0]
    offsets = np.zeros(len(keep) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(counts[keep])
    return StreamlineSet(pts, offsets, keep)


def track_all(mask, field, params, workers=1):
    """Seed ``params.target_tracts`` points in ``mask`` and track them all.

    ``mask`` must already live on the peak field grid (see
    :func:`tractosurv.volume.resample`).
    """
    if not mask.grid.same_as(field.grid):
        raise DataError("tumor mask must be resampled onto the peak field grid before tracking")
    if int(params.target_tracts) == 0:
        return StreamlineSet(np.zeros((0, 3)), [0], [])
    return track_seeds(seed_points(mask, params), field, params, workers=workers)
