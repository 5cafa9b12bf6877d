"""Synthetic inputs: peak fields, block atlases, lesion sets and whole cohorts.

These stand in for the template ODF, the parcellation atlases and real tumour
segmentations in tests, demos and the golden end-to-end run.
"""

import json
import os

import numpy as np

from .atlas import ParcellationAtlas, save_atlas
from .svm import DAYS_PER_MONTH
from .tracking import PeakField, TrackingParams, save_peak_field
from .volume import Volume, save_nifti


def centered_affine(dims, spacing=1.0):
    """Axis-aligned affine putting world (0, 0, 0) at the grid centre."""
    a = np.eye(4)
    a[:3, :3] *= spacing
    a[:3, 3] = -spacing * (np.asarray(dims) - 1) / 2.0
    return a


def uniform_field(dims, direction=(1.0, 0.0, 0.0), qa=1.0, affine=None, k_peaks=1):
    """Every voxel holds one peak along ``direction``; extra peak slots stay empty."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    peaks = np.zeros(tuple(dims) + (k_peaks, 3))
    peaks[..., 0, :] = d
    qas = np.zeros(tuple(dims) + (k_peaks,))
    qas[..., 0] = qa
    return PeakField(peaks, qas, np.eye(4) if affine is None else affine)


def crossing_field(dims, qa=(1.0, 0.5), affine=None):
    """Two orthogonal peaks per voxel: +x (first QA) and +y (second QA)."""
    peaks = np.zeros(tuple(dims) + (2, 3))
    peaks[..., 0, 0] = 1.0
    peaks[..., 1, 1] = 1.0
    qas = np.zeros(tuple(dims) + (2,))
    qas[..., 0], qas[..., 1] = qa
    return PeakField(peaks, qas, np.eye(4) if affine is None else affine)


def slab_atlas(dims, bounds, axis=0, affine=None):
    """Regions ``1..len(bounds)`` as slabs ``[lo, hi)`` of voxel index along ``axis``."""
    lab = np.zeros(dims, dtype=np.int64)
    idx = np.indices(dims)[axis]
    for r, (lo, hi) in enumerate(bounds, start=1):
        lab[(idx >= lo) & (idx < hi)] = r
    vol = Volume(lab, np.eye(4) if affine is None else affine, "label")
    return ParcellationAtlas(vol, len(bounds), None)


def block_atlas(dims, n_regions, affine=None):
    """Partition the grid into near-equal boxes and label the first ``n_regions``.

    The box grid is the smallest ``bx * by * bz >= n_regions`` close to cubic.
    Unlabelled boxes stay 0.
    """
    per_axis = [1, 1, 1]
    while np.prod(per_axis) < n_regions:
        per_axis[int(np.argmin(per_axis))] += 1
    edges = [np.linspace(0, d, b + 1).round().astype(int) for d, b in zip(dims, per_axis)]
    lab = np.zeros(dims, dtype=np.int64)
    r = 0
    for i in range(per_axis[0]):
        for j in range(per_axis[1]):
            for k in range(per_axis[2]):
                r += 1
                if r > n_regions:
                    break
                lab[edges[0][i]:edges[0][i + 1], edges[1][j]:edges[1][j + 1],
                    edges[2][k]:edges[2][k + 1]] = r
    vol = Volume(lab, np.eye(4) if affine is None else affine, "label")
    return ParcellationAtlas(vol, n_regions, None)


def ball(dims, center, radius):
    g = np.indices(dims).astype(np.float64)
    r2 = sum((g[a] - center[a]) ** 2 for a in range(3))
    return r2 <= radius * radius


def lesion_labels(dims, center, radius):
    """BraTS-style segmentation: necrosis core (1), enhancing rim (4), edema shell (2)."""
    seg = np.zeros(dims, dtype=np.int64)
    seg[ball(dims, center, radius)] = 2
    seg[ball(dims, center, 0.65 * radius)] = 4
    seg[ball(dims, center, 0.4 * radius)] = 1
    return seg


def random_lesion_labels(rng, dims, p_empty=0.1):
    """Random, possibly sparse or empty, disjoint lesion labels for fuzzing."""
    seg = np.zeros(dims, dtype=np.int64)
    for code in (2, 4, 1):
        if rng.random() < p_empty:
            continue
        if rng.random() < 0.5:
            c = rng.uniform(0, np.asarray(dims) - 1)
            seg[ball(dims, c, rng.uniform(0.5, min(dims) / 3))] = code
        else:
            seg[rng.random(dims) < rng.uniform(0.01, 0.2)] = code
    return seg


# survival (days) used for the synthetic cohort, one value per class
_CLASS_DAYS = {"short": 6.0 * DAYS_PER_MONTH, "mid": 12.0 * DAYS_PER_MONTH, "long": 20.0 * DAYS_PER_MONTH}


def write_cohort(root, n_subjects=12, n_non_gtr=3, dims=(30, 30, 30), n_regions=27,
                 target_tracts=400, seed=2018):
    """Write a complete synthetic cohort plus a pipeline config under ``root``.

    Tumour position encodes the survival class: the three class centres sit at
    the corners of a triangle in the y-z plane, so each class is linearly
    separable from the other two (a one-vs-rest requirement) and spatial
    features separate the GTR subjects perfectly.
    Each subject lives on its own grid, shifted by an integer number of mm
    relative to the template. Returns the config path.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    tdir = os.path.join(root, "template")
    sdir = os.path.join(root, "subjects")
    os.makedirs(tdir, exist_ok=True)
    os.makedirs(sdir, exist_ok=True)

    t_aff = centered_affine(dims)
    atlas = block_atlas(dims, n_regions, t_aff)
    save_atlas(atlas, os.path.join(tdir, "atlas.nii"))
    sub_atlas = block_atlas(dims, 21, t_aff)
    save_atlas(sub_atlas, os.path.join(tdir, "subcortical.nii"))
    field = crossing_field(dims, qa=(1.0, 0.3), affine=t_aff)
    save_peak_field(field, os.path.join(tdir, "peaks.nii"))

    classes = ["short", "mid", "long"]
    rows = ["id,age_years,survival_days,resection_status"]
    n_gtr = n_subjects - n_non_gtr
    for s in range(n_subjects):
        sid = f"sub{s + 1:02d}"
        cls = classes[s % 3]
        status = "GTR" if s < n_gtr else ("STR" if s % 2 else "NA")
        yc, zc = {"short": (7.0, 10.0), "mid": (15.0, 20.0), "long": (23.0, 10.0)}[cls]
        center = (rng.integers(8, 22), yc + rng.integers(-1, 2), zc + rng.integers(-1, 2))
        radius = float(rng.uniform(3.0, 5.0))
        shift = rng.integers(-2, 3, size=3).astype(float)

        # subject grid = template grid shifted by -shift; to_template maps it back
        s_aff = t_aff.copy()
        s_aff[:3, 3] -= shift
        to_template = np.eye(4)
        to_template[:3, 3] = shift
        sub_center = np.asarray(center, dtype=float) + shift
        seg = lesion_labels(dims, sub_center, radius)
        brain = ball(dims, (np.asarray(dims) - 1) / 2.0 + shift, min(dims) / 2.0 - 0.5)
        brain |= seg > 0

        d = os.path.join(sdir, sid)
        os.makedirs(d, exist_ok=True)
        save_nifti(Volume(seg, s_aff, "label"), os.path.join(d, "seg.nii"))
        save_nifti(Volume(brain, s_aff, "mask"), os.path.join(d, "brain.nii"))
        with open(os.path.join(d, "to_template.json"), "w", encoding="utf-8") as f:
            json.dump(to_template.tolist(), f)
            f.write("\n")
        days = _CLASS_DAYS[cls] + float(rng.integers(-20, 21))
        age = 40 + int(rng.integers(0, 40))
        surv = f"{days:.1f}"
        rows.append(f"{sid},{age},{surv},{status}")

    manifest = os.path.join(root, "manifest.csv")
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")

    tp = TrackingParams(target_tracts=target_tracts, step_mm=0.5, min_length_mm=10.0,
                        max_length_mm=300.0, rng_seed=seed)
    config = {
        "paths": {
            "atlas": "template/atlas.nii",
            "subcortical_atlas": "template/subcortical.nii",
            "peak_field": "template/peaks.nii",
            "manifest": "manifest.csv",
            "subjects_dir": "subjects",
            "output_dir": "out",
        },
        "seed": seed,
        "tracking": {k: getattr(tp, k) for k in
                     ("target_tracts", "step_mm", "angle_max_deg", "qa_threshold",
                      "min_length_mm", "max_length_mm")},
        "cv": {"folds": 3, "repeats": 10},
        "rfecv_repeats": 5,
        "svm": {"C": 1.0, "tol": 1e-4},
        "families": {"volumetric": True, "spatial": True, "volumetric_spatial": True,
                     "morphological": True, "tractographic": True},
        "train_family": "tractographic_pass_binarized",
    }
    path = os.path.join(root, "config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2)
        f.write("\n")
    return path
