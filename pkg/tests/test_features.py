import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tractosurv.atlas import ParcellationAtlas
from tractosurv.errors import DegenerateInputError, GridError, SchemaError
from tractosurv.features import (FeatureRow, FeatureTable, LesionSet, morphological_features,
                                 morphological_feature_names, principal_axes, spatial_features,
                                 spatial_feature_names, surface_irregularity,
                                 volumetric_feature_names, volumetric_features,
                                 volumetric_spatial_feature_names, volumetric_spatial_features)
from tractosurv.phantoms import ball, block_atlas, centered_affine, random_lesion_labels
from tractosurv.volume import Volume

GOLDEN = Path(__file__).parent / "golden" / "feature_schema.json"


def _lesions(seg, affine=None):
    return LesionSet.from_labels(Volume(seg, np.eye(4) if affine is None else affine, "label"))


def _brain(dims, affine=None):
    return Volume(np.ones(dims, bool), np.eye(4) if affine is None else affine, "mask")


def _feat(row):
    return dict(zip(row.names, row.values))


def test_schema_counts():
    assert len(volumetric_feature_names()) == 19
    assert len(spatial_feature_names()) == 9
    assert len(volumetric_spatial_feature_names(21)) == 78
    assert len(morphological_feature_names()) == 19


def test_schema_golden():
    g = json.loads(GOLDEN.read_text(encoding="utf-8"))
    assert g["volumetric"] == list(volumetric_feature_names())
    assert g["spatial"] == list(spatial_feature_names())
    assert g["volumetric_spatial"] == list(volumetric_spatial_feature_names(21))
    assert g["morphological"] == list(morphological_feature_names())


def test_lesions_must_be_disjoint():
    a = Volume(np.ones((2, 2, 2), bool), np.eye(4), "mask")
    z = a.with_data(np.zeros((2, 2, 2), bool))
    with pytest.raises(GridError):
        LesionSet(a, a, z)


def test_single_compartment_ratios():
    seg = np.zeros((6, 6, 6), int)
    seg[2:4, 2:4, 2:4] = 4
    f = _feat(volumetric_features(_lesions(seg), _brain((6, 6, 6))))
    assert f["ratio_et_wt"] == f["ratio_et_tc"] == f["ratio_tc_wt"] == 1.0


def test_empty_lesions_volumetric():
    f = volumetric_features(_lesions(np.zeros((4, 4, 4), int)), _brain((4, 4, 4)))
    d = _feat(f)
    assert d.pop("vol_brain") == 64.0
    assert not any(d.values())


def test_empty_brain():
    with pytest.raises(DegenerateInputError):
        volumetric_features(_lesions(np.zeros((4, 4, 4), int)),
                            Volume(np.zeros((4, 4, 4), bool), np.eye(4), "mask"))


def test_volumetric_counting_oracle(rng):
    aff = np.diag([1.5, 2.0, 0.5, 1.0])
    seg = random_lesion_labels(rng, (10, 9, 8), p_empty=0.0)
    brain = Volume(rng.random((10, 9, 8)) < 0.7, aff, "mask")
    f = _feat(volumetric_features(_lesions(seg, aff), brain))
    vv = 1.5 * 2.0 * 0.5
    n = {c: sum(1 for x in seg.ravel() if x == c) for c in (1, 2, 4)}
    assert f["vol_necrosis_net"] == n[1] * vv
    assert f["vol_edema"] == n[2] * vv
    assert f["vol_et"] == n[4] * vv
    assert f["vol_tc"] == (n[1] + n[4]) * vv
    assert f["vol_wt"] == (n[1] + n[2] + n[4]) * vv
    assert f["vol_brain"] == int(brain.data.sum()) * vv


def test_volumetric_doubling(rng):
    seg = random_lesion_labels(rng, (6, 7, 8), p_empty=0.0)
    f1 = volumetric_features(_lesions(seg), _brain(seg.shape)).values
    seg2 = np.repeat(seg, 2, axis=0)
    f2 = volumetric_features(_lesions(seg2), _brain(seg2.shape)).values
    assert np.allclose(f2[:6], 2 * f1[:6])
    assert np.allclose(f2[6:], f1[6:])


def test_spatial_single_voxel():
    aff = np.eye(4)
    aff[:3, 3] = [5, 15, 25]
    seg = np.zeros((10, 10, 10), int)
    seg[5, 5, 5] = 2
    v = spatial_features(_lesions(seg, aff)).values
    assert v.tolist() == [10, 20, 30] * 3  # empty TC/ET fall back to WT


def test_spatial_midpoint_and_to_mni():
    seg = np.zeros((10, 10, 10), int)
    seg[2, 4, 4] = seg[6, 4, 4] = 4
    v = spatial_features(_lesions(seg)).values
    assert v[:3].tolist() == [4, 4, 4]
    t = np.eye(4)
    t[:3, 3] = [1, -2, 3]
    assert spatial_features(_lesions(seg), to_mni=t).values[6:].tolist() == [5, 2, 7]


def test_spatial_oracle(rng):
    seg = random_lesion_labels(rng, (9, 8, 7), p_empty=0.0)
    aff = centered_affine((9, 8, 7), 1.25)
    v = spatial_features(_lesions(seg, aff)).values
    for k, codes in enumerate(((1, 2, 4), (1, 4), (4,))):
        pts = [aff[:3, :3] @ np.array(i) + aff[:3, 3] for i in np.ndindex(seg.shape) if seg[i] in codes]
        assert np.allclose(v[3 * k:3 * k + 3], np.mean(pts, axis=0), atol=1e-9)


def test_spatial_empty_wt():
    with pytest.raises(DegenerateInputError):
        spatial_features(_lesions(np.zeros((3, 3, 3), int)))


def _atlas(lab, affine, n=21):
    return ParcellationAtlas(Volume(lab, affine, "label"), n, None)


def test_volumetric_spatial_single_label_right():
    dims = (30, 10, 10)
    aff = centered_affine(dims)  # x from -14.5 to 14.5
    lab = np.zeros(dims, int)
    lab[25:, :, :] = 7
    seg = np.zeros(dims, int)
    seg[26:28, 4:6, 4:6] = 2
    f = _feat(volumetric_spatial_features(_lesions(seg, aff), _atlas(lab, aff)))
    nz = {k for k, v in f.items() if v}
    assert nz == {"vs_edema_label_7", "vs_edema_right", "vs_edema_total"}
    assert f["vs_edema_label_7"] == 8.0


def test_volumetric_spatial_empty():
    dims = (6, 6, 6)
    f = volumetric_spatial_features(_lesions(np.zeros(dims, int)), _atlas(np.zeros(dims, int), np.eye(4)))
    assert len(f.values) == 78 and not f.values.any()


def test_volumetric_spatial_grid_mismatch():
    with pytest.raises(GridError):
        volumetric_spatial_features(_lesions(np.zeros((6, 6, 6), int)),
                                    _atlas(np.zeros((6, 6, 5), int), np.eye(4)))


def test_volumetric_spatial_binning_oracle(rng):
    dims = (14, 8, 6)
    aff = centered_affine(dims, 1.5)
    lab = rng.integers(0, 22, dims)
    seg = random_lesion_labels(rng, dims, p_empty=0.0)
    f = _feat(volumetric_spatial_features(_lesions(seg, aff), _atlas(lab, aff)))
    vv = 1.5 ** 3
    for t, code in (("necrosis_net", 1), ("edema", 2), ("et", 4)):
        bins = {}
        for i in np.ndindex(dims):
            if seg[i] != code:
                continue
            x = aff[0, 0] * i[0] + aff[0, 3]
            side = "left" if x < -5 else ("right" if x > 5 else "middle")
            for b in (f"label_{lab[i]}", side, "total"):
                bins[b] = bins.get(b, 0) + vv
        for b in [f"label_{k}" for k in range(22)] + ["left", "middle", "right", "total"]:
            assert f[f"vs_{t}_{b}"] == pytest.approx(bins.get(b, 0.0), abs=1e-9)
        assert sum(f[f"vs_{t}_label_{k}"] for k in range(22)) == pytest.approx(f[f"vs_{t}_total"])


@pytest.mark.parametrize("radius", [8, 12, 20])
def test_ball_irregularity_near_one(radius):
    n = 2 * radius + 5
    m = Volume(ball((n, n, n), (n // 2,) * 3, radius), np.eye(4), "mask")
    assert abs(surface_irregularity(m) - 1.0) <= 0.2


def test_cube_irregularity_larger_than_ball():
    m = np.zeros((24, 24, 24), bool)
    m[4:20, 4:20, 4:20] = True
    b = ball((24, 24, 24), (12, 12, 12), 9)
    assert surface_irregularity(Volume(m, np.eye(4), "mask")) > \
        surface_irregularity(Volume(b, np.eye(4), "mask"))


def test_single_voxel_axes():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    major, minor = principal_axes(Volume(m, np.eye(4), "mask"))
    assert major == minor


def test_axes_permutation_invariant(rng):
    m = rng.random((7, 9, 5)) < 0.3
    a = principal_axes(Volume(m, np.eye(4), "mask"))
    b = principal_axes(Volume(np.transpose(m, (2, 0, 1)), np.eye(4), "mask"))
    assert np.allclose(a, b, atol=1e-9)


def test_axes_line_oracle():
    m = np.zeros((11, 3, 3), bool)
    m[:, 1, 1] = True
    major, minor = principal_axes(Volume(m, np.diag([2.0, 1, 1, 1]), "mask"))
    assert major == pytest.approx(2 * np.sqrt(np.var(np.arange(11) * 2.0)))
    assert minor == pytest.approx(0.0, abs=1e-9)


def test_morphological_empty_region_zeros():
    seg = np.zeros((12, 12, 12), int)
    seg[ball((12, 12, 12), (6, 6, 6), 4)] = 2
    f = _feat(morphological_features(_lesions(seg)))
    for r in ("necrosis_net", "et", "tc"):
        assert f[f"major_axis_{r}"] == f[f"minor_axis_{r}"] == f[f"surface_irregularity_{r}"] == 0
    assert f["elongation_et"] == 0 and f["sphericity_wt"] > 0


def test_morphological_empty_wt():
    with pytest.raises(DegenerateInputError):
        morphological_features(_lesions(np.zeros((4, 4, 4), int)))


def test_all_families_finite_on_random_lesions():
    rng = np.random.default_rng(2024)
    dims = (16, 14, 12)
    aff = centered_affine(dims, 1.5)
    atlas = _atlas(rng.integers(0, 22, dims), aff)
    done = 0
    while done < 500:
        seg = random_lesion_labels(rng, dims)
        les = _lesions(seg, aff)
        vs = volumetric_spatial_features(les, atlas)
        assert len(vs.values) == 78 and np.all(np.isfinite(vs.values))
        if not seg.any():
            continue
        rows = [volumetric_features(les, _brain(dims, aff)), spatial_features(les),
                morphological_features(les)]
        assert [len(r.values) for r in rows] == [19, 9, 19]
        assert all(np.all(np.isfinite(r.values)) for r in rows)
        done += 1


def test_feature_row_rejects_nonfinite():
    with pytest.raises(DegenerateInputError):
        FeatureRow("s", ("a", "b"), [1.0, np.nan])
    with pytest.raises(SchemaError):
        FeatureRow("s", ("a",), [1.0, 2.0])


def test_feature_table_csv_roundtrip(rng):
    t = FeatureTable(["a", "b"], ["x", "y", "z"], rng.normal(size=(2, 3)))
    back = FeatureTable.from_csv(t.to_csv())
    assert back.subject_ids == ["a", "b"] and back.names == ["x", "y", "z"]
    assert np.array_equal(back.values, t.values)
    with pytest.raises(SchemaError):
        t.columns(["x", "w"])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hemisphere_bins_partition_total(seed):
    rng = np.random.default_rng(seed)
    dims = (12, 6, 6)
    aff = centered_affine(dims)
    seg = random_lesion_labels(rng, dims)
    f = _feat(volumetric_spatial_features(_lesions(seg, aff), block_atlas(dims, 21, aff)))
    for t in ("necrosis_net", "edema", "et"):
        s = f[f"vs_{t}_left"] + f[f"vs_{t}_middle"] + f[f"vs_{t}_right"]
        assert s == f[f"vs_{t}_total"]
