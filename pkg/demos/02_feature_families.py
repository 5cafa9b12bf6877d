# %% [markdown]
# # Lesion feature families
#
# A synthetic three-compartment tumour (necrosis core, enhancing rim, edema
# shell) and the four non-tractographic families computed from it.

# %%
import numpy as np

from tractosurv.features import (LesionSet, morphological_features, spatial_features,
                                 volumetric_features, volumetric_spatial_features)
from tractosurv.phantoms import ball, block_atlas, centered_affine, lesion_labels
from tractosurv.volume import Volume

dims = (40, 40, 40)
aff = centered_affine(dims)
seg = lesion_labels(dims, center=(26, 20, 18), radius=8)
lesions = LesionSet.from_labels(Volume(seg, aff, "label"))
brain = Volume(ball(dims, (19.5, 19.5, 19.5), 19), aff, "mask")

# %%
for row in (volumetric_features(lesions, brain), spatial_features(lesions)):
    print(len(row.values), "values")
    for n, v in zip(row.names, row.values):
        print(f"  {n:28s} {v:10.3f}")

# %% [markdown]
# Volumetric-spatial features bin each lesion type by atlas label and by
# hemisphere band (|x| <= 5 mm is the middle band).

# %%
atlas = block_atlas(dims, 21, aff)
vs = volumetric_spatial_features(lesions, atlas)
print(len(vs.values), "values; nonzero:")
for n, v in zip(vs.names, vs.values):
    if v:
        print(f"  {n:28s} {v:8.0f}")

# %% [markdown]
# Shape: principal axis lengths and surface irregularity. A digital ball sits
# close to 1; a box scores higher.

# %%
morph = morphological_features(lesions)
for n, v in zip(morph.names, morph.values):
    print(f"  {n:34s} {v:8.3f}")
