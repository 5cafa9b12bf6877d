# %% [markdown]
# # Tract-based connectivity on a phantom
#
# A 32 mm cube with a straight +x fibre field, two slab regions at either end
# and a tumour slab in the middle. Every tract seeded in the tumour should run
# through both regions.

# %%
import numpy as np

from tractosurv.connectome import build_matrix, coverage_weights, tractographic_features
from tractosurv.phantoms import slab_atlas, uniform_field
from tractosurv.tracking import TrackingParams, track_all
from tractosurv.volume import Volume

dims = (32, 32, 32)
atlas = slab_atlas(dims, [(0, 10), (22, 32)])
field = uniform_field(dims)

tumor = np.zeros(dims, bool)
tumor[13:19, 8:24, 8:24] = True
tumor = Volume(tumor, np.eye(4), "mask")

# %%
params = TrackingParams(target_tracts=2000, rng_seed=7)
tracts = track_all(tumor, field, params)
print(len(tracts), "accepted of", params.target_tracts)
print("points in first tract:", len(tracts[0].points))

# %% [markdown]
# Pass-type counts every region a tract visits, end-type only the regions
# holding its two endpoints.

# %%
for kind in ("pass", "end"):
    print(kind, build_matrix(tracts, atlas, kind).w.tolist())

# %% [markdown]
# The tumour touches neither region, so the coverage weights are zero and so
# is every weighted feature vector.

# %%
cw = coverage_weights(tumor, atlas)
print("alpha:", cw.alpha)
for f in tractographic_features(tracts, atlas, tumor):
    print(f.kind, f.variant, f.v, f.v_wei)

# %%
# grow the tumour into region 1 and the weights light up
grown = tumor.data.copy()
grown[8:13, 8:24, 8:24] = True
grown = tumor.with_data(grown)
print("alpha:", coverage_weights(grown, atlas).alpha)
for f in tractographic_features(tracts, atlas, grown)[:3]:
    print(f.kind, f.variant, f.v_wei)
