# %% [markdown]
# # Survival classification on a synthetic cohort
#
# Twelve subjects, nine with gross total resection. The cohort writer places
# each tumour according to its survival class, so the classes are separable
# from tumour position and from the tracts passing through it.
#
# The same steps are available from the shell:
#
#     tractosurv track --config cohort/config.json
#     tractosurv extract --config cohort/config.json
#     tractosurv train --config cohort/config.json
#     tractosurv predict --config cohort/config.json

# %%
import json
import tempfile
from pathlib import Path

from tractosurv.cli import main
from tractosurv.phantoms import write_cohort

root = Path(tempfile.mkdtemp())
cfg = write_cohort(root)
print(Path(cfg).read_text())

# %%
for step in ("track", "extract", "train", "predict"):
    print(step, "->", main([step, "--config", cfg]))

# %%
out = root / "out"
print(json.dumps(json.loads((out / "track_report.json").read_text())["subjects"]["sub01"]))
report = json.loads((out / "cv_report.json").read_text())
print("selected:", report["selected_features"])
print("cv accuracy: %.3f +/- %.3f" % (report["cv_accuracy_mean"], report["cv_accuracy_std"]))
print((out / "predictions.csv").read_text())

# %% [markdown]
# Recursive elimination curve: mean cross-validated accuracy per feature count.

# %%
sel = json.loads((out / "selection.json").read_text())
for k, acc in sel["curve"]:
    print(f"{k:3d} {'#' * int(40 * acc)} {acc:.3f}")

# %% [markdown]
# Swap the training family to the tumour centroids and run again.

# %%
c = json.loads(Path(cfg).read_text())
c["train_family"] = "spatial"
Path(cfg).write_text(json.dumps(c, indent=2))
main(["train", "--config", cfg])
print(json.loads((out / "cv_report.json").read_text())["cv_accuracy_mean"])
