"""Command line pipeline.

Usage::

    tractosurv <command> --config config.json [--seed N] [--threads N] [--repeats N]

Commands: ``track``, ``extract``, ``train``, ``cross-validate``, ``predict``,
``lesion-distribution`` and ``segutils-check``. Relative paths in the config
are resolved against the config file's directory. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical/degenerate error.
"""

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import atlas as atlas_mod
from . import connectome, features, segnum, selection, svm, tracking
from .errors import ConfigError, DataError, SchemaError, TractoSurvError
from .volume import Volume, check_affine, load_nifti, load_nifti_channels, resample, save_nifti

log = logging.getLogger("tractosurv")

FAMILIES = ("age", "volumetric", "spatial", "volumetric_spatial", "morphological", "tractographic")
INPUT_PATHS = ("atlas", "subcortical_atlas", "peak_field", "manifest", "subjects_dir")


@dataclass
class PipelineConfig:
    root: str
    paths: dict
    seed: int = 0
    tracking: dict = field(default_factory=dict)
    cv: svm.CVConfig = None
    rfecv_repeats: int = 20
    C: float = 1.0
    tol: float = 1e-4
    families: dict = field(default_factory=dict)
    train_family: str = "tractographic_pass_binarized"
    threads: int = 1
    segutils: dict = field(default_factory=dict)

    def path(self, key, required=True):
        p = self.paths.get(key)
        if p is None:
            if required:
                raise ConfigError(f"config is missing paths.{key}")
            return None
        return p if os.path.isabs(p) else os.path.join(self.root, p)

    @property
    def out(self):
        return self.path("output_dir")

    def tracking_params(self, rng_seed):
        return tracking.TrackingParams(rng_seed=rng_seed, **self.tracking)

    def family_enabled(self, name):
        return bool(self.families.get(name, True))


def load_config(path, seed=None, threads=None, repeats=None):
    """Parse and validate the JSON config; every check runs before any work starts."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        cv_raw = dict(raw.get("cv", {}))
        if seed is not None:
            raw["seed"] = seed
        top_seed = int(raw.get("seed", 0))
        if repeats is not None:
            cv_raw["repeats"] = repeats
        cv = svm.CVConfig(int(cv_raw.get("folds", 5)), int(cv_raw.get("repeats", 1000)), top_seed)
        svm_raw = raw.get("svm", {})
        cfg = PipelineConfig(
            root=os.path.dirname(os.path.abspath(path)),
            paths=dict(raw.get("paths", {})),
            seed=top_seed,
            tracking=dict(raw.get("tracking", {})),
            cv=cv,
            rfecv_repeats=int(raw.get("rfecv_repeats", 20)),
            C=float(svm_raw.get("C", 1.0)),
            tol=float(svm_raw.get("tol", 1e-4)),
            families=dict(raw.get("families", {})),
            train_family=raw.get("train_family", "tractographic_pass_binarized"),
            threads=int(threads if threads is not None else raw.get("threads", 1)),
            segutils=dict(raw.get("segutils", {})),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    # numeric invariants of the owning modules
    cfg.tracking_params(0)
    if cfg.rfecv_repeats < 1 or not cfg.C > 0 or not cfg.tol > 0 or cfg.threads < 1:
        raise ConfigError("rfecv_repeats, svm.C, svm.tol and threads must be positive")
    unknown = set(cfg.families) - set(FAMILIES)
    if unknown:
        raise ConfigError(f"unknown feature families {sorted(unknown)}")
    for key in INPUT_PATHS:
        p = cfg.path(key, required=False)
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"paths.{key} does not exist: {p}")
    if cfg.paths.get("output_dir") is None:
        raise ConfigError("config is missing paths.output_dir")
    return cfg


def write_text(path, text):
    """Atomic text write (temp file in the target directory, then rename)."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(path, obj):
    write_text(path, json.dumps(obj, indent=2) + "\n")


def subject_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def _records(cfg, key="manifest"):
    return svm.load_manifest(cfg.path(key))


def _subject_file(cfg, sid, name):
    return os.path.join(cfg.path("subjects_dir"), sid, name)


def _to_template(cfg, sid):
    p = _subject_file(cfg, sid, "to_template.json")
    if not os.path.exists(p):
        return np.eye(4)
    with open(p, encoding="utf-8") as f:
        return check_affine(np.array(json.load(f), dtype=np.float64))


def _lesions(cfg, sid):
    seg = load_nifti(_subject_file(cfg, sid, "seg.nii"), kind="label")
    return features.LesionSet.from_labels(seg)


def _whole_tumor_on(grid, lesions, to_template):
    return resample(lesions.wt, grid, to_template, mode="nearest")


def _failure(exc):
    return {"error": type(exc).__name__, "message": str(exc)}


def cmd_track(cfg):
    field_ = tracking.load_peak_field(cfg.path("peak_field"))
    out_dir = os.path.join(cfg.out, "tracts")
    os.makedirs(out_dir, exist_ok=True)
    report = {"subjects": {}, "failures": {}}
    for i, rec in enumerate(_records(cfg)):
        try:
            params = cfg.tracking_params(subject_seed(cfg.seed, i))
            wt = _whole_tumor_on(field_.grid, _lesions(cfg, rec.id), _to_template(cfg, rec.id))
            tracts = tracking.track_all(wt, field_, params, workers=cfg.threads)
            tracking.save_streamlines(tracts, os.path.join(out_dir, f"{rec.id}.trk"))
            report["subjects"][rec.id] = {"seeds": params.target_tracts, "accepted": len(tracts),
                                          "rejected": params.target_tracts - len(tracts)}
        except TractoSurvError as exc:
            log.warning("track %s failed: %s", rec.id, exc)
            report["failures"][rec.id] = _failure(exc)
    write_json(os.path.join(cfg.out, "track_report.json"), report)
    return report


def _family_rows(cfg, rec, lesions, to_t, aal, sub_atlas):
    """Feature rows for one subject, keyed by output file stem."""
    rows = {}
    sid = rec.id
    if cfg.family_enabled("age"):
        rows["age"] = features.FeatureRow(sid, ("age_years",), [rec.age_years])
    if cfg.family_enabled("volumetric"):
        brain = load_nifti(_subject_file(cfg, sid, "brain.nii"), kind="mask")
        rows["volumetric"] = features.volumetric_features(lesions, brain, sid)
    if cfg.family_enabled("spatial"):
        rows["spatial"] = features.spatial_features(lesions, to_t, sid)
    if cfg.family_enabled("volumetric_spatial") and sub_atlas is not None:
        moved = features.LesionSet(*(resample(m, sub_atlas.grid, to_t) for m in
                                     (lesions.necrosis_net, lesions.edema, lesions.enhancing)))
        rows["volumetric_spatial"] = features.volumetric_spatial_features(moved, sub_atlas, None, sid)
    if cfg.family_enabled("morphological"):
        rows["morphological"] = features.morphological_features(lesions, sid)
    if cfg.family_enabled("tractographic"):
        path = os.path.join(cfg.out, "tracts", f"{sid}.trk")
        if not os.path.exists(path):
            raise DataError(f"no streamlines for {sid}; run 'track' first ({path})")
        sl = tracking.load_streamlines(path)
        wt = _whole_tumor_on(aal.grid, lesions, to_t)
        for feat in connectome.tractographic_features(sl, aal, wt):
            rows[f"tractographic_{feat.kind}_{feat.variant}"] = (sid, feat)
    return rows


def cmd_extract(cfg):
    aal = atlas_mod.load_atlas(cfg.path("atlas")) if cfg.family_enabled("tractographic") else None
    sub_path = cfg.path("subcortical_atlas", required=False)
    sub_atlas = atlas_mod.load_atlas(sub_path) if sub_path else None
    collected = {}
    report = {"subjects": [], "failures": {}}
    for rec in _records(cfg):
        try:
            rows = _family_rows(cfg, rec, _lesions(cfg, rec.id), _to_template(cfg, rec.id),
                                aal, sub_atlas)
        except TractoSurvError as exc:
            log.warning("extract %s failed: %s", rec.id, exc)
            report["failures"][rec.id] = _failure(exc)
            continue
        report["subjects"].append(rec.id)
        for stem, row in rows.items():
            collected.setdefault(stem, []).append(row)

    feat_dir = os.path.join(cfg.out, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for stem, rows in collected.items():
        if stem.startswith("tractographic_"):
            lines = [",".join(connectome.feature_header(aal.n_regions))]
            lines += [",".join(connectome.feature_row(sid, feat)) for sid, feat in rows]
            text = "\n".join(lines) + "\n"
        else:
            text = features.FeatureTable.from_rows(rows).to_csv()
        write_text(os.path.join(feat_dir, f"{stem}.csv"), text)
    write_json(os.path.join(cfg.out, "extract_report.json"), report)
    return report


def load_family(cfg, family=None):
    """Feature table of a family CSV; tractographic tables keep only the weighted columns."""
    family = family or cfg.train_family
    families = family if isinstance(family, list) else [family]
    tables = []
    for fam in families:
        path = os.path.join(cfg.out, "features", f"{fam}.csv")
        if not os.path.exists(path):
            raise DataError(f"feature table {path} not found; run 'extract' first")
        with open(path, encoding="utf-8") as f:
            table = features.FeatureTable.from_csv(f.read())
        if fam.startswith("tractographic_"):
            keep = [n for n in table.names if n.startswith("vwei_")]
            table = features.FeatureTable(table.subject_ids, [f"{fam}:{n}" for n in keep],
                                          table.columns(keep))
        elif len(families) > 1:
            table = features.FeatureTable(table.subject_ids, [f"{fam}:{n}" for n in table.names],
                                          table.values)
        tables.append(table)
    ids = [s for s in tables[0].subject_ids if all(s in t.subject_ids for t in tables)]
    parts = [t.subset(ids) for t in tables]
    return features.FeatureTable(ids, sum((p.names for p in parts), []),
                                 np.hstack([p.values for p in parts]))


def _training_set(cfg):
    recs = [r for r in svm.filter_gtr(_records(cfg)) if r.survival_days is not None]
    table = load_family(cfg)
    recs = [r for r in recs if r.id in table.subject_ids]
    table = table.subset([r.id for r in recs])
    y = np.array([r.survival_class for r in recs])
    if len(set(y.tolist())) < 2:
        raise svm.LabelError("fewer than two survival classes among GTR training subjects")
    return table, y


def cmd_train(cfg):
    table, y = _training_set(cfg)
    kept = selection.variance_filter(table.values)
    if not kept:
        raise DataError("every feature was removed by the variance filter")
    X = table.values[:, kept]
    rfe_cv_cfg = svm.CVConfig(cfg.cv.folds, cfg.rfecv_repeats, cfg.cv.seed)
    sel = selection.rfe_cv(X, y, rfe_cv_cfg, cfg.C, cfg.tol, n_jobs=cfg.threads)
    cols = [kept[i] for i in sel.retained]
    Xs = table.values[:, cols]
    Xz, _, scaler = selection.zscore_fit_apply(Xs)
    model = svm.svm_fit(Xz, y, cfg.C, cfg.tol)
    # fold the z-scoring into the weights so the model applies to raw features
    w = model.weights / scaler.std
    b = model.bias - w @ scaler.mean
    names = [table.names[c] for c in cols]
    final = svm.LinearSvmModel(model.classes, w, b, cfg.C, cfg.tol, names)
    mean, std = svm.repeated_cv_accuracy(Xs, y, cfg.cv, cfg.C, cfg.tol, n_jobs=cfg.threads)
    train_acc = float(np.mean(np.array(svm.svm_predict(final, Xs)) == y))
    sel_out = selection.SelectionResult(cols, sel.curve, sel.chosen_k)
    report = {
        "family": cfg.train_family,
        "n_subjects": int(len(y)),
        "class_counts": {c: int(np.sum(y == c)) for c in svm.CLASSES},
        "n_features": len(table.names),
        "n_after_variance_filter": len(kept),
        "selected_features": names,
        "folds": cfg.cv.folds,
        "repeats": cfg.cv.repeats,
        "seed": cfg.cv.seed,
        "cv_accuracy_mean": mean,
        "cv_accuracy_std": std,
        "training_accuracy": train_acc,
    }
    write_text(os.path.join(cfg.out, "model.json"), final.to_json())
    write_text(os.path.join(cfg.out, "selection.json"), sel_out.to_json())
    write_json(os.path.join(cfg.out, "cv_report.json"), report)
    return report


def cmd_cross_validate(cfg):
    table, y = _training_set(cfg)
    kept = selection.variance_filter(table.values)
    if not kept:
        raise DataError("every feature was removed by the variance filter")
    mean, std = svm.repeated_cv_accuracy(table.values[:, kept], y, cfg.cv, cfg.C, cfg.tol,
                                         n_jobs=cfg.threads)
    report = {"family": cfg.train_family, "n_subjects": int(len(y)), "n_features": len(kept),
              "folds": cfg.cv.folds, "repeats": cfg.cv.repeats, "seed": cfg.cv.seed,
              "cv_accuracy_mean": mean, "cv_accuracy_std": std}
    write_json(os.path.join(cfg.out, "cross_validation.json"), report)
    return report


def cmd_predict(cfg, model_path=None):
    model_path = model_path or cfg.path("model", required=False) or os.path.join(cfg.out, "model.json")
    try:
        with open(model_path, encoding="utf-8") as f:
            model = svm.LinearSvmModel.from_json(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read model {model_path}: {exc}") from exc
    key = "predict_manifest" if cfg.paths.get("predict_manifest") else "manifest"
    records = _records(cfg, key)
    table = load_family(cfg)
    if model.feature_names:
        missing = [n for n in model.feature_names if n not in table.names]
        if missing:
            raise SchemaError(f"feature column {missing[0]!r} required by the model is missing")
    lines = ["id,class,days_bucket"]
    for rec in records:
        if rec.resection_status != "GTR":
            lines.append(f"{rec.id},skipped,")
            continue
        if rec.id not in table.subject_ids:
            raise SchemaError(f"subject {rec.id} has no row in the feature table")
        x = table.subset([rec.id]).columns(model.feature_names)
        cls = svm.svm_predict(model, x)[0]
        lines.append(f"{rec.id},{cls},{svm.days_bucket(cls)}")
    text = "\n".join(lines) + "\n"
    write_text(os.path.join(cfg.out, "predictions.csv"), text)
    return text


def cmd_lesion_distribution(cfg):
    sub_path = cfg.path("subcortical_atlas", required=False) or cfg.path("atlas")
    at = atlas_mod.load_atlas(sub_path)
    per_type = {t: [] for t in features.LESION_TYPES}
    failures = {}
    for rec in _records(cfg):
        try:
            les = _lesions(cfg, rec.id)
            to_t = _to_template(cfg, rec.id)
        except TractoSurvError as exc:
            failures[rec.id] = _failure(exc)
            continue
        for t in features.LESION_TYPES:
            per_type[t].append(resample(les.region(t), at.grid, to_t))
    dist = atlas_mod.lesion_region_distribution(list(per_type.items()), at)
    text = atlas_mod.distribution_csv(dist)
    write_text(os.path.join(cfg.out, "lesion_distribution.csv"), text)
    if failures:
        write_json(os.path.join(cfg.out, "lesion_distribution_failures.json"), failures)
    return text


def _segutils_selfcheck(seed):
    rng = np.random.default_rng(seed)
    checks = {}
    x = rng.normal(3.0, 2.0, size=(2, 8, 4, 4, 4))
    y = segnum.group_norm_forward(x, groups=4).reshape(2, 4, -1)
    checks["group_norm_stats"] = bool(np.all(np.abs(y.mean(axis=2)) < 1e-5)
                                      and np.all(np.abs(y.var(axis=2) - 1) < 1e-4))
    loss = rng.random((6, 6, 6))
    pos = rng.random((6, 6, 6)) < 0.05
    sel = segnum.hard_negative_select(loss, pos)
    n_neg = min(int(3 * pos.sum()), int((~pos).sum())) if pos.any() else min(128, int((~pos).sum()))
    checks["hard_negative_count"] = int((sel & ~pos).sum()) == n_neg and bool(np.all(sel[pos]))
    p = rng.dirichlet(np.ones(4), size=(1, 3, 3, 3)).transpose(0, 4, 1, 2, 3)
    avg = segnum.ensemble_average([p, p[:, ::-1]])
    checks["ensemble_simplex"] = bool(np.allclose(avg.sum(axis=1), 1.0))
    lab = rng.choice(segnum.BRATS_LABELS, size=(3, 3, 3))
    checks["decode_roundtrip"] = bool(np.array_equal(segnum.decode_labels(segnum.one_hot(lab)), lab))
    return checks


def cmd_segutils_check(cfg):
    maps = cfg.segutils.get("prob_maps")
    if maps:
        arrays, affine = [], None
        for p in maps:
            p = p if os.path.isabs(p) else os.path.join(cfg.root, p)
            data, affine = load_nifti_channels(p)
            arrays.append(np.moveaxis(data, 3, 0)[None])
        labels = tuple(cfg.segutils.get("label_values", segnum.BRATS_LABELS))
        avg = segnum.ensemble_average(arrays)
        lab = segnum.decode_labels(avg[0], labels)
        out = cfg.segutils.get("output", "ensemble_labels.nii")
        out = out if os.path.isabs(out) else os.path.join(cfg.out, out)
        os.makedirs(os.path.dirname(out), exist_ok=True)
        save_nifti(Volume(lab, affine, "label"), out)
        report = {"n_maps": len(arrays), "output": os.path.relpath(out, cfg.out)}
    else:
        report = {"checks": _segutils_selfcheck(cfg.seed)}
        report["passed"] = all(report["checks"].values())
    write_json(os.path.join(cfg.out, "segutils_report.json"), report)
    return report


COMMANDS = {
    "track": cmd_track,
    "extract": cmd_extract,
    "train": cmd_train,
    "cross-validate": cmd_cross_validate,
    "predict": cmd_predict,
    "lesion-distribution": cmd_lesion_distribution,
    "segutils-check": cmd_segutils_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tractosurv", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, help="override the top-level seed (u64)")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--repeats", type=int, help="override cross-validation repeats")
        if name == "predict":
            p.add_argument("--model", help="model JSON (default <output_dir>/model.json)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.threads, args.repeats)
        os.makedirs(cfg.out, exist_ok=True)
        if args.command == "predict":
            cmd_predict(cfg, args.model)
        else:
            result = COMMANDS[args.command](cfg)
            if args.command == "segutils-check" and result.get("passed") is False:
                print("segutils self-check failed", file=sys.stderr)
                return 4
    except TractoSurvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
