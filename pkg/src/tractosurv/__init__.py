"""Tractographic and radiomic features from brain-tumour masks, and
overall-survival classification with RFE and a linear SVM."""

from .errors import TractoSurvError
from .volume import Volume, Grid, load_nifti, save_nifti, resample, zscore_brain
from .atlas import ParcellationAtlas, region_volumes, lesion_region_distribution, onehot_channels
from .tracking import PeakField, TrackingParams, Streamline, StreamlineSet, seed_points, track_one, track_all
from .connectome import (ConnectivityMatrix, build_matrix, normalize, binarize, column_sums,
                         coverage_weights, tractographic_features)
from .features import (LesionSet, FeatureRow, FeatureTable, volumetric_features, spatial_features,
                       volumetric_spatial_features, morphological_features)
from .selection import variance_filter, zscore_fit_apply, rfe_cv, SelectionResult
from .svm import (CVConfig, LinearSvmModel, SubjectRecord, class_of_days, filter_gtr, svm_fit,
                  svm_predict, stratified_folds, repeated_cv_accuracy)
from .segnum import group_norm_forward, hard_negative_select, ensemble_average, decode_labels

__version__ = "0.1.0"
