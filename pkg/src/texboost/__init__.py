"""Texture features, boosted trees and explanations for ultrasound tumor ROIs."""

from .dataset_io import (Case, GrayImage, RoiMask, SplitConfig, load_image, load_mask,
                         scan_dataset, split_dataset)
from .evaluation import EvalReport, evaluate, roc_auc
from .explain import global_importance, shap_values, trace_paths
from .gbdt import (Ensemble, GbdtConfig, load_model, predict_margin, predict_proba,
                   save_model, train)
from .stats import TTestResult, feature_comparison_report, t_test
from .texture import (FeatureVector, FirstOrderConfig, GlcmConfig, compute_glcm,
                      extract_roi_pixels, feature_vector, first_order_features,
                      glcm_features)

__version__ = "0.1.0"
