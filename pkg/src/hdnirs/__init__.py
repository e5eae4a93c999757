"""Decoding working-memory load from high-channel-count optical recordings.

The package covers the full chain: raw intensities through robust quality
control, bad-channel imputation against a Huber-mean grand covariance,
incremental ZCA whitening, chromophore feature extraction, and a jointly
convex multi-session logistic decoder with trace-norm and anisotropic
Tikhonov regularization, plus cross-validated evaluation, ablations, and
a ground-truth synthetic generator.
"""

from .core import (DEFAULT_SEGMENT_WINDOW, FORMAT_VERSION, DecoderModel,
                   Event, FormatError, Montage, NumericalError, QualityMask,
                   SessionRecording, TrialFeatures, ValidationError,
                   load_model, load_session, save_model, save_session)
from .covariance import (GrandCovariance, ImputationModel, fit_imputation,
                         huber_mean_covariance, impute,
                         leave_session_out_covariance, load_covariance,
                         save_covariance, windowed_covariances,
                         with_noise_scale)
from .decoder import (MtlProblem, PenaltyOperators, SolverConfig,
                      build_spatial_operator, compactly_supported_correlation,
                      displaced_midpoints, haufe_activation, predict_label,
                      predict_proba, solve, summarize_weights,
                      temporal_matrix)
from .evaluation import (CvPlan, LeakageError, SearchConfig, ablate,
                         audit_leakage, block_average, hyper_search,
                         make_folds, metrics, paired_accuracy_tests,
                         permute_labels, run_cv, write_ablation_csv,
                         write_block_average_csv, write_cv_report)
from .features import (DEFAULT_DPF, DEFAULT_EXTINCTION_1_MM_CM,
                       ExtinctionTable, assemble_features,
                       chromophore_forward, resample_trial, segment_trials,
                       to_chromophores, zscore_apply, zscore_fit)
from .montage import dense_dual_module_montage, desk_montage
from .pipeline import (PipelineConfig, predict_session, prepare_session,
                       train_decoder)
from .preprocess import (PreprocConfig, ambient_correct, bandpass_zero_phase,
                         highpass_zero_phase, quality_mask, select_channels,
                         shift_noise_floor, sliding_cov, to_delta_od)
from .synthetic import (Corpus, SimConfig, generate_corpus, load_corpus,
                        plant_artifacts, save_corpus, stress_config)
from .zca import ZcaState, shrink, whiten, whitening_transform, zca_init, zca_update

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
