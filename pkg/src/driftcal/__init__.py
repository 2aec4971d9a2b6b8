"""Post-hoc uncertainty calibration that stays calibrated under gradual domain drift.

Calibrators are fitted either on a plain validation set or on a validation
set perturbed with Gaussian noise whose variances are tuned so the model's
accuracy steps down evenly from its clean value to chance.
"""

from .calibrators import (
    ETS, IRM, PBMC, TSIR, FitReport, HistogramBins, Identity, Isotonic, Platt, StepMap,
    Temperature, apply, fit_calibrator, fit_ets, fit_histogram_binning, fit_irm,
    fit_isotonic, fit_pbmc, fit_platt, fit_temperature, fit_ts_ir, load_calibrator, pava,
    save_calibrator,
)
from .data import (
    LabeledDataset, LogitRecord, LogitSet, SampleGrid, load_dataset, load_logits, softmax,
    split_dataset, write_dataset, write_logits,
)
from .harness import (
    EvaluationReport, SweepSpec, confidence_histogram, default_schedules, emit_report,
    load_report, make_blob_task, run_sweep, tune_both, valsize_sweep,
)
from .metrics import (
    PredictionSet, brier, debiased_ece, ece, micro_averaged_ece, nll, predictive_entropy,
    reliability_bins,
)
from .models import (
    BlobConfig, SoftmaxRegressionModel, accuracy, generate_blobs, load_model, predict_logits,
    save_model, train_softmax_regression,
)
from .perturbations import (
    LevelSchedule, Perturbation, affine_transform, builtin_schedule, gaussian_perturb,
    perturb_dataset,
)
from .tuner import (
    EpsilonSchedule, TunerConfig, accuracy_targets, build_perturbed_valset, calibrate_epsilons,
    nelder_mead_1d, tune_calibrator_perturbed, tune_perturbed,
)

__version__ = "0.1.0"
