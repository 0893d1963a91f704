"""MiniBatch split federated learning: simulator, baselines and convergence-bound checks."""
from .algorithms import (run_algorithm, run_centralized, run_fedavg, run_minibatch_sgd, run_sfl_v2)
from .analysis import (BoundInputs, BoundReport, check_divergence_lemma, check_trajectory_vs_bound,
                       check_variance_lemma, grad_variance_across_clients, grad_variance_at_client, prop1_bound,
                       prop2_bound, rate_fit, theorem1_bound)
from .data import Dataset, Shard, estimate_constants, gen_synthetic_classification, load_idx, partition_noniid
from .estimator import MiniBatchSFLClassifier, MiniBatchSFLRegressor
from .exceptions import ConfigError, FormatError, MBSFLError, NumericError, ShapeError, SpecError, WeightError
from .nn import DenseNet, LayerSpec, ModelParams, SplitSpec, init_model, split_model
from .protocol import RunLog, SplitState, minibatch_sfl_step, run_training
from .schedules import ScheduleParams, TrainConfig, gamma, lr_at

__version__ = "0.1.0"

__all__ = [
    "BoundInputs", "BoundReport", "ConfigError", "Dataset", "DenseNet", "FormatError", "LayerSpec", "MBSFLError",
    "MiniBatchSFLClassifier", "MiniBatchSFLRegressor",    "ModelParams", "NumericError", "RunLog", "ScheduleParams", "ShapeError", "Shard", "SpecError", "SplitSpec",
    "SplitState", "TrainConfig", "WeightError", "check_divergence_lemma", "check_trajectory_vs_bound",
    "check_variance_lemma", "estimate_constants", "gamma", "gen_synthetic_classification",
    "grad_variance_across_clients", "grad_variance_at_client", "init_model", "load_idx", "lr_at",
    "minibatch_sfl_step", "partition_noniid", "prop1_bound", "prop2_bound", "rate_fit", "run_algorithm",
    "run_centralized", "run_fedavg", "run_minibatch_sgd", "run_sfl_v2", "run_training", "split_model",
    "theorem1_bound",
]
