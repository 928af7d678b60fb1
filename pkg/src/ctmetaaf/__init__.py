"""Classification-trained meta-adaptive echo cancellation."""
from .canceller import FilterState, filter_step, init_state
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (CheckpointError, ConfigurationError, CorpusError, CTMetaAFError, GenerationError,
                     NumericError, UsageError)
from .estimators import KalmanAEC, KWSClassifier, MetaAEC
from .evaluation import ExperimentSpec, MetricsReport, run_experiment, swap_matrix
from .kalman import KalmanParams, run_kalman
from .metrics import erle, f1_scores, paired_significance
from .training import TrainConfig, joint_loss, meta_loss, train_joint, train_kws, train_optimizer

__version__ = "0.1.0"
