"""Joint multi-task bag classification with task-balancing strategies."""

from .balancing import BALANCER_NAMES, Balancer, BalancerSpec, make_balancer
from .crossval import RunReport, run_crossval, run_sweep
from .data import Cohort, CohortTable, FeatureBag, SynthSpec, load_cohort, read_features, synth_cohort, write_features
from .estimator import JointMTLClassifier
from .exceptions import CohortError, ConfigError, FormatError, InputError, JointMTLError, MetricError, SplitError
from .metrics import auprc, auroc, silhouette
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit_model, kfold_split

__version__ = "0.1.0"
