"""Multi-scale temporal CNN for ICU mortality risk with DeepLIFT attributions and an exact Shapley oracle."""

from mortnet.attribution import AttributionMap, attribute, attribute_batch, sampled_shapley
from mortnet.ingest import FEATURE_NAMES, CohortDataset, PatientMatrix, build_cohort, load_cohort
from mortnet.metrics import operating_point, roc_auc
from mortnet.model import ModelConfig, Network, build_model, load_checkpoint, predict, save_checkpoint
from mortnet.report import dataset_importance, hourly_importance, marginal_importance, pos_neg_split, render
from mortnet.shapley import CoalitionalGame, ShapleyResult, exact_shapley, model_game
from mortnet.synthetic import generate_synthetic_cohort
from mortnet.trainer import TrainConfig, cross_validate, train_fold

__version__ = "0.1.0"
