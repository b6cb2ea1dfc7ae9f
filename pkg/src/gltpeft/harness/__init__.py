from .data import Dataset, SyntheticVolume, gen_dataset, load_dataset, make_volume, save_dataset
from .methods import METHODS, resolve
from .metrics import Metrics, auc_score, compute_metrics
from .optim import Adam
from .training import (
    AdaptConfig,
    AdaptResult,
    MetricsReport,
    PretrainConfig,
    PretrainResult,
    SweepResult,
    adapt,
    bce_loss,
    dice_loss,
    pretrain,
    soft_dice,
    sweep,
)
