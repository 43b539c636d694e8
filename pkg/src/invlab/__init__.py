"""Group invariance in learning: symmetrization, data augmentation, feature
averaging and PAC-Bayes bounds, at desk scale."""

__version__ = "0.1.0"

from .groups import FiniteGroupAction, build_group
from .datasets import InvariantTaskSpec, LabeledDataset, generate
from .models import AverageOverGroup, ModelSpec, ParamVector, forward, load_checkpoint, save_checkpoint
from .symmetrization import SymmetrizationMode, augmented_risk, augmented_risk_mc, empirical_risk
from .training import TrainConfig, TrainMode, train
from .pac_bayes import BoundInputs, BoundReport, GaussianWeightDistribution, catoni_bound

__all__ = [
    "FiniteGroupAction", "build_group", "InvariantTaskSpec", "LabeledDataset", "generate",
    "AverageOverGroup", "ModelSpec", "ParamVector", "forward", "load_checkpoint", "save_checkpoint",
    "SymmetrizationMode", "augmented_risk", "augmented_risk_mc", "empirical_risk",
    "TrainConfig", "TrainMode", "train", "BoundInputs", "BoundReport",
    "GaussianWeightDistribution", "catoni_bound",
]
