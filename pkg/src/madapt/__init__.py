"""Missing-modality adaptation on a small multimodal network.

A frozen multimodal classifier is made robust to absent input modalities by
learning one small adapter bank per available-modality subset. The package
ships its own reverse-mode autodiff on numpy, six adapter kinds, a seeded
synthetic benchmark, training and evaluation loops, a binary checkpoint
container and a command-line driver.
"""

from .adapters import (
    ALL_KINDS,
    AdapterBank,
    AdapterKind,
    apply_adapter,
    count_learnable,
    enumerate_injection_points,
    enumerate_subsets,
    init_bank,
)
from .errors import (
    ContractError,
    DimensionError,
    FormatError,
    MadaptError,
    NumericError,
    ValidationError,
)
from .evaluation import EvalArm, compute_metrics, cosine_similarity_analysis, evaluate_arm
from .io import RunConfig, load_bank, load_dataset, load_theta, save_bank, save_dataset, save_theta
from .model import (
    Batch,
    ModalitySubset,
    ModelSpec,
    Theta,
    build_model,
    duplicate_fill,
    extract_fused_feature,
    forward,
    predict,
    zero_fill,
)
from .synth import Dataset, TaskConfig, generate, oracle_accuracy
from .training import TrainConfig, adapt, poly_lr, pretrain, train_dedicated

__version__ = "0.1.0"
