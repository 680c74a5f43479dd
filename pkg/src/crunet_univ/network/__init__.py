from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .crunet import CascadeFeatureStore, CRUNet, PromptContext, crunet_forward
from .layers import BCRNNTI, CFA, CRNNTI, Conv2Plus1D, cfa_merge
from .model import (
    CRUNetMRUniv,
    ModelConfig,
    ReconInput,
    ReconOutput,
    SensitivityEstimator,
    count_parameters,
    data_consistency,
    dc_kspace,
    grow_cascades,
    model_forward,
    sme_estimate,
)
