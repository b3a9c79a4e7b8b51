"""Contrastive-analysis GAN: common vs. target-only latent factor separation."""

from .latent import LatentCode, PriorConfig, sample_common, sample_cr_pair, sample_salient
from .losses import LossWeights
from .networks import (
    ArchitectureConfig,
    ModelBundle,
    build_models,
    cr_predict,
    discriminate,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .data import CaDataset, CaSample, build_micro_ca
from .training import TrainConfig, TrainState, init_train_state, train, train_step
from .evaluation import (
    EvaluationReport,
    LatentTable,
    encode_dataset,
    fvae_score,
    generation_grid,
    separation_score,
    swap,
    traversal_grid,
)

__version__ = "0.1.0"
