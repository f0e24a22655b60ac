"""Cross-modality person re-identification with contrastive correlation,
built on a small self-contained autodiff engine."""

from .autodiff import Tape, Tensor, backward, finite_diff_check, precision, tensor
from .backbone import IR, RGB, BackboneConfig, CommonFeature, build, embed, global_feature
from .config import ConfigError, RunConfig, load_config, save_config
from .contrast import (KernelSet, PairScore, SamplingConfig, contrastive_correlate,
                       contrastive_kernels, sample_kernels, score_pair)
from .datagen import (DataError, IdentitySample, SplitMix64, augment,
                      generate_dataset, generate_identity, make_batch,
                      read_dataset, render, write_dataset)
from .losses import LossReport, id_loss, pbce_loss, total_loss
from .model import ReidModel, build_model, load_model, save_model
from .retrieval import RetrievalResult, ScoreMatrix, cmc_curve, evaluate, mean_ap
from .train import NumericAbort, TrainLog, train

__version__ = "0.1.0"
