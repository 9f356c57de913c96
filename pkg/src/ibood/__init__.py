"""Information-bottleneck embedding re-training for out-of-distribution detection."""

from .data_ingest import BatchPlan, ImageDataset, OodTask, build_task, iterate_batches, parse_idx, write_idx
from .ib_loss import (
    ClassPrototypes,
    EmbeddingBatch,
    IBLossConfig,
    LossBreakdown,
    class_distance,
    compression_term,
    grad_check,
    ib_loss,
    mcdd_loss,
    relevance_term,
)
from .nets import Discriminator, EmbeddingHead, Generator, embed, load_params, save_params
from .score_eval import KdeModel, ScoreReport, anomaly_score, auprc, evaluate_task, fit_kde, separation_ratio
from .train import GanTrainConfig, IBTrainConfig, TrainLog, pretrain_gan, retrain_ib, run_experiment

__version__ = "0.1.0"
