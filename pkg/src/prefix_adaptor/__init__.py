"""Residual adaptors that make prefix-truncated embeddings retrieval-ready."""

from .adaptor import MlpAdaptor, adapt, adapt_backward, init_adaptor, load_weights, save_weights
from .evaluator import EvalReport, ReportRow, build_report, distance_diagnostics, evaluate_retrieval, run_ablation
from .losses import DimSchedule, LossToggles, ObjectiveWeights
from .numeric import NeighborTable, PcaModel, cosine_prefix, ndcg_at_k, pca_fit, pca_transform, topk_neighbors
from .store import (
    DatasetSplit,
    EmbeddingMatrix,
    RelevanceSet,
    load_embeddings,
    load_qrels,
    save_embeddings,
    save_qrels,
    split_train_val,
)
from .trainer import TrainConfig, TrainLog, train_supervised, train_unsupervised

__version__ = "0.1.0"
