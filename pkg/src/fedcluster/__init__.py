"""Federated clustering of short-text embedding datasets.

Library plus CLI: transport-based pseudo-label generation, Gaussian-uniform
reliability weighting, robust local training, and cluster-center aggregation
across simulated clients.
"""

from .datasets import EmbeddingDataset, PartitionSpec, load_dataset, partition, save_dataset, synth_blobs
from .evaluation import accuracy, hungarian_match, nmi
from .federation import (
    GlobalCenters,
    RunOutcome,
    RunSettings,
    aggregate_global_centers,
    average_models,
    client_update,
    compute_local_centers,
    pseudo_label_schedule,
    server_run,
)
from .gum import GumParams, SampleWeights, e_step, fit, m_step, weights_from_r
from .model import (
    LossBreakdown,
    ModelParams,
    OptimizerState,
    alignment_loss,
    backward_and_step,
    clustering_loss,
    forward,
    gradients,
    init_model_params,
    load_model,
    save_model,
    total_loss,
)
from .numerics import Rng, gaussian_logpdf, kmeans, softmax_rows
from .sinkhorn import (
    PseudoLabelBatch,
    TransportConfig,
    generate_pseudo_labels,
    sinkhorn_project,
    square_normalize,
)

__version__ = "0.1.0"
