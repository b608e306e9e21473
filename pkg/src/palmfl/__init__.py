"""Federated palmprint verification with personalised and shared models."""

from .data import BenchmarkSplit, Dataset, SynthConfig, generate_synthetic, load_image_directory, make_benchmark_split
from .evaluation import EvalReport, ScoreSet, compute_eer, compute_roc, evaluate, evaluate_scenario, identification_acc
from .federation import (
    FederationConfig,
    aggregate,
    local_training,
    run_fedavg_baseline,
    run_federation,
    run_local_baseline,
)
from .losses import LossWeights, cross_entropy, hybrid_loss, sup_contrastive
from .models import EmbeddingConfig, ExpertConfig, Model, expert_forward, gabor_kernel, model_forward
from .numeric import ParamVector, cosine_similarity, finite_diff_grad, make_rng, matmul
from .teim import BlendParams, FeaturePool, blend, enhance, route, score_candidates

__version__ = "0.1.0"
