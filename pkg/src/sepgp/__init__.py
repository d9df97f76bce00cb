"""Sparse Gaussian process classification trained with scalable expectation propagation."""

from .dataset import (
    DataError,
    Dataset,
    MinibatchSchedule,
    Standardization,
    init_inducing,
    load_csv,
    load_pima,
    make_blobs,
    split,
    standardize,
)
from .distributed import distributed_train, master_combine, partition, worker_round
from .ep import (
    PosteriorApprox,
    SiteFactors,
    cavity,
    init_sites,
    moment_mismatch,
    parallel_sweep,
    reconstruct,
    run_ep,
    site_update,
)
from .kernel import Hyperparameters, KernelBundle, build_bundle, initial_hyperparameters, k_eval
from .objective import grad_log_Zq, log_Zq, stochastic_grad
from .optimizer import Adadelta, AdaptiveRate
from .predictor import EvalReport, LatentPrediction, evaluate, predict_latent, predict_proba
from .trainer import (
    LearningCurve,
    Model,
    TrainConfig,
    checkpoint,
    restore,
    train,
    train_batch,
    train_stochastic,
)

__version__ = "0.1.0"
