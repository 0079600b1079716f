"""Joint discovery of latent concepts and their governing ODEs from trajectories.

The pipeline: ``simulate`` builds physics datasets, ``model``/``train`` fit a
latent-ODE autoencoder to them, and ``analyze`` checks the learned latents and
governing function against the ground-truth concepts. ``cli`` wires it all to
``conceptode`` subcommands.
"""

__version__ = "0.1.0"

from .analyze import (AblationCurve, FitReport, LinearFit, build_report,
                      fit_latent_linear, latent_metrics, probe_governing,
                      relative_errors, run_ablation, select_latent_dim)
from .model import (ModelConfig, ModelParams, encode, init_model, load_checkpoint,
                    model_config_for, rollout, save_checkpoint)
from .odeint import FuncField, OdeField, SolverConfig, SolverError, \
    adjoint_backward, integrate
from .simulate import Dataset, SystemSpec, default_spec, generate, load_dataset, \
    save_dataset
from .train import (LossBreakdown, TrainConfig, TrainingDiverged,
                    default_train_config, evaluate, fit, kl_divergence,
                    reconstruction_loss)

__all__ = [
    "__version__",
    "AblationCurve", "FitReport", "LinearFit", "build_report",
    "fit_latent_linear", "latent_metrics", "probe_governing",
    "relative_errors", "run_ablation", "select_latent_dim",
    "ModelConfig", "ModelParams", "encode", "init_model", "load_checkpoint",
    "model_config_for", "rollout", "save_checkpoint",
    "FuncField", "OdeField", "SolverConfig", "SolverError",
    "adjoint_backward", "integrate",
    "Dataset", "SystemSpec", "default_spec", "generate", "load_dataset",
    "save_dataset",
    "LossBreakdown", "TrainConfig", "TrainingDiverged", "default_train_config",
    "evaluate", "fit", "kl_divergence", "reconstruction_loss",
]
