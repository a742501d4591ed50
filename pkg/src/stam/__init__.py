"""Stacked global attention over clip features, with a small numpy autodiff."""

from .attention import AttentionTrace, GlobalAttentionLayerParams, StamStack, layer_forward, stack_forward
from .autodiff import AdamState, ParamStore, Tensor, adam_step, check_gradients, no_grad
from .errors import ConfigError, DimensionError, DomainError, GradientError, NumericalError, StamError
from .harness import (
    ExperimentConfig,
    ModelConfig,
    OutputConfig,
    RunReport,
    TrainConfig,
    compare_baselines,
    export_attention_trace,
    run_avg_consensus,
    run_vanilla_stack,
    sweep_layers,
    train,
)
from .heads import LossWeights, combined_loss, predict
from .initializers import INITIALIZER_KINDS, GlobalInitializer
from .model import StamModel, VanillaStackModel
from .synthetic import NeedleTaskSpec, generate, oracle_avg_accuracy, oracle_signal_accuracy

__version__ = "0.1.0"
