"""Few-shot meta-learning (MAML, FOMAML, Meta-SGD, MTL-lite) with MetaMix query-set mixup.

Everything runs on a small numpy reverse-mode autodiff engine that supports
gradients of gradients, which second-order MAML needs.
"""

from .autodiff import Node, constant, finite_diff_check, grad, no_grad
from .episodes import (
    ClassDataset,
    Episode,
    TaskDistribution,
    apply_fraction,
    generate_synthetic,
    load_dataset,
    sample_episode,
    save_dataset,
)
from .metalearn import (
    Algorithm,
    EvalReport,
    MetaConfig,
    MetaState,
    NumericalError,
    evaluate,
    inner_adapt,
    meta_gradient,
    meta_step,
    train,
)
from .mixup import LambdaScope, MixConfig, MixTarget, interpolate, mix_for_episode, mix_set, sample_beta
from .models import FrozenSplit, MlpArchitecture, accuracy, cross_entropy, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "ClassDataset",
    "Episode",
    "EvalReport",
    "FrozenSplit",
    "LambdaScope",
    "MetaConfig",
    "MetaState",
    "MixConfig",
    "MixTarget",
    "MlpArchitecture",
    "Node",
    "NumericalError",
    "TaskDistribution",
    "accuracy",
    "apply_fraction",
    "constant",
    "cross_entropy",
    "evaluate",
    "finite_diff_check",
    "forward",
    "generate_synthetic",
    "grad",
    "init_params",
    "inner_adapt",
    "interpolate",
    "load_dataset",
    "meta_gradient",
    "meta_step",
    "mix_for_episode",
    "mix_set",
    "no_grad",
    "sample_beta",
    "sample_episode",
    "save_dataset",
    "train",
]
