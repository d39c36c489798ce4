"""factnas: differentiable architecture search over a factorized operator
space, where every candidate edge operation is the product of a regular
operator choice and an activation-function choice.

The high-level entry points are the sklearn-style estimators
:class:`FactorizedSearch` and :class:`GenotypeClassifier`; lower layers
(supernetwork, tri-level optimizer, genotype tools) are importable directly
for finer control.
"""

from .activations import ACTIVATION_KINDS, apply_activation
from .autodiff import Graph, Tensor, backward
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (ConfigError, DimensionError, FactnasError, FormatError,
                     NumericalError, UsageError, ValidationError)
from .estimators import FactorizedSearch, GenotypeClassifier
from .evaluator import (DiscreteNetwork, TrainConfig, evaluate,
                        macs_per_image, parameter_count, retrain)
from .genotype import (Genotype, Selection, derive_genotype, export_dot,
                       genotype_digest, parse_genotype, random_genotype,
                       serialize_genotype)
from .search import SearchConfig, SearchEngine, split_dataset
from .space import (REGULAR_OPS, SpaceConfig, arch_param_counts,
                    cell_cardinality, edge_count, space_cardinality,
                    super_operator_count)
from .supernet import MODES, ArchParams, SuperNetwork

__version__ = "0.1.0"

__all__ = [
    "ACTIVATION_KINDS",
    "ArchParams",
    "Checkpoint",
    "ConfigError",
    "DimensionError",
    "DiscreteNetwork",
    "FactnasError",
    "FactorizedSearch",
    "FormatError",
    "Genotype",
    "GenotypeClassifier",
    "Graph",
    "MODES",
    "NumericalError",
    "REGULAR_OPS",
    "SearchConfig",
    "SearchEngine",
    "Selection",
    "SpaceConfig",
    "SuperNetwork",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "ValidationError",
    "apply_activation",
    "arch_param_counts",
    "backward",
    "cell_cardinality",
    "derive_genotype",
    "edge_count",
    "evaluate",
    "export_dot",
    "genotype_digest",
    "load_checkpoint",
    "macs_per_image",
    "parameter_count",
    "parse_genotype",
    "random_genotype",
    "retrain",
    "save_checkpoint",
    "serialize_genotype",
    "space_cardinality",
    "split_dataset",
    "super_operator_count",
    "__version__",
]
