"""CFSG: concept-feature structuralized generalization.

A trainable multi-granularity classifier whose feature and classifier-weight
spaces are partitioned into common / specific / confounding channel blocks,
trained with structuralization losses and evaluated with explicitly weighted
structured inference.
"""

__version__ = "0.1.0"

from .autodiff import (GradTape, Tensor, cosine_similarity, cross_entropy,
                       finite_difference_grad, kl_divergence, softmax)
from .classifier import (ClassifierHead, StructuredClassifier, disentangle_weights,
                         normalize_inference_weights, predict, structured_logits)
from .errors import (CFSGError, CheckpointError, DimensionError, DivergenceError,
                     NumericError, UndefinedCorrelationError,
                     UninitializedCentroidError, ValidationError)
from .estimator import CFSGClassifier
from .explain import (NCReport, SimilarityReport, concept_similarity_matrix,
                      hierarchy_alignment, nc_diagnostics)
from .hierarchy import HierarchySpec, build_hierarchy, load_hierarchy, save_hierarchy
from .losses import (LossBreakdown, LossCoefficients, coarse_ce_loss,
                     common_granularity_similarity, common_sibling_similarity,
                     compute_losses, disentanglement_loss,
                     prediction_alignment_loss, specific_divergence, total_loss)
from .model import (PartitionSpec, StructuredFeatures, disentangle_features,
                    partition_channels)
from .network import CFSGNetwork, ForwardState
from .rankstats import average_ranks, spearman_rho
from .subcentroid import SubCentroidBank, batch_part_prototypes
from .synthdata import (Dataset, SyntheticDomainConfig, generate_synthetic_domains,
                        load_dataset, save_dataset)
from .train import (Checkpoint, TrainConfig, evaluate, load_checkpoint,
                    save_checkpoint, simplex_grid, train, weight_sweep)

__all__ = [name for name in dir() if not name.startswith("_")]
