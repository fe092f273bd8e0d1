"""graphsmooth: graph-smoothness regularized training with a robustness harness.

The toolkit trains small dense/convolutional networks from scratch while
penalizing layer-to-layer changes in the Laplacian smoothness of class-label
signals on batch similarity graphs, and evaluates the trained models under
Gaussian noise, gradient-sign attacks, fault dropout, and weight quantization.
"""

from .config import RegularizerConfig, TrainConfig
from .datasets import Dataset, load_cifar_bin, load_idx, make_synthetic, normalize
from .errors import ConfigError, DataFormatError, DegenerateInputError, GraphSmoothError
from .graphs import (SimilarityGraph, SimilarityMatrix, Spectrum, bandwidth_estimate,
                     build_similarity_matrix, cosine_similarity, eigendecompose, gft,
                     knn_adjacency, laplacian, laplacian_power,
                     laplacian_power_normalized, smoothness)
from .network import (ForwardTrace, Layer, NetworkModel, backward, build_model,
                      forward_with_trace, load_checkpoint, predict, save_checkpoint,
                      sgd_momentum_step, softmax_cross_entropy)
from .regularize import (convex_combine, conv_renormalization, parseval_retraction,
                         smoothness_regularizer)
from .signals import (LabelSignalSet, SmoothnessProfile, delta_total,
                      layer_smoothness_sum, make_label_signals, smoothness_gap)
from .training import evaluate_accuracy, loss_parts, train

__version__ = "0.1.0"
