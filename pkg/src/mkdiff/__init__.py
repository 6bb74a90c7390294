"""Multi-kernel diffusion convolutional networks for point clouds.

A numpy/scipy implementation of graph construction, sparse Laplacian
diffusion operators, a trainable diffusion + per-node convolution network
with hand-derived gradients, and the descriptor-learning / body-part
segmentation evaluation pipeline.
"""

from .pointset import (BODY_PART_NAMES, CloudParseError, DatasetManifest,
                       PointCloud, ShapeEntry, add_gaussian_noise,
                       add_outliers, generate_synthetic_body, load_cloud,
                       load_manifest, remove_points, save_cloud,
                       save_manifest, synthesize_dataset)
from .spgraph import (NeighborLists, build_adjacency, build_knn, degrees,
                      distance_graph, graph_geodesics, laplacian, propagation,
                      spmm)
from .spectral import (BankEntry, DiffusionConfig, KernelBank,
                       SpectralDecomposition, apply_bank, apply_bank_adjoint,
                       build_kernel_bank, cg_solve, diffuse, lanczos_eigs)
from .net import (Architecture, NetworkParams, OptimizerState, adam_step,
                  backward, dropout, forward, init_params,
                  instance_norm_forward, instance_norm_backward,
                  label_weights, softmax, triplet_hinge_loss,
                  weighted_ce_loss)
from .tasks import (PAPER_SIGMAS, Checkpoint, TrainConfig, extract_descriptors,
                    load_checkpoint, predict_labels, sample_triplets,
                    save_checkpoint, train_descriptor, train_segmentation)
from .evaluation import (DiceReport, MetricCurve, cmc_curve,
                         correspondence_quality, curve_to_csv,
                         descriptor_pair_distances, dice_report,
                         evaluate_descriptors, evaluate_segmentation,
                         export_metrics_json, mean_curve, robustness_sweep,
                         roc_curve)

__version__ = "0.1.0"
