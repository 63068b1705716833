"""dualcorr: dense soft correspondences between non-rigid 3D shapes.

Compute an initial all-to-all soft correspondence from self-supervised
descriptors, then iteratively denoise it with a dual-graph residual
refinement network trained per pair against smoothness, sparsity, anchor
guidance, and denoising objectives. Includes the geodesic-error evaluation
protocol and a CLI (``dualcorr gen|init|refine|eval|ablate``).
"""

from .autodiff import Adam, Tensor, grad_check
from .correspondence import (AnchorSet, SoftCorrespondence, fuse, load_corr,
                             load_vertex_map, mle_map, save_corr,
                             save_vertex_map, select_anchors)
from .dgat import Dg2nBlock, DgatLayer, dg2n_forward, dgat_forward, neighbor_table
from .evaluation import ErrorSummary, ablation_run, error_curve, geodesic_error, mge_of
from .geometry import (AugmentParams, GeoGraph, Shape, augment, fps,
                       geodesic_distances, knn_graph, laplacian, load_shape,
                       mesh_graph, save_shape, surface_area)
from .initiator import (AugmentConfig, DescriptorNet, InitiatorConfig,
                        cosine_matrix, descriptors, identity_loss,
                        infer_initial, train_initiator)
from .losses import (LossReport, LossWeights, anchor_loss, denoise_loss,
                     laplacian_loss, sparsity_loss, total_loss)
from .refine import RefineConfig, RefineTrace, refine, refine_once
from .synthetic import cylinder, icosphere, make_pair, noisy_copy

__version__ = "0.1.0"
